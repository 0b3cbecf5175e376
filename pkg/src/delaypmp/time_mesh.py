"""Uniform time grids, sampled functions and delay vectors.

Every trajectory in the package (state, adjoint, control, history) is a
:class:`SampledFunction`: values on a uniform :class:`TimeGrid` plus an
interpolation rule.  A sampled function may carry a *history* segment that
answers queries left of its own grid, which is how the initial functions on
``[-delta, 0]`` are glued to a solution on ``[0, t_f]``.

Evaluation accepts a ``side`` hint (``"right"`` or ``"left"``) that selects the
one-sided limit at grid nodes and at the history junction.  Fixed-step
integrators use it so that a step over ``[t_i, t_{i+1}]`` only ever sees the
control values of that cell.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "OutOfDomain",
    "TimeGrid",
    "SampledFunction",
    "DelayVector",
    "eval_delayed",
    "eval_advanced",
    "constant_function",
    "time_eps",
]

INTERP_KINDS = ("constant", "linear", "cubic")


class OutOfDomain(ValueError):
    """Raised when a sampled function is queried outside its domain."""


def time_eps(scale: float) -> float:
    """Absolute tolerance used when comparing times on a grid of extent ``scale``."""
    return 1e-12 * max(1.0, abs(scale))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_start = nodes[0] < ... < nodes[n_steps] = t_end``."""

    t_start: float
    t_end: float
    n_steps: int

    def __post_init__(self) -> None:
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")
        if not self.t_end > self.t_start:
            raise ValueError(f"empty grid [{self.t_start}, {self.t_end}]")
        object.__setattr__(self, "t_start", float(self.t_start))
        object.__setattr__(self, "t_end", float(self.t_end))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @classmethod
    def with_max_step(cls, t_start: float, t_end: float, h_max: float) -> "TimeGrid":
        n = max(1, int(math.ceil((t_end - t_start) / h_max - 1e-9)))
        return cls(t_start, t_end, n)

    @property
    def h(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        nodes = self.t_start + self.h * np.arange(self.n_steps + 1)
        nodes[-1] = self.t_end
        return nodes

    def refined(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t_start, self.t_end, self.n_steps * factor)

    def contains(self, t: float) -> bool:
        eps = time_eps(self.t_end - self.t_start)
        return self.t_start - eps <= t <= self.t_end + eps


class SampledFunction:
    """Vector-valued function sampled on a uniform grid.

    Parameters
    ----------
    grid : TimeGrid
        Sampling grid.
    values : array_like, shape (n_steps + 1, d) or (n_steps + 1,)
        Node values.  One-dimensional input is treated as ``d = 1``.
    interp : {"constant", "linear", "cubic"}
        ``constant`` is right-continuous piecewise constant, ``cubic`` is
        cubic Hermite and needs node derivatives.
    derivs : array_like, optional
        Node derivatives for cubic Hermite interpolation, same shape as
        ``values``.  May also be given as a pair ``(d_start, d_end)`` of arrays
        of shape ``(n_steps, d)`` holding one-sided derivatives at the left and
        right end of every cell; this keeps the interpolant exact across
        derivative jumps located at nodes.  When omitted for ``cubic``,
        second-order finite differences are used.
    history : SampledFunction, optional
        Function answering queries with ``t < grid.t_start``.
    """

    __slots__ = ("grid", "values", "interp", "history", "_d0", "_d1", "_t0", "_h", "_n", "_eps")

    def __init__(self, grid: TimeGrid, values, interp: str = "linear", derivs=None,
                 history: "SampledFunction | None" = None) -> None:
        if interp not in INTERP_KINDS:
            raise ValueError(f"unknown interpolation {interp!r}")
        vals = np.array(values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.ndim != 2 or vals.shape[0] != grid.n_steps + 1:
            raise ValueError(
                f"values must have {grid.n_steps + 1} rows, got shape {vals.shape}")
        vals.setflags(write=False)
        self.grid = grid
        self.values = vals
        self.interp = interp
        self.history = history
        if history is not None and history.dim != vals.shape[1]:
            raise ValueError("history dimension does not match values")
        self._d0 = self._d1 = None
        if interp == "cubic":
            if derivs is None:
                d = np.gradient(vals, grid.h, axis=0, edge_order=2)
                d0, d1 = d[:-1], d[1:]
            elif isinstance(derivs, tuple):
                d0 = np.asarray(derivs[0], dtype=float).reshape(grid.n_steps, -1)
                d1 = np.asarray(derivs[1], dtype=float).reshape(grid.n_steps, -1)
            else:
                d = np.asarray(derivs, dtype=float).reshape(vals.shape)
                d0, d1 = d[:-1], d[1:]
            self._d0 = np.array(d0)
            self._d1 = np.array(d1)
        self._t0 = grid.t_start
        self._h = grid.h
        self._n = grid.n_steps
        self._eps = time_eps(grid.t_end - grid.t_start)

    # ------------------------------------------------------------------
    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def t_start(self) -> float:
        return self.history.t_start if self.history is not None else self.grid.t_start

    @property
    def t_end(self) -> float:
        return self.grid.t_end

    @property
    def derivatives(self):
        """One-sided node derivatives ``(d_start, d_end)`` for cubic functions."""
        return None if self._d0 is None else (self._d0, self._d1)

    def _locate(self, t: float, side: str) -> tuple[int, float]:
        x = (t - self._t0) / self._h
        i = math.floor(x)
        theta = x - i
        # snap to nodes so that side hints are honoured under rounding
        if theta < 1e-9:
            theta = 0.0
        elif theta > 1.0 - 1e-9:
            i += 1
            theta = 0.0
        if theta == 0.0 and side == "left" and i > 0:
            i -= 1
            theta = 1.0
        if i >= self._n:
            i, theta = self._n - 1, 1.0
        elif i < 0:
            i, theta = 0, 0.0
        return i, theta

    def __call__(self, t: float, side: str = "right") -> np.ndarray:
        return self.eval(t, side)

    def eval(self, t: float, side: str = "right") -> np.ndarray:
        """Value at time ``t``; raises :class:`OutOfDomain` outside the domain."""
        t = float(t)
        if t < self._t0 - self._eps or (t <= self._t0 + self._eps and side == "left"
                                         and self.history is not None):
            if self.history is None:
                raise OutOfDomain(
                    f"t={t!r} is left of the domain [{self._t0}, {self.grid.t_end}]")
            return self.history.eval(min(t, self.history.t_end), side)
        if t > self.grid.t_end + self._eps:
            raise OutOfDomain(f"t={t!r} is right of the domain [{self.t_start}, {self.t_end}]")
        i, theta = self._locate(t, side)
        v = self.values
        if self.interp == "constant":
            return v[i + 1].copy() if theta == 1.0 and side != "left" else v[i].copy()
        if theta == 0.0:
            return v[i].copy()
        if theta == 1.0:
            return v[i + 1].copy()
        if self.interp == "linear":
            return (1.0 - theta) * v[i] + theta * v[i + 1]
        h = self._h
        t2 = theta * theta
        t3 = t2 * theta
        h00 = 2 * t3 - 3 * t2 + 1
        h10 = t3 - 2 * t2 + theta
        h01 = -2 * t3 + 3 * t2
        h11 = t3 - t2
        return h00 * v[i] + h10 * h * self._d0[i] + h01 * v[i + 1] + h11 * h * self._d1[i]

    def sample(self, times: Sequence[float], side: str = "right") -> np.ndarray:
        """Values at ``times`` as an array of shape ``(len(times), d)``.

        Vectorised equivalent of calling :meth:`eval` at every time.
        """
        t = np.asarray(times, dtype=float).reshape(-1)
        out = np.empty((t.size, self.dim))
        if t.size == 0:
            return out
        if side == "left" and self.history is not None:
            left = t <= self._t0 + self._eps
        else:
            left = t < self._t0 - self._eps
        if np.any(left):
            if self.history is None:
                raise OutOfDomain(
                    f"t={t[left].min()!r} is left of the domain [{self._t0}, {self.grid.t_end}]")
            out[left] = self.history.sample(np.minimum(t[left], self.history.t_end), side)
        body = ~left
        if not np.any(body):
            return out
        tb = t[body]
        if tb.max() > self.grid.t_end + self._eps:
            raise OutOfDomain(f"t={tb.max()!r} is right of the domain [{self.t_start}, {self.t_end}]")
        x = (tb - self._t0) / self._h
        i = np.floor(x).astype(np.int64)
        theta = x - i
        lo = theta < 1e-9
        hi = theta > 1.0 - 1e-9
        theta[lo] = 0.0
        i[hi] += 1
        theta[hi] = 0.0
        if side == "left":
            back = (theta == 0.0) & (i > 0)
            i[back] -= 1
            theta[back] = 1.0
        over = i >= self._n
        i[over] = self._n - 1
        theta[over] = 1.0
        under = i < 0
        i[under] = 0
        theta[under] = 0.0
        v = self.values
        th = theta[:, None]
        if self.interp == "constant":
            take_next = (theta == 1.0) & (side != "left")
            out[body] = np.where(take_next[:, None], v[np.minimum(i + 1, self._n)], v[i])
        elif self.interp == "linear":
            out[body] = (1.0 - th) * v[i] + th * v[i + 1]
        else:
            t2 = th * th
            t3 = t2 * th
            out[body] = ((2 * t3 - 3 * t2 + 1) * v[i] + (t3 - 2 * t2 + th) * self._h * self._d0[i]
                         + (3 * t2 - 2 * t3) * v[i + 1] + (t3 - t2) * self._h * self._d1[i])
        return out

    def with_history(self, history: "SampledFunction | None") -> "SampledFunction":
        derivs = None if self._d0 is None else (self._d0, self._d1)
        return SampledFunction(self.grid, self.values, self.interp, derivs, history)

    def shifted(self, lag: float) -> "SampledFunction":
        """The function ``t -> self(t - lag)`` (grid moved right by ``lag``)."""
        g = TimeGrid(self.grid.t_start + lag, self.grid.t_end + lag, self.grid.n_steps)
        hist = None if self.history is None else self.history.shifted(lag)
        derivs = None if self._d0 is None else (self._d0, self._d1)
        return SampledFunction(g, self.values, self.interp, derivs, hist)

    # ------------------------------------------------------------------
    def to_csv(self, path, names: Sequence[str] | None = None) -> None:
        """Write ``t`` and one column per component with 17 significant digits."""
        names = list(names) if names is not None else [f"f_{k + 1}" for k in range(self.dim)]
        if len(names) != self.dim:
            raise ValueError("one name per component required")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", *names])
            for t, row in zip(self.grid.nodes, self.values):
                w.writerow([f"{t:.17g}", *(f"{v:.17g}" for v in row)])

    @classmethod
    def from_csv(cls, path, interp: str = "linear") -> tuple["SampledFunction", list[str]]:
        """Read a CSV written by :meth:`to_csv`; the time column must be uniform."""
        with open(Path(path), newline="") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 3 or not rows[0] or rows[0][0] != "t":
            raise ValueError(f"{path}: expected header starting with 't' and >= 2 rows")
        try:
            data = np.array([[float(c) for c in r] for r in rows[1:]])
        except ValueError as exc:
            raise ValueError(f"{path}: non-numeric entry ({exc})") from None
        if data.ndim != 2 or data.shape[1] != len(rows[0]):
            raise ValueError(f"{path}: ragged rows")
        t = data[:, 0]
        grid = TimeGrid(t[0], t[-1], len(t) - 1)
        if np.max(np.abs(t - grid.nodes)) > 1e-9 * max(1.0, abs(t[-1] - t[0])):
            raise ValueError(f"{path}: time column is not uniform")
        return cls(grid, data[:, 1:], interp), rows[0][1:]

    def __repr__(self) -> str:
        return (f"SampledFunction(dim={self.dim}, grid=[{self.grid.t_start:g}, "
                f"{self.grid.t_end:g}]x{self.grid.n_steps}, interp={self.interp!r}, "
                f"history={'yes' if self.history is not None else 'no'})")


def constant_function(value, t_start: float, t_end: float, interp: str = "constant") -> SampledFunction:
    value = np.atleast_1d(np.asarray(value, dtype=float))
    grid = TimeGrid(t_start, t_end, 1)
    return SampledFunction(grid, np.vstack([value, value]), interp)


@dataclass(frozen=True)
class DelayVector:
    """Constant delays ``(tau0, tau1, tau2)`` bounded by ``delta``.

    ``tau0`` shifts the explicit time argument, ``tau1`` the state and ``tau2``
    the control.
    """

    tau0: float = 0.0
    tau1: float = 0.0
    tau2: float = 0.0
    delta: float = 1.0

    def __post_init__(self) -> None:
        for name in ("tau0", "tau1", "tau2", "delta"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        for name in ("tau0", "tau1", "tau2"):
            v = getattr(self, name)
            if not 0.0 <= v <= self.delta:
                raise ValueError(f"{name}={v} outside [0, delta={self.delta}]")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.tau0, self.tau1, self.tau2)

    def scaled(self, s: float) -> "DelayVector":
        return DelayVector(s * self.tau0, s * self.tau1, s * self.tau2, self.delta)

    @property
    def is_zero(self) -> bool:
        return self.tau0 == 0.0 and self.tau1 == 0.0 and self.tau2 == 0.0

    def min_positive_lag(self) -> float | None:
        """Smallest positive delay among the sampled arguments (tau1, tau2)."""
        lags = [v for v in (self.tau1, self.tau2) if v > 0]
        return min(lags) if lags else None


def eval_delayed(f: SampledFunction, t: float, lag: float, side: str = "right") -> np.ndarray:
    """``f(t - lag)``; history segments answer negative times."""
    return f.eval(t - lag, side)


def eval_advanced(f: SampledFunction, t: float, lead: float, horizon: float,
                  side: str = "right") -> tuple[np.ndarray, int]:
    """``(f(t + lead), 1)`` if ``t + lead <= horizon``, else ``(0, 0)``.

    The indicator is decided before any interpolation, so nothing past the
    horizon is ever read.
    """
    if t + lead > horizon + time_eps(horizon):
        return np.zeros(f.dim), 0
    return f.eval(min(t + lead, horizon), side), 1
