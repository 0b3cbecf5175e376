"""Optimal control problems with constant state and control delays.

A problem is the data of

    x'(t) = f(t, t - tau0, x(t), x(t - tau1), u(t), u(t - tau2)),   t in [0, t_f]
    x = phi1, u = phi2 on [-delta, 0],   u(t) in U,   x(t_f) in target,

    minimise  int_0^t_f f0(t, t - tau0, x(t), x(t - tau1), u(t), u(t - tau2)) dt.

Callbacks take ``(t, s, x, y, u, v)``.  Built-in problems write them with
numpy broadcasting so that a whole batch of evaluation points can be passed
at once (``vectorized=True``); user callbacks may be pointwise.

Jacobians are of the *extended* field ``(f, f0)`` and therefore have ``n + 1``
rows, the cost row last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .time_mesh import DelayVector, SampledFunction, TimeGrid, constant_function

__all__ = [
    "ControlSet",
    "Target",
    "AffineStructure",
    "OcpProblem",
    "hamiltonian",
    "fd_jacobians",
    "build_counterexample",
    "build_delayed_lq",
    "regularized",
    "GuinnReduction",
    "guinn_reduce",
]

Callback = Callable[..., np.ndarray]


# ----------------------------------------------------------------------
# Control sets and targets
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class ControlSet:
    """Compact convex control set (ball or box) or a finite vertex list.

    ``product`` stacks ``copies`` independent copies of ``base``; it is only
    produced by :func:`guinn_reduce`.
    """

    kind: str
    radius: float = 1.0
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    vertices: Optional[np.ndarray] = None
    dim: int = 1
    base: Optional["ControlSet"] = None
    copies: int = 1

    @classmethod
    def ball(cls, radius: float = 1.0, dim: int = 2) -> "ControlSet":
        if radius <= 0:
            raise ValueError("ball radius must be positive")
        return cls("ball", radius=float(radius), dim=int(dim))

    @classmethod
    def box(cls, lower, upper) -> "ControlSet":
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        if lo.shape != hi.shape or np.any(hi < lo):
            raise ValueError("box needs lower <= upper componentwise")
        return cls("box", lower=lo, upper=hi, dim=lo.size)

    @classmethod
    def discrete_extremes(cls, vertices) -> "ControlSet":
        vert = np.atleast_2d(np.asarray(vertices, dtype=float))
        return cls("discrete", vertices=vert, dim=vert.shape[1])

    @classmethod
    def product(cls, base: "ControlSet", copies: int) -> "ControlSet":
        return cls("product", dim=base.dim * copies, base=base, copies=int(copies))

    # --------------------------------------------------------------
    def contains(self, u, tol: float = 1e-10) -> bool:
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if self.kind == "ball":
            return bool(np.all(np.linalg.norm(u, axis=-1) <= self.radius + tol))
        if self.kind == "box":
            return bool(np.all((u >= self.lower - tol) & (u <= self.upper + tol)))
        if self.kind == "product":
            blocks = u.reshape(u.shape[0], self.copies, self.base.dim)
            return all(self.base.contains(blocks[:, k], tol) for k in range(self.copies))
        dist = np.min(np.linalg.norm(u[:, None, :] - self.vertices[None], axis=-1), axis=1)
        return bool(np.all(dist <= tol))

    def project(self, w: np.ndarray) -> np.ndarray:
        """Euclidean projection (batched over leading axes)."""
        w = np.asarray(w, dtype=float)
        if self.kind == "ball":
            nrm = np.linalg.norm(w, axis=-1, keepdims=True)
            return np.where(nrm > self.radius, w * (self.radius / np.maximum(nrm, 1e-300)), w)
        if self.kind == "box":
            return np.clip(w, self.lower, self.upper)
        if self.kind == "product":
            blocks = w.reshape(w.shape[:-1] + (self.copies, self.base.dim))
            return self.base.project(blocks).reshape(w.shape)
        raise ValueError("projection onto a discrete set is not defined")

    def center(self) -> np.ndarray:
        if self.kind == "ball":
            return np.zeros(self.dim)
        if self.kind == "box":
            return 0.5 * (self.lower + self.upper)
        if self.kind == "product":
            return np.tile(self.base.center(), self.copies)
        return self.vertices.mean(axis=0)

    def lattice(self, size: int) -> np.ndarray:
        """Finite set of points of U used by grid-search synthesis and checks."""
        size = max(int(size), 2)
        if self.kind == "box":
            axes = [np.linspace(lo, hi, size) for lo, hi in zip(self.lower, self.upper)]
            mesh = np.meshgrid(*axes, indexing="ij")
            return np.stack([m.ravel() for m in mesh], axis=-1)
        if self.kind == "ball":
            if self.dim == 1:
                return np.linspace(-self.radius, self.radius, size)[:, None]
            if self.dim == 2:
                pts = [np.zeros(2)]
                n_ang = 4 * size
                for r in np.linspace(self.radius / (size - 1), self.radius, size - 1):
                    ang = 2 * np.pi * np.arange(n_ang) / n_ang
                    pts.extend(np.stack([r * np.cos(ang), r * np.sin(ang)], axis=-1))
                return np.array(pts)
            cube = ControlSet.box(-self.radius * np.ones(self.dim), self.radius * np.ones(self.dim))
            pts = cube.lattice(size)
            return pts[np.linalg.norm(pts, axis=-1) <= self.radius + 1e-12]
        if self.kind == "discrete":
            return self.vertices.copy()
        raise ValueError("no lattice for product sets")

    def sample(self, rng: np.random.Generator, k: int) -> np.ndarray:
        if self.kind == "box":
            return rng.uniform(self.lower, self.upper, size=(k, self.dim))
        if self.kind == "ball":
            d = rng.normal(size=(k, self.dim))
            d /= np.linalg.norm(d, axis=-1, keepdims=True)
            r = self.radius * rng.uniform(size=(k, 1)) ** (1.0 / self.dim)
            return d * r
        if self.kind == "product":
            return np.concatenate([self.base.sample(rng, k) for _ in range(self.copies)], axis=-1)
        return self.vertices[rng.integers(0, len(self.vertices), size=k)]


@dataclass(frozen=True)
class Target:
    """Affine target ``{x : A x = b}``; a point target has ``A = I``."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if A.size == 0:
            A = A.reshape(0, A.shape[-1])
            b = b.reshape(0)
        if A.shape[0] != b.shape[0]:
            raise ValueError("A and b row counts differ")
        if A.shape[0] and np.linalg.matrix_rank(A) != A.shape[0]:
            raise ValueError("target rows must be linearly independent")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def point(cls, x) -> "Target":
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls(np.eye(x.size), x)

    @classmethod
    def affine(cls, A, b) -> "Target":
        return cls(A, b)

    @classmethod
    def free(cls, n: int) -> "Target":
        return cls(np.zeros((0, n)), np.zeros(0))

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def is_point(self) -> bool:
        return self.A.shape[0] == self.dim

    def tangent_basis(self) -> np.ndarray:
        """Orthonormal basis of ``ker A`` as columns, shape ``(n, n - k)``."""
        if self.A.shape[0] == 0:
            return np.eye(self.dim)
        _, s, vt = np.linalg.svd(self.A)
        rank = int(np.sum(s > 1e-12 * s[0]))
        return vt[rank:].T

    def defect(self, x) -> np.ndarray:
        return self.A @ np.asarray(x, dtype=float) - self.b

    def distance(self, x) -> float:
        """Euclidean distance from ``x`` to the affine set."""
        r = self.defect(x)
        if r.size == 0:
            return 0.0
        return float(np.linalg.norm(np.linalg.lstsq(self.A, r, rcond=None)[0]))


# ----------------------------------------------------------------------
# Problem container
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class AffineStructure:
    """``f = drift + f1 u + f2 v`` and ``f0 = c0 + c_u.u + c_v.v + ru|u|^2 + rv|v|^2``.

    ``f1`` and ``f2`` return ``(n, m)`` matrices whose column ``j`` multiplies
    control component ``j``.  The quadratic weights cover the quadratic-cost
    family; with ``ru = rv = 0`` the problem is affine in ``(u, v)``.
    """

    drift: Callback
    f1: Callback
    f2: Callback
    cost_drift: Callback
    cost_u: Callback
    cost_v: Callback
    ru: float = 0.0
    rv: float = 0.0

    def dynamics(self, t, s, x, y, u, v):
        return (self.drift(t, s, x, y)
                + np.einsum("...ij,...j->...i", self.f1(t, s, x, y), u)
                + np.einsum("...ij,...j->...i", self.f2(t, s, x, y), v))

    def running_cost(self, t, s, x, y, u, v):
        return (self.cost_drift(t, s, x, y)
                + np.einsum("...j,...j->...", self.cost_u(t, s, x, y), u)
                + np.einsum("...j,...j->...", self.cost_v(t, s, x, y), v)
                + self.ru * np.einsum("...j,...j->...", u, u)
                + self.rv * np.einsum("...j,...j->...", v, v))


def _as_batch(t, k):
    return np.broadcast_to(np.asarray(t, dtype=float), (k,))


@dataclass(frozen=True, eq=False)
class OcpProblem:
    """Immutable problem definition; see the module docstring for the model.

    ``final_time`` is the fixed horizon, or ``None`` for free final time.
    Jacobian callbacks are optional; missing ones fall back to central finite
    differences.  Supplied ones are compared with finite differences at
    construction and rejected when they disagree.
    """

    name: str
    state_dim: int
    control_dim: int
    dynamics: Callback
    running_cost: Callback
    control_set: ControlSet
    target: Target
    history_state: SampledFunction
    history_control: SampledFunction
    final_time: Optional[float] = None
    jac_x: Optional[Callback] = None
    jac_y: Optional[Callback] = None
    jac_u: Optional[Callback] = None
    jac_v: Optional[Callback] = None
    affine: Optional[AffineStructure] = None
    vectorized: bool = False
    state_bound: float = 1e6
    params: dict = field(default_factory=dict)
    check: bool = True

    def __post_init__(self) -> None:
        n, m = self.state_dim, self.control_dim
        if self.history_state.dim != n:
            raise ValueError("history_state dimension must equal state_dim")
        if self.history_control.dim != m:
            raise ValueError("history_control dimension must equal control_dim")
        if self.control_set.dim != m:
            raise ValueError("control_set dimension must equal control_dim")
        if self.target.dim != n:
            raise ValueError("target dimension must equal state_dim")
        if self.final_time is not None and not self.final_time > 0:
            raise ValueError("fixed final time must be positive")
        if abs(self.history_state.t_end) > 1e-12 or abs(self.history_control.t_end) > 1e-12:
            raise ValueError("history functions must end at t = 0")
        ts = np.linspace(self.history_control.t_start, 0.0, 41)
        if not self.control_set.contains(self.history_control.sample(ts)):
            raise ValueError("history_control leaves the control set")
        if self.check:
            self._check_consistency()

    # ------------------------------------------------------------------
    @property
    def delta(self) -> float:
        return -max(self.history_state.t_start, self.history_control.t_start)

    @property
    def free_time(self) -> bool:
        return self.final_time is None

    @property
    def is_affine(self) -> bool:
        return self.affine is not None

    def with_(self, **changes) -> "OcpProblem":
        return replace(self, **changes)

    # ------------------------------------------------------------------
    def f_batch(self, t, s, x, y, u, v) -> np.ndarray:
        """Dynamics over a batch: ``x`` of shape ``(K, n)`` etc.; returns ``(K, n)``."""
        k = x.shape[0]
        if self.vectorized:
            return np.asarray(self.dynamics(_as_batch(t, k), _as_batch(s, k), x, y, u, v)).reshape(k, -1)
        t, s = _as_batch(t, k), _as_batch(s, k)
        return np.array([self.dynamics(t[i], s[i], x[i], y[i], u[i], v[i]) for i in range(k)]).reshape(k, -1)

    def f0_batch(self, t, s, x, y, u, v) -> np.ndarray:
        k = x.shape[0]
        if self.vectorized:
            return np.asarray(self.running_cost(_as_batch(t, k), _as_batch(s, k), x, y, u, v), dtype=float).reshape(k)
        t, s = _as_batch(t, k), _as_batch(s, k)
        return np.array([self.running_cost(t[i], s[i], x[i], y[i], u[i], v[i]) for i in range(k)], dtype=float)

    def ext_f_batch(self, t, s, x, y, u, v) -> np.ndarray:
        """Extended field ``(f, f0)``, shape ``(K, n + 1)``."""
        return np.concatenate([self.f_batch(t, s, x, y, u, v),
                               self.f0_batch(t, s, x, y, u, v)[:, None]], axis=1)

    def jacobians_batch(self, t, s, x, y, u, v, which: str = "xyuv") -> dict:
        """Extended jacobians over a batch, each of shape ``(K, n + 1, dim)``."""
        k = x.shape[0]
        tb, sb = _as_batch(t, k), _as_batch(s, k)
        out = {}
        fd = None
        for key in which:
            cb = getattr(self, "jac_" + key)
            if cb is None:
                if fd is None:
                    fd = [fd_jacobians(self, tb[i], sb[i], x[i], y[i], u[i], v[i]) for i in range(k)]
                out[key] = np.array([d[key] for d in fd])
            elif self.vectorized:
                out[key] = np.asarray(cb(tb, sb, x, y, u, v), dtype=float)
            else:
                out[key] = np.array([cb(tb[i], sb[i], x[i], y[i], u[i], v[i]) for i in range(k)], dtype=float)
        return out

    def jacobian_point(self, key: str, t, s, x, y, u, v) -> np.ndarray:
        cb = getattr(self, "jac_" + key)
        if cb is None:
            return fd_jacobians(self, t, s, x, y, u, v)[key]
        return np.asarray(cb(t, s, x, y, u, v), dtype=float)

    # ------------------------------------------------------------------
    def random_points(self, rng: np.random.Generator, k: int):
        n = self.state_dim
        t = rng.uniform(0.0, 1.0, size=k)
        s = t - rng.uniform(0.0, 0.5, size=k)
        x = rng.normal(size=(k, n))
        y = rng.normal(size=(k, n))
        u = self.control_set.sample(rng, k)
        v = self.control_set.sample(rng, k)
        return t, s, x, y, u, v

    def _check_consistency(self, n_points: int = 5) -> None:
        rng = np.random.default_rng(20240611)
        pts = self.random_points(rng, n_points)
        for i in range(n_points):
            args = [a[i] for a in pts]
            fd = fd_jacobians(self, *args)
            for key in "xyuv":
                cb = getattr(self, "jac_" + key)
                if cb is None:
                    continue
                J = np.asarray(cb(*args), dtype=float)
                err = np.max(np.abs(J - fd[key])) / max(1.0, np.max(np.abs(fd[key])))
                if err > 1e-5:
                    raise ValueError(f"{self.name}: jac_{key} disagrees with finite differences "
                                     f"(relative error {err:.2e})")
        if self.affine is not None:
            t, s, x, y, u, v = self.random_points(rng, 20)
            aff = self.affine
            f_a = np.array([aff.dynamics(t[i], s[i], x[i], y[i], u[i], v[i]) for i in range(20)])
            f0_a = np.array([aff.running_cost(t[i], s[i], x[i], y[i], u[i], v[i]) for i in range(20)])
            f_g = self.f_batch(t, s, x, y, u, v)
            f0_g = self.f0_batch(t, s, x, y, u, v)
            scale = max(1.0, float(np.max(np.abs(f_g))), float(np.max(np.abs(f0_g))))
            if (np.max(np.abs(f_a - f_g)) > 1e-10 * scale
                    or np.max(np.abs(f0_a - f0_g)) > 1e-10 * scale):
                raise ValueError(f"{self.name}: affine structure disagrees with callbacks")


def fd_jacobians(prob: OcpProblem, t, s, x, y, u, v, step: float = 1e-6) -> dict:
    """Central finite-difference jacobians of the extended field at one point."""
    args = [np.asarray(a, dtype=float) for a in (x, y, u, v)]

    def ext(a):
        f = np.asarray(prob.dynamics(t, s, *a), dtype=float).reshape(-1)
        f0 = float(np.asarray(prob.running_cost(t, s, *a)))
        return np.append(f, f0)

    out = {}
    for pos, key in enumerate("xyuv"):
        base = args[pos]
        cols = []
        for j in range(base.size):
            e = step * max(1.0, abs(base[j]))
            plus = [a.copy() for a in args]
            minus = [a.copy() for a in args]
            plus[pos][j] += e
            minus[pos][j] -= e
            cols.append((ext(plus) - ext(minus)) / (2 * e))
        out[key] = np.array(cols).T.reshape(prob.state_dim + 1, base.size)
    return out


def hamiltonian(prob: OcpProblem, t, s, x, y, p, p0, u, v):
    """``<p, f> + p0 f0``; batched when ``x`` has a leading batch axis."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    if x.shape[-1] != prob.state_dim or p.shape[-1] != prob.state_dim:
        raise ValueError("state/adjoint dimension mismatch")
    if np.asarray(u).shape[-1] != prob.control_dim or np.asarray(v).shape[-1] != prob.control_dim:
        raise ValueError("control dimension mismatch")
    if x.ndim == 1:
        f = np.asarray(prob.dynamics(t, s, x, y, u, v), dtype=float)
        return float(p @ f + p0 * float(prob.running_cost(t, s, x, y, u, v)))
    k = x.shape[0]
    bc = lambda a: np.broadcast_to(np.asarray(a, dtype=float), (k, np.asarray(a).shape[-1]))
    y, u, v, p = bc(y), bc(u), bc(v), bc(p)
    f = prob.f_batch(t, s, x, y, u, v)
    return np.einsum("ki,ki->k", p, f) + p0 * prob.f0_batch(t, s, x, y, u, v)


def regularized(prob: OcpProblem, eps: float) -> OcpProblem:
    """Copy of an affine problem with ``eps |u|^2`` added to the running cost.

    Used as a smoothing continuation for singular problems: for ``eps > 0``
    the maximiser of the Hamiltonian is a projected linear map of the
    switching function instead of a discontinuous normalisation.
    """
    if eps == 0:
        return prob
    if prob.affine is None:
        raise ValueError("smoothing needs an affine problem")
    base_cost, base_ju = prob.running_cost, prob.jac_u

    def cost(t, s, x, y, u, v):
        return base_cost(t, s, x, y, u, v) + eps * np.sum(np.asarray(u) ** 2, axis=-1)

    def jac_u(t, s, x, y, u, v):
        J = np.array(base_ju(t, s, x, y, u, v), dtype=float)
        J[..., -1, :] += 2 * eps * np.asarray(u)
        return J

    aff = replace(prob.affine, ru=prob.affine.ru + eps)
    params = dict(prob.params, smoothing=prob.params.get("smoothing", 0.0) + eps)
    return replace(prob, running_cost=cost, jac_u=jac_u if base_ju is not None else None, affine=aff, params=params, check=False)


# ----------------------------------------------------------------------
# Built-in problems
# ----------------------------------------------------------------------
def _oscillators(K: float):
    w = 2 * np.pi * K
    g = lambda z: np.cos(w * z)
    h = lambda z: np.sin(w * z)
    dg = lambda z: -w * np.sin(w * z)
    dh = lambda z: w * np.cos(w * z)
    return g, h, dg, dh


def _fd_scalar(fn):
    def d(z):
        e = 1e-6 * np.maximum(1.0, np.abs(z))
        return (fn(z + e) - fn(z - e)) / (2 * e)
    return d


def build_counterexample(tau: float = 0.0, g=None, h=None, *, K: float = 10.0,
                         dg=None, dh=None, delta: float = 1.0) -> OcpProblem:
    """Minimum-time problem whose optimal controls lose strong continuity.

    Dynamics (with ``d = t - s``, i.e. the explicit-time delay ``tau0``)::

        x1' = 1 - x2^2 + d u2 g(x1)
        x2' = u1 + d u2 h(x1)

    from ``x(0) = 0`` to the point ``(1, 0)``, ``|u| <= 1``, cost ``int 1 dt``,
    free final time.  The default oscillators are ``g = cos(2 pi K x1)`` and
    ``h = sin(2 pi K x1)``; ``K = 0`` gives ``g = 1``, ``h = 0``.

    ``tau`` is the delay this instance is meant to be solved at; the field
    itself reads the delay from ``s``, so the same problem serves a whole
    homotopy path.
    """
    if g is None and h is None:
        g, h, dg, dh = _oscillators(K)
    elif g is None or h is None:
        raise ValueError("give both g and h, or neither")
    dg = dg or _fd_scalar(g)
    dh = dh or _fd_scalar(h)

    def dynamics(t, s, x, y, u, v):
        d = np.asarray(t, dtype=float) - s
        x1, x2 = x[..., 0], x[..., 1]
        du2 = d * u[..., 1]
        return np.stack([1.0 - x2 * x2 + du2 * g(x1), u[..., 0] + du2 * h(x1)], axis=-1)

    def running_cost(t, s, x, y, u, v):
        return np.ones(np.shape(x)[:-1])

    def jac_x(t, s, x, y, u, v):
        d = np.asarray(t, dtype=float) - s
        x1, x2 = x[..., 0], x[..., 1]
        du2 = d * u[..., 1]
        J = np.zeros(np.shape(x)[:-1] + (3, 2))
        J[..., 0, 0] = du2 * dg(x1)
        J[..., 0, 1] = -2.0 * x2
        J[..., 1, 0] = du2 * dh(x1)
        return J

    def jac_y(t, s, x, y, u, v):
        return np.zeros(np.shape(x)[:-1] + (3, 2))

    def jac_u(t, s, x, y, u, v):
        d = np.asarray(t, dtype=float) - s
        x1 = x[..., 0]
        J = np.zeros(np.shape(x)[:-1] + (3, 2))
        J[..., 0, 1] = d * g(x1)
        J[..., 1, 0] = 1.0
        J[..., 1, 1] = d * h(x1)
        return J

    def drift(t, s, x, y):
        x2 = x[..., 1]
        return np.stack([1.0 - x2 * x2, np.zeros_like(x2)], axis=-1)

    def f1(t, s, x, y):
        d = np.asarray(t, dtype=float) - s
        x1 = x[..., 0]
        M = np.zeros(np.shape(x)[:-1] + (2, 2))
        M[..., 0, 1] = d * g(x1)
        M[..., 1, 0] = 1.0
        M[..., 1, 1] = d * h(x1)
        return M

    def zeros_nm(t, s, x, y):
        return np.zeros(np.shape(x)[:-1] + (2, 2))

    affine = AffineStructure(
        drift=drift, f1=f1, f2=zeros_nm,
        cost_drift=lambda t, s, x, y: np.ones(np.shape(x)[:-1]),
        cost_u=lambda t, s, x, y: np.zeros(np.shape(x)[:-1] + (2,)),
        cost_v=lambda t, s, x, y: np.zeros(np.shape(x)[:-1] + (2,)),
    )
    return OcpProblem(
        name="counterexample", state_dim=2, control_dim=2,
        dynamics=dynamics, running_cost=running_cost,
        jac_x=jac_x, jac_y=jac_y, jac_u=jac_u, jac_v=jac_y,
        control_set=ControlSet.ball(1.0, 2),
        target=Target.point([1.0, 0.0]),
        history_state=constant_function([0.0, 0.0], -delta, 0.0, "linear"),
        history_control=constant_function([0.0, 0.0], -delta, 0.0, "constant"),
        final_time=None, affine=affine, vectorized=True, state_bound=100.0,
        params={"tau": float(tau), "K": float(K)},
    )


def build_delayed_lq(K1: float = 1.0, K2: float = 0.0, K3: float = 1.0, K4: float = 0.0, *,
                     A=None, A_delay=None, B=None, B_delay=None, x0=None,
                     t_f: float = 1.0, u_bound: float = 10.0, delta: float = 1.0,
                     target: Target | None = None, history_state: SampledFunction | None = None,
                     name: str = "delayed_lq") -> OcpProblem:
    """Control-affine linear system with quadratic cost on a fixed horizon.

    ``x' = A x + A_delay x(t - tau1) + B u + B_delay u(t - tau2)`` and cost
    ``K1|x|^2 + K2|x(t - tau1)|^2 + K3|u|^2 + K4|u(t - tau2)|^2``.  Defaults give
    the scalar system ``x' = x(t - tau1) + u`` from ``x = 1`` on the history.
    The control box ``[-u_bound, u_bound]^m`` is meant to stay inactive.
    """
    if not K3 > 0:
        raise ValueError("K3 must be positive (the cost must be coercive in u)")
    if min(K1, K2, K4) < 0:
        raise ValueError("cost weights must be nonnegative")
    if A_delay is None and A is None:
        A, A_delay = [[0.0]], [[1.0]]
    A = np.atleast_2d(np.asarray(A if A is not None else np.zeros_like(A_delay), dtype=float))
    n = A.shape[0]
    A_delay = np.atleast_2d(np.asarray(A_delay if A_delay is not None else np.zeros((n, n)), dtype=float))
    B = np.atleast_2d(np.asarray(B if B is not None else np.eye(n), dtype=float))
    m = B.shape[1]
    B_delay = np.atleast_2d(np.asarray(B_delay if B_delay is not None else np.zeros((n, m)), dtype=float))
    if A.shape != (n, n) or A_delay.shape != (n, n) or B_delay.shape != (n, m) or B.shape[0] != n:
        raise ValueError("inconsistent system matrices")
    if history_state is None:
        x0 = np.ones(n) if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))
        history_state = constant_function(x0, -delta, 0.0, "linear")

    def dynamics(t, s, x, y, u, v):
        return x @ A.T + y @ A_delay.T + u @ B.T + v @ B_delay.T

    def running_cost(t, s, x, y, u, v):
        return (K1 * np.sum(x * x, axis=-1) + K2 * np.sum(y * y, axis=-1)
                + K3 * np.sum(u * u, axis=-1) + K4 * np.sum(v * v, axis=-1))

    def _ext(M, w, z):
        lead = np.shape(z)[:-1]
        top = np.broadcast_to(M, lead + M.shape)
        return np.concatenate([top, (2.0 * w * np.asarray(z))[..., None, :]], axis=-2)

    affine = AffineStructure(
        drift=lambda t, s, x, y: x @ A.T + y @ A_delay.T,
        f1=lambda t, s, x, y: np.broadcast_to(B, np.shape(x)[:-1] + B.shape),
        f2=lambda t, s, x, y: np.broadcast_to(B_delay, np.shape(x)[:-1] + B_delay.shape),
        cost_drift=lambda t, s, x, y: K1 * np.sum(x * x, axis=-1) + K2 * np.sum(y * y, axis=-1),
        cost_u=lambda t, s, x, y: np.zeros(np.shape(x)[:-1] + (m,)),
        cost_v=lambda t, s, x, y: np.zeros(np.shape(x)[:-1] + (m,)),
        ru=K3, rv=K4,
    )
    return OcpProblem(
        name=name, state_dim=n, control_dim=m,
        dynamics=dynamics, running_cost=running_cost,
        jac_x=lambda t, s, x, y, u, v: _ext(A, K1, x),
        jac_y=lambda t, s, x, y, u, v: _ext(A_delay, K2, y),
        jac_u=lambda t, s, x, y, u, v: _ext(B, K3, u),
        jac_v=lambda t, s, x, y, u, v: _ext(B_delay, K4, v),
        control_set=ControlSet.box(-u_bound * np.ones(m), u_bound * np.ones(m)),
        target=target if target is not None else Target.free(n),
        history_state=history_state,
        history_control=constant_function(np.zeros(m), -delta, 0.0, "constant"),
        final_time=float(t_f), affine=affine, vectorized=True, state_bound=1e3,
        params={"K": (K1, K2, K3, K4), "A": A, "A_delay": A_delay, "B": B, "B_delay": B_delay},
    )


# ----------------------------------------------------------------------
# Guinn reduction (pure control delay -> stacked non-delayed system)
# ----------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class GuinnReduction:
    """Stacked non-delayed system for a pure control delay ``tau2``.

    Block ``i`` (``0 <= i <= N``) lives on reduced time ``r in [0, tau2]`` and
    represents ``x(r + i tau2)`` driven by ``u^{i+1}(r) = u(r + i tau2)`` and the
    lagged control ``u^i(r) = u(r + (i - 1) tau2)``; block 0 reads its lagged
    control from the history.  Blocks are chained by
    ``x^{i+1}(0) = x^i(tau2)``, and the last block is frozen once
    ``r + N tau2`` passes ``t_f``.
    """

    original: OcpProblem
    tau: DelayVector
    n_blocks: int
    block_horizon: float
    problem: OcpProblem

    def _block_active(self, i: int, r) -> np.ndarray:
        t_f = self.original.final_time
        return (np.asarray(r) + i * self.block_horizon <= t_f + 1e-12).astype(float)

    def stack_control(self, u: SampledFunction, grid: TimeGrid) -> SampledFunction:
        """Control blocks ``u^{i+1}(r) = u(r + i tau2)`` sampled on ``grid`` (over ``[0, tau2]``)."""
        t_f = self.original.final_time
        rows = []
        for r in grid.nodes:
            row = []
            for i in range(self.n_blocks):
                t = min(r + i * self.block_horizon, t_f)
                row.append(u.eval(t, "left" if r > 0 else "right"))
            rows.append(np.concatenate(row))
        return SampledFunction(grid, np.array(rows), u.interp)

    def unstack_state(self, X: SampledFunction, grid: TimeGrid) -> SampledFunction:
        """Reassemble ``x`` on ``[0, t_f]`` from block trajectories sampled on ``grid``."""
        n = self.original.state_dim
        vals = []
        for t in grid.nodes:
            i = min(int(math.floor(t / self.block_horizon + 1e-12)), self.n_blocks - 1)
            r = min(t - i * self.block_horizon, self.block_horizon)
            vals.append(X.eval(r)[i * n:(i + 1) * n])
        return SampledFunction(grid, np.array(vals), "linear",
                               history=self.original.history_state)

    def simulate(self, W: SampledFunction, cfg=None) -> SampledFunction:
        """Integrate the blocks in order, honouring the linkage; returns stacked states."""
        from .dde_integrator import IntegratorConfig, integrate_state

        cfg = cfg or IntegratorConfig(h=W.grid.h)
        m = self.original.control_dim
        grid = TimeGrid(0.0, self.block_horizon, W.grid.n_steps)
        blocks = []
        x_start = self.original.history_state.eval(0.0)
        zero_tau = DelayVector(0.0, 0.0, 0.0, self.original.delta)
        for i in range(self.n_blocks):
            block_prob = self._block_problem(i, W, x_start)
            u_i = SampledFunction(W.grid, W.values[:, i * m:(i + 1) * m], W.interp,
                                  history=self.original.history_control)
            x_i = integrate_state(block_prob, zero_tau, u_i, self.block_horizon, cfg, grid=grid)
            vals = x_i.values.copy()
            r_gate = self.original.final_time - i * self.block_horizon
            if r_gate < self.block_horizon:
                # the gate is inclusive, so stages on the next node would still fire
                vals[grid.nodes > r_gate + 1e-12] = x_i.eval(r_gate)
            blocks.append(vals)
            x_start = vals[-1]
        return SampledFunction(grid, np.hstack(blocks), "linear")

    def _block_problem(self, i: int, W: SampledFunction, x_start) -> OcpProblem:
        orig = self.original
        m = orig.control_dim
        T = self.block_horizon
        tau0 = self.tau.tau0
        phi2 = orig.history_control

        def lagged(r):
            if i == 0:
                return phi2.eval(r - T, "left")
            return W.eval(r, "left")[(i - 1) * m:i * m]

        def dynamics(t, s, x, y, u, v):
            gate = float(self._block_active(i, t))
            if gate == 0.0:
                return np.zeros(orig.state_dim)
            ti = t + i * T
            return np.asarray(orig.dynamics(ti, ti - tau0, x, x, u, lagged(t)), dtype=float)

        def running_cost(t, s, x, y, u, v):
            ti = t + i * T
            return float(self._block_active(i, t)) * float(orig.running_cost(ti, ti - tau0, x, x, u, lagged(t)))

        return OcpProblem(
            name=f"{orig.name}/guinn-block{i}", state_dim=orig.state_dim, control_dim=m,
            dynamics=dynamics, running_cost=running_cost,
            control_set=orig.control_set, target=Target.free(orig.state_dim),
            history_state=constant_function(x_start, -orig.delta, 0.0, "linear"),
            history_control=orig.history_control, final_time=T, check=False,
        )


def guinn_reduce(prob: OcpProblem, tau: DelayVector, N: int) -> GuinnReduction:
    """Rewrite a pure-control-delay problem as ``N + 1`` stacked non-delayed blocks.

    Requires a fixed horizon with ``N tau2 < t_f <= (N + 1) tau2`` and
    ``tau1 = 0``.  The stacked problem has state dimension ``n (N + 1)`` and
    control dimension ``m (N + 1)``; its own ``history_state`` carries
    ``phi1(0)`` in block 0 only, the other blocks being fixed by the linkage
    (see :class:`GuinnReduction`).
    """
    if prob.final_time is None:
        raise ValueError("Guinn reduction needs a fixed final time")
    if tau.tau1 != 0.0:
        raise ValueError("Guinn reduction is implemented for pure control delays (tau1 = 0)")
    if tau.tau2 <= 0.0:
        raise ValueError("Guinn reduction needs a positive control delay")
    N = int(N)
    t_f = prob.final_time
    T = tau.tau2
    eps = 1e-12 * max(1.0, t_f)
    if not (N >= 0 and N * T < t_f - eps and t_f <= (N + 1) * T + eps):
        raise ValueError(f"need N*tau2 < t_f <= (N+1)*tau2; got N={N}, tau2={T}, t_f={t_f}")
    n, m = prob.state_dim, prob.control_dim
    nb = N + 1
    tau0 = tau.tau0
    phi2 = prob.history_control
    holder: dict = {}

    def _split(z, d):
        return [z[..., k * d:(k + 1) * d] for k in range(nb)]

    def dynamics(t, s, x, y, u, v):
        xs, us = _split(np.asarray(x, dtype=float), n), _split(np.asarray(u, dtype=float), m)
        out = []
        for i in range(nb):
            lag = phi2.eval(float(t) - T, "left") if i == 0 else us[i - 1]
            gate = float(holder["red"]._block_active(i, t))
            ti = float(t) + i * T
            out.append(gate * np.asarray(prob.dynamics(ti, ti - tau0, xs[i], xs[i], us[i], lag), dtype=float))
        return np.concatenate(out)

    def running_cost(t, s, x, y, u, v):
        xs, us = _split(np.asarray(x, dtype=float), n), _split(np.asarray(u, dtype=float), m)
        total = 0.0
        for i in range(nb):
            lag = phi2.eval(float(t) - T, "left") if i == 0 else us[i - 1]
            gate = float(holder["red"]._block_active(i, t))
            ti = float(t) + i * T
            total += gate * float(prob.running_cost(ti, ti - tau0, xs[i], xs[i], us[i], lag))
        return total

    x0 = np.zeros(n * nb)
    x0[:n] = prob.history_state.eval(0.0)
    stacked = OcpProblem(
        name=f"{prob.name}/guinn{nb}", state_dim=n * nb, control_dim=m * nb,
        dynamics=dynamics, running_cost=running_cost,
        control_set=ControlSet.product(prob.control_set, nb),
        target=Target.free(n * nb),
        history_state=constant_function(x0, -prob.delta, 0.0, "linear"),
        history_control=constant_function(np.tile(phi2.eval(0.0, "left"), nb), -prob.delta, 0.0, "constant"),
        final_time=T, check=False, params={"blocks": nb, "block_horizon": T},
    )
    red = GuinnReduction(original=prob, tau=tau, n_blocks=nb, block_horizon=T, problem=stacked)
    holder["red"] = red
    return red
