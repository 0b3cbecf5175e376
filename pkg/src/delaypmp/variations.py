"""Needle-like variations, variation vectors and sampled Pontryagin cones.

All vectors live in the extended space ``R^{n+1}``: state components first,
the running cost last.  ``f~ = (f, f0)`` is the extended field.

* :func:`omega_vectors` gives the two jumps produced by swapping the control
  value at ``s``: in the current argument at ``s`` and in the delayed
  argument at ``s + tau2``.
* :func:`variation_vector` transports a jump along the linearised delayed
  system.
* :func:`needle_endpoint_check` perturbs the control on shrinking intervals
  and measures how fast the first-order endpoint prediction becomes exact.
* :func:`cone_sample` / :func:`multiplier_check` test the sign condition
  ``<psi~, w~> <= 0`` on finitely many cone vectors.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .ocp_model import OcpProblem
from .pmp_core import Extremal
from .time_mesh import DelayVector, time_eps

__all__ = [
    "NeedleSpec",
    "NeedleResult",
    "ConeSample",
    "omega_vectors",
    "variation_vector",
    "needle_endpoint_check",
    "cone_sample",
    "multiplier_check",
    "lebesgue_times",
]


def _args(prob: OcpProblem, tau: DelayVector, ext: Extremal, t: np.ndarray, side: str = "right"):
    """Arguments ``(t, s, x, y, u, v)`` of ``f~`` along ``ext`` at times ``t``."""
    t = np.asarray(t, dtype=float)
    return (t, t - tau.tau0, ext.x.sample(t), ext.x.sample(t - tau.tau1),
            ext.u.sample(t, side), ext.u.sample(t - tau.tau2, side))


def _omegas(prob, tau, ext, S, Z) -> tuple[np.ndarray, np.ndarray]:
    S = np.asarray(S, dtype=float)
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    t, s, x, y, u, v = _args(prob, tau, ext, S)
    if tau.tau2 == 0.0:
        # no control delay: a single swap of both arguments
        om = prob.ext_f_batch(t, s, x, y, Z, Z) - prob.ext_f_batch(t, s, x, y, u, u)
        return om, np.zeros_like(om)
    om_minus = prob.ext_f_batch(t, s, x, y, Z, v) - prob.ext_f_batch(t, s, x, y, u, v)
    om_plus = np.zeros_like(om_minus)
    live = S + tau.tau2 <= ext.t_f + time_eps(ext.t_f)
    if np.any(live):
        tp, sp, xp, yp, up, vp = _args(prob, tau, ext, np.minimum(S[live] + tau.tau2, ext.t_f))
        # v at s + tau2 is u(s); swap it for z
        om_plus[live] = (prob.ext_f_batch(tp, sp, xp, yp, up, Z[live])
                         - prob.ext_f_batch(tp, sp, xp, yp, up, vp))
    return om_minus, om_plus


def _check_time(ext: Extremal, s: float) -> None:
    if not 0.0 < s < ext.t_f:
        raise ValueError(f"time {s} outside (0, t_f={ext.t_f})")


def omega_vectors(prob: OcpProblem, tau: DelayVector, ext: Extremal, s: float, z) -> tuple[np.ndarray, np.ndarray]:
    """``(omega_minus, omega_plus)`` for the value ``z`` at time ``s``.

    ``omega_plus`` vanishes when ``s + tau2 > t_f``.  Without control delay
    the whole swap is returned in ``omega_minus`` and ``omega_plus`` is zero.
    """
    _check_time(ext, s)
    z = np.asarray(z, dtype=float)
    if not prob.control_set.contains(z):
        raise ValueError("z must lie in the control set")
    a, b = _omegas(prob, tau, ext, [s], z[None])
    return a[0], b[0]


def _propagate(prob: OcpProblem, tau: DelayVector, ext: Extremal, starts, xis, t_end: float) -> np.ndarray:
    """Variation vectors at ``t_end`` for jumps ``xis`` applied at ``starts``.

    Each member gets its own grid beginning at its start time.  With a state
    delay the step divides ``tau1`` so the delayed copy of the initial jump
    lands on a node.
    """
    starts = np.asarray(starts, dtype=float)
    xis = np.asarray(xis, dtype=float)
    B, N1 = xis.shape
    n = N1 - 1
    if B == 0:
        return np.zeros((0, N1))
    if np.any(starts > t_end + time_eps(t_end)):
        raise ValueError("variation starts after the query time")
    starts = np.minimum(starts, t_end)
    h_ref = ext.x.grid.h
    span = t_end - starts
    tau1 = tau.tau1
    if tau1 > 0:
        m = max(4, int(math.ceil(tau1 / h_ref - 1e-9)))
        h = np.full(B, tau1 / m)
        full = np.floor(span / h + 1e-9).astype(int)
        rest = span - full * h
        n_steps = int(np.max(full + (rest > 1e-12 * max(1.0, t_end))))
    else:
        n_steps = max(4, int(math.ceil(np.max(span) / h_ref - 1e-9)))
        h = span / n_steps
        full = np.full(B, n_steps)
        rest = np.zeros(B)

    Psi = np.zeros((B, n_steps + 1, N1))
    dPsi = np.zeros((B, n_steps + 1, N1))
    Psi[:, 0] = xis

    def jac(t):
        t = np.minimum(t, ext.t_f)
        side_t = t
        J = prob.jacobians_batch(*_args(prob, tau, ext, side_t), "xy")
        return J["x"], J["y"]

    def delayed(t, k_done):
        """psi(t - tau1) per member from nodes ``0..k_done``; zero before the start."""
        q = t - tau1 - starts
        out = np.zeros((B, N1))
        ok = q >= -1e-12 * max(1.0, t_end)
        if not np.any(ok):
            return out
        idx = np.clip(np.floor(q / h + 1e-9).astype(int), 0, max(k_done - 1, 0))
        hb = h
        th = np.clip((q - idx * hb) / hb, 0.0, 1.0)
        b = np.arange(B)
        y0, y1 = Psi[b, idx], Psi[b, np.minimum(idx + 1, n_steps)]
        d0, d1 = dPsi[b, idx], dPsi[b, np.minimum(idx + 1, n_steps)]
        h00 = 2 * th ** 3 - 3 * th ** 2 + 1
        h10 = th ** 3 - 2 * th ** 2 + th
        h01 = -2 * th ** 3 + 3 * th ** 2
        h11 = th ** 3 - th ** 2
        val = (h00[:, None] * y0 + (h10 * hb)[:, None] * d0 + h01[:, None] * y1 + (h11 * hb)[:, None] * d1)
        out[ok] = val[ok]
        return out

    def rhs(t, psi, k_done):
        Jx, Jy = jac(t)
        if tau1 > 0:
            return (np.einsum("bij,bj->bi", Jx, psi[:, :n])
                    + np.einsum("bij,bj->bi", Jy, delayed(t, k_done)[:, :n]))
        return np.einsum("bij,bj->bi", Jx + Jy, psi[:, :n])

    t = starts.copy()
    for k in range(n_steps):
        hk = np.where(k < full, h, np.where(k == full, rest, 0.0))
        hc = hk[:, None]
        psi = Psi[:, k]
        k1 = rhs(t, psi, k)
        dPsi[:, k] = k1
        k2 = rhs(t + hk / 2, psi + hc / 2 * k1, k)
        k3 = rhs(t + hk / 2, psi + hc / 2 * k2, k)
        k4 = rhs(t + hk, psi + hc * k3, k)
        Psi[:, k + 1] = psi + hc / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t = t + hk
    return Psi[:, -1]


def variation_vector(prob: OcpProblem, tau: DelayVector, ext: Extremal, s: float, xi, t_query: float) -> np.ndarray:
    """``psi(t_query)`` for ``psi' = Jx psi + Jy psi(t - tau1)``, ``psi(s) = xi``.

    ``psi`` vanishes on ``(s - tau1, s)``; the jacobians are the extended ones
    evaluated along ``ext``.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (prob.state_dim + 1,):
        raise ValueError(f"xi must have length n + 1 = {prob.state_dim + 1}")
    if not 0.0 <= s < t_query <= ext.t_f + time_eps(ext.t_f):
        raise ValueError("need 0 <= s < t_query <= t_f")
    return _propagate(prob, tau, ext, [s], xi[None], t_query)[0]


def _endpoint_vectors(prob, tau, ext, S, Z, t_end: float) -> np.ndarray:
    """``w~(t_end)`` for each ``(s, z)``: both pieces transported and summed."""
    S = np.asarray(S, dtype=float)
    om_m, om_p = _omegas(prob, tau, ext, S, Z)
    starts = [S]
    xis = [om_m]
    keep = np.zeros(0, dtype=int)
    if tau.tau2 > 0:
        keep = np.nonzero(S + tau.tau2 <= t_end)[0]
        starts.append(S[keep] + tau.tau2)
        xis.append(om_p[keep])
    V = _propagate(prob, tau, ext, np.concatenate(starts), np.concatenate(xis), t_end)
    W = V[:S.size].copy()
    W[keep] += V[S.size:]
    return W


# ----------------------------------------------------------------------
# Needle check
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class NeedleSpec:
    """Needles ``(t_i - eta_i, t_i]`` with values ``values[i]`` and an end shift.

    ``widths`` and ``delta`` are directions: a ladder value ``e`` applies the
    widths ``e * widths[i]`` and the final-time shift ``e * delta``.
    """

    times: tuple
    widths: tuple
    values: tuple
    delta: float = 0.0

    def __post_init__(self) -> None:
        times = tuple(float(t) for t in self.times)
        widths = tuple(float(w) for w in self.widths)
        values = tuple(tuple(float(c) for c in np.atleast_1d(v)) for v in self.values)
        if not len(times) == len(widths) == len(values):
            raise ValueError("times, widths and values must have equal length")
        if any(w <= 0 for w in widths):
            raise ValueError("needle widths must be positive")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("needle times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "delta", float(self.delta))

    def intervals(self, e: float) -> list:
        return [(t - e * w, t) for t, w in zip(self.times, self.widths)]


@dataclass
class NeedleResult:
    """Remainders of the first-order endpoint formula along a ladder."""

    ladder: np.ndarray
    remainders: np.ndarray
    slope: float
    first_order: np.ndarray
    floor: float

    def passed(self, min_slope: float = 1.5) -> bool:
        """Slope at least ``min_slope``, or every remainder at the round-off floor."""
        if np.all(self.remainders <= self.floor):
            return True
        return bool(self.slope >= min_slope)

    def to_json(self) -> str:
        slope = None if math.isnan(self.slope) else self.slope
        return json.dumps({"ladder": self.ladder.tolist(), "remainders": self.remainders.tolist(),
                           "slope": slope, "first_order": self.first_order.tolist(),
                           "floor": self.floor}, indent=2, sort_keys=True)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("eta,remainder\n")
            for e, r in zip(self.ladder, self.remainders):
                fh.write(f"{e!r},{r!r}\n")


def lebesgue_times(ext: Extremal, tau: DelayVector, count: int, margin: float = 2.0) -> np.ndarray:
    """``count`` interior state-mesh points farther than ``margin * h`` from delay breakpoints.

    Breakpoints are the sums ``k tau1 + l tau2`` inside ``[0, t_f]``.
    """
    grid = ext.x.grid
    nodes = grid.nodes[1:-1]
    bps = [0.0, ext.t_f]
    lags = [v for v in (tau.tau1, tau.tau2) if v > 0]
    if lags:
        k_max = [int(ext.t_f / v) + 1 for v in lags]
        if len(lags) == 1:
            bps += [k * lags[0] for k in range(k_max[0] + 1)]
        else:
            bps += [k * lags[0] + l * lags[1] for k in range(k_max[0] + 1) for l in range(k_max[1] + 1)]
    bps = np.array([b for b in bps if b <= ext.t_f + 1e-12])
    far = np.min(np.abs(nodes[:, None] - bps[None, :]), axis=1) > margin * grid.h
    cand = nodes[far]
    if cand.size < count:
        raise ValueError(f"only {cand.size} admissible times, {count} requested")
    pick = np.linspace(0, cand.size - 1, count).round().astype(int)
    return cand[np.unique(pick)]


def _hermite_rows(mesh, X, D0, D1, tq, k_done):
    """Hermite values at ``tq`` (one time per member) from cells ``< k_done``."""
    idx = np.clip(np.searchsorted(mesh, tq, side="right") - 1, 0, max(k_done - 1, 0))
    hk = mesh[idx + 1] - mesh[idx]
    th = np.clip((tq - mesh[idx]) / hk, 0.0, 1.0)
    b = np.arange(X.shape[0])
    y0, y1 = X[b, idx], X[b, idx + 1]
    d0, d1 = D0[b, idx], D1[b, idx]
    h00 = 2 * th ** 3 - 3 * th ** 2 + 1
    h10 = th ** 3 - 2 * th ** 2 + th
    h01 = -2 * th ** 3 + 3 * th ** 2
    h11 = th ** 3 - th ** 2
    return h00[:, None] * y0 + (h10 * hk)[:, None] * d0 + h01[:, None] * y1 + (h11 * hk)[:, None] * d1


def _simulate_needles(prob, tau, ext, spec: NeedleSpec, ladder, h_max):
    """Extended endpoints ``x~(t_f + e delta)`` for each ladder value, plus the reference.

    Member 0 is the unperturbed reference.  One mesh holds every breakpoint
    of every member so reference and perturbed runs share their truncation
    errors away from the needles.
    """
    n, m = prob.state_dim, prob.control_dim
    ladder = np.asarray(ladder, dtype=float)
    L = ladder.size
    B = L + 1
    ends = np.concatenate([[ext.t_f], ext.t_f + ladder * spec.delta])
    t_stop = float(np.max(ends))
    bps = [0.0, t_stop, ext.t_f]
    bps += list(ends)
    for e in ladder:
        for a, b in spec.intervals(e):
            bps += [a, b]
            if tau.tau2 > 0:
                bps += [a + tau.tau2, b + tau.tau2]
    bps = np.array([b for b in bps if 0.0 <= b <= t_stop])
    n_base = max(4, int(math.ceil(t_stop / h_max)))
    base = np.linspace(0.0, t_stop, n_base + 1)
    tol = 1e-12 * max(1.0, t_stop)
    mesh = np.unique(np.concatenate([base, bps]))
    # drop base nodes that crowd a breakpoint
    crowd = np.min(np.abs(mesh[:, None] - bps[None, :]), axis=1)
    keep = (crowd <= tol) | (crowd > 1e-3 * (t_stop / n_base))
    mesh = mesh[keep]
    mesh = mesh[np.concatenate([[True], np.diff(mesh) > tol])]
    K = mesh.size - 1

    z_vals = [np.asarray(v, dtype=float) for v in spec.values]
    ivals = [[(0.0, 0.0)] * len(z_vals)] + [spec.intervals(e) for e in ladder]

    def needle_value(tc):
        """Control override ``(B, m)`` and mask for cell-midpoint times ``tc`` (B,)."""
        over = np.zeros((B, m))
        mask = np.zeros(B, dtype=bool)
        for b in range(1, B):
            for (a, c), z in zip(ivals[b], z_vals):
                if a < tc[b] < c:
                    over[b] = z
                    mask[b] = True
        return over, mask

    def controls(t, tc, side):
        tt = np.full(B, t)
        u = ext.u.sample(np.minimum(tt, ext.t_f), "left" if t >= ext.t_f else side)
        v = ext.u.sample(np.minimum(tt - tau.tau2, ext.t_f), "left" if t - tau.tau2 >= ext.t_f else side)
        ou, mu = needle_value(np.full(B, tc))
        ov, mv = needle_value(np.full(B, tc - tau.tau2))
        u[mu] = ou[mu]
        v[mv] = ov[mv]
        return u, v

    X = np.zeros((B, K + 1, n + 1))
    D0 = np.zeros((B, K, n + 1))
    D1 = np.zeros((B, K, n + 1))
    X[:, 0, :n] = ext.x.eval(0.0)

    def field(t, xe, u, v, k_done):
        tt = np.full(B, t)
        if tau.tau1 > 0:
            tq = tt - tau.tau1
            y = _hermite_rows(mesh, X, D0, D1, np.maximum(tq, 0.0), k_done)[:, :n]
            past = tq <= 0
            if np.any(past):
                y[past] = prob.history_state.sample(tq[past])
        else:
            y = xe[:, :n]
        return prob.ext_f_batch(tt, tt - tau.tau0, xe[:, :n], y, u, v)

    for k in range(K):
        t0, t1 = mesh[k], mesh[k + 1]
        hk = t1 - t0
        tc = 0.5 * (t0 + t1)
        x0 = X[:, k]
        u0, v0 = controls(t0, tc, "right")
        um, vm = controls(tc, tc, "right")
        u1, v1 = controls(t1, tc, "left")
        k1 = field(t0, x0, u0, v0, k)
        k2 = field(tc, x0 + hk / 2 * k1, um, vm, k)
        k3 = field(tc, x0 + hk / 2 * k2, um, vm, k)
        k4 = field(t1, x0 + hk * k3, u1, v1, k)
        X[:, k + 1] = x0 + hk / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        D0[:, k] = k1
        D1[:, k] = field(t1, X[:, k + 1], u1, v1, k)
    pos = np.array([np.argmin(np.abs(mesh - e)) for e in ends])
    end_states = X[np.arange(B), pos]
    return end_states


def needle_endpoint_check(prob: OcpProblem, tau: DelayVector, ext: Extremal, spec: NeedleSpec,
                          eta_ladder, h_max: float | None = None) -> NeedleResult:
    """Log-log slope of the first-order endpoint remainder along ``eta_ladder``.

    For ladder value ``e`` the control is replaced by ``values[i]`` on
    ``(t_i - e widths[i], t_i]`` and the endpoint is read at
    ``t_f + e delta``.  The remainder is

        ``| x~pi(t_f + e delta) - x~(t_f) - e delta f~(t_f) - e sum_i widths[i] w~_i(t_f) |``

    where ``w~_i`` is the transported jump of needle ``i``.  Remainders at
    the round-off floor are excluded from the fit; if fewer than two remain
    the slope is ``nan``.
    """
    ladder = np.sort(np.asarray(eta_ladder, dtype=float))[::-1]
    if ladder.size < 2 or np.any(ladder <= 0):
        raise ValueError("the ladder needs at least two positive values")
    for t, w in zip(spec.times, spec.widths):
        _check_time(ext, t)
        if t - ladder[0] * w <= 0:
            raise ValueError(f"needle at {t} reaches back past t = 0")
    for (a0, b0), (a1, b1) in zip(spec.intervals(ladder[0]), spec.intervals(ladder[0])[1:]):
        if a1 < b0:
            raise ValueError("needles overlap at the largest ladder value")
    for z in spec.values:
        if not prob.control_set.contains(np.asarray(z)):
            raise ValueError("needle values must lie in the control set")
    if h_max is None:
        h_max = ext.x.grid.h
        lag = tau.min_positive_lag()
        if lag is not None:
            h_max = min(h_max, lag / 4)
    W = np.zeros(prob.state_dim + 1)
    if spec.times:
        Wi = _endpoint_vectors(prob, tau, ext, np.array(spec.times), np.array(spec.values), ext.t_f)
        W = np.einsum("i,ij->j", np.array(spec.widths), Wi)
    ends = _simulate_needles(prob, tau, ext, spec, ladder, h_max)
    ref = ends[0]
    tf = ext.t_f
    f_end = prob.ext_f_batch(*_args(prob, tau, ext, np.array([tf]), "left"))[0]
    pred = ref[None] + ladder[:, None] * (spec.delta * f_end + W)[None]
    rem = np.linalg.norm(ends[1:] - pred, axis=1)
    floor = 1e3 * np.finfo(float).eps * max(1.0, float(np.max(np.abs(ends))))
    use = rem > floor
    slope = float("nan")
    if np.count_nonzero(use) >= 2:
        slope = float(np.polyfit(np.log(ladder[use]), np.log(rem[use]), 1)[0])
    return NeedleResult(ladder, rem, slope, W, floor)


# ----------------------------------------------------------------------
# Cones and the multiplier inequality
# ----------------------------------------------------------------------
@dataclass
class ConeSample:
    """Sampled cone vectors ``w~(t_f)`` with their ``(s, z)`` origins.

    Augmented samples end with ``+f~(t_f)`` and ``-f~(t_f)``, tagged with
    ``s = t_f`` and ``z = None``.
    """

    vectors: list = field(default_factory=list)
    provenance: list = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.vectors) != len(self.provenance):
            raise ValueError("one provenance entry per vector")
        for v in self.vectors:
            if not np.all(np.isfinite(v)):
                raise ValueError("cone vectors must be finite")

    def __len__(self) -> int:
        return len(self.vectors)

    def to_json(self) -> str:
        prov = [{"s": s, "z": None if z is None else list(map(float, z))} for s, z in self.provenance]
        return json.dumps({"vectors": [list(map(float, v)) for v in self.vectors], "provenance": prov},
                          indent=2, sort_keys=True)


def cone_sample(prob: OcpProblem, tau: DelayVector, ext: Extremal, pairs, augmented: bool = False) -> ConeSample:
    """Cone vectors ``w~(t_f)`` for the ``(s, z)`` pairs; optionally ``+-f~(t_f)``."""
    pairs = list(pairs)
    for s, z in pairs:
        _check_time(ext, s)
        if not prob.control_set.contains(np.asarray(z, dtype=float)):
            raise ValueError("z must lie in the control set")
    vecs, prov = [], []
    if pairs:
        S = np.array([s for s, _ in pairs], dtype=float)
        Z = np.array([np.atleast_1d(z) for _, z in pairs], dtype=float)
        W = _endpoint_vectors(prob, tau, ext, S, Z, ext.t_f)
        vecs = list(W)
        prov = [(float(s), tuple(map(float, np.atleast_1d(z)))) for s, z in pairs]
    if augmented:
        f_end = prob.ext_f_batch(*_args(prob, tau, ext, np.array([ext.t_f]), "left"))[0]
        vecs += [f_end, -f_end]
        prov += [(ext.t_f, None), (ext.t_f, None)]
    return ConeSample(vecs, prov)


def multiplier_check(ext: Extremal, cone: ConeSample) -> float:
    """``max <psi~, w~>`` over the sample with ``psi~ = (p(t_f), p0)``; ``-inf`` if empty."""
    if len(cone) == 0:
        return -math.inf
    psi = np.append(ext.p.eval(ext.t_f, "left"), ext.p0)
    return float(np.max(np.asarray(cone.vectors) @ psi))
