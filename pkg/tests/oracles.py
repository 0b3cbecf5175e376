"""Independent reference solutions used by the test suite.

Nothing here imports ``delaypmp``.  Each oracle solves its problem by a
different route than the package does:

* ``lq_collocation``: direct transcription (trapezoidal rule) of the delayed
  linear-quadratic problem, solved as one dense KKT system.
* ``riccati_lq``: the non-delayed LQ problem through the Riccati equation.
* ``method_of_steps``: exact piecewise polynomial solution of
  ``x'(t) = -x(t - 1)`` with ``x = 1`` on ``[-1, 0]``, in rational arithmetic.
"""
from fractions import Fraction

import numpy as np
from scipy.integrate import solve_ivp


def _interp_matrix(times, nodes, t_hist):
    """Rows that linearly interpolate node values at ``times``.

    Returns ``(M, mask)``: entries with ``times < t_hist`` (inside the
    history) are flagged in ``mask`` and get zero rows.
    """
    N = nodes.size - 1
    h = nodes[1] - nodes[0]
    M = np.zeros((times.size, N + 1))
    mask = times < t_hist - 1e-12
    for i, t in enumerate(times):
        if mask[i]:
            continue
        j = min(int(np.floor((t - nodes[0]) / h + 1e-12)), N - 1)
        w = (t - nodes[j]) / h
        M[i, j] += 1.0 - w
        M[i, j + 1] += w
    return M, mask


def lq_collocation(A, A_delay, B, B_delay, K, x0, tau1, tau2, t_f, n_nodes=400):
    """Delayed LQ problem by trapezoidal collocation and a dense KKT solve.

    Minimizes ``int K1|x|^2 + K2|x(t-tau1)|^2 + K3|u|^2 + K4|u(t-tau2)|^2``
    subject to ``x' = A x + A_delay x(t-tau1) + B u + B_delay u(t-tau2)``,
    ``x = x0`` on the history, ``u = 0`` on the history, free endpoint.
    Delayed values between nodes use linear interpolation.

    Returns
    -------
    t, x, u : ndarray
        Nodes ``(N+1,)``, states ``(N+1, n)`` and controls ``(N+1, m)``.
    """
    A, A_delay = np.atleast_2d(A), np.atleast_2d(A_delay)
    B, B_delay = np.atleast_2d(B), np.atleast_2d(B_delay)
    K1, K2, K3, K4 = K
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    n, m = B.shape
    t = np.linspace(0.0, t_f, n_nodes)
    N = n_nodes - 1
    h = t[1] - t[0]
    Dx, maskx = _interp_matrix(t - tau1, t, 0.0)
    Du, masku = _interp_matrix(t - tau2, t, 0.0)
    nx, nu = (N + 1) * n, (N + 1) * m
    nz = nx + nu

    # selection operators: X = Sx z (node-major), U = Su z
    Sx = np.zeros((nx, nz))
    Sx[:, :nx] = np.eye(nx)
    Su = np.zeros((nu, nz))
    Su[:, nx:] = np.eye(nu)
    In, Im = np.eye(n), np.eye(m)
    Y = np.kron(Dx, In) @ Sx                     # delayed state, affine part
    y_hist = np.kron(maskx.astype(float), x0)    # history contribution
    V = np.kron(Du, Im) @ Su                     # delayed control (history is 0)

    # dynamics rows  f_k = A x_k + A_delay y_k + B u_k + B_delay v_k
    F = (np.kron(np.eye(N + 1), A) @ Sx + np.kron(np.eye(N + 1), A_delay) @ Y
         + np.kron(np.eye(N + 1), B) @ Su + np.kron(np.eye(N + 1), B_delay) @ V)
    f_hist = np.kron(np.eye(N + 1), A_delay) @ y_hist

    rows, rhs = [], []
    for k in range(N):
        ik, ik1 = slice(k * n, (k + 1) * n), slice((k + 1) * n, (k + 2) * n)
        R = Sx[ik1] - Sx[ik] - 0.5 * h * (F[ik] + F[ik1])
        rows.append(R)
        rhs.append(0.5 * h * (f_hist[ik] + f_hist[ik1]))
    rows.append(Sx[:n])
    rhs.append(x0)
    C = np.vstack(rows)
    d = np.concatenate(rhs)

    w = np.full(N + 1, h)
    w[0] = w[-1] = 0.5 * h
    Wn, Wm = np.kron(np.diag(w), In), np.kron(np.diag(w), Im)
    # cost = z'Qz + 2 c'z + const
    Q = K1 * Sx.T @ Wn @ Sx + K2 * Y.T @ Wn @ Y + K3 * Su.T @ Wm @ Su + K4 * V.T @ Wm @ V
    c = K2 * Y.T @ Wn @ y_hist
    kkt = np.block([[2 * Q, C.T], [C, np.zeros((C.shape[0], C.shape[0]))]])
    sol = np.linalg.solve(kkt, np.concatenate([-2 * c, d]))
    z = sol[:nz]
    u = z[nx:].reshape(N + 1, m)
    # the trapezoidal rule leaves the two endpoint controls inconsistent
    # (their quadrature weight is halved); extrapolate them from the interior
    u[0] = 3 * u[1] - 3 * u[2] + u[3]
    u[-1] = 3 * u[-2] - 3 * u[-3] + u[-4]
    return t, z[:nx].reshape(N + 1, n), u


def riccati_lq(A, B, K1, K3, x0, t_f):
    """Non-delayed LQ problem ``x' = A x + B u``, cost ``int K1|x|^2 + K3|u|^2``.

    Returns callables ``x(t)`` and ``u(t)`` built from the Riccati solution.
    """
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    n = A.shape[0]
    Qc, Rinv = K1 * np.eye(n), np.eye(B.shape[1]) / K3

    def ric(t, s):
        S = s.reshape(n, n)
        return -(A.T @ S + S @ A - S @ B @ Rinv @ B.T @ S + Qc).ravel()

    S_sol = solve_ivp(ric, (t_f, 0.0), np.zeros(n * n), rtol=1e-12, atol=1e-14, dense_output=True)
    S = lambda t: S_sol.sol(t).reshape(n, n)

    def cl(t, x):
        return A @ x - B @ Rinv @ B.T @ S(t) @ x

    x_sol = solve_ivp(cl, (0.0, t_f), np.atleast_1d(x0).astype(float), rtol=1e-12, atol=1e-14,
                      dense_output=True)
    return (lambda t: x_sol.sol(t).T,
            lambda t: np.array([-(Rinv @ B.T @ S(ti) @ x_sol.sol(ti)) for ti in np.atleast_1d(t)]))


def method_of_steps(n_intervals):
    """Exact solution of ``x'(t) = -x(t - 1)``, ``x = 1`` on ``[-1, 0]``.

    Returns a list of coefficient lists: entry ``k`` holds the Fraction
    coefficients of the polynomial in ``s = t - k`` valid on ``[k, k + 1]``.
    """
    prev = [Fraction(1)]          # history, as a polynomial in s on [-1, 0]
    start = Fraction(1)
    pieces = []
    for _ in range(n_intervals):
        # x(k + s) = x(k) - int_0^s prev(r) dr
        coeffs = [start] + [-c / (i + 1) for i, c in enumerate(prev)]
        pieces.append(coeffs)
        start = sum(coeffs)
        prev = coeffs
    return pieces


def method_of_steps_eval(pieces, t):
    """Evaluate the piecewise polynomial from :func:`method_of_steps` in floats."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.empty_like(t)
    for i, ti in enumerate(t):
        if ti <= 0:
            out[i] = 1.0
            continue
        k = min(int(np.floor(ti)), len(pieces) - 1)
        s = ti - k
        out[i] = sum(float(c) * s ** j for j, c in enumerate(pieces[k]))
    return out
