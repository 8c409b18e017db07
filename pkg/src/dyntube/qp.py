"""Dense ADMM solver for small convex QPs with L1-softened rows.

Problem form::

    minimize    1/2 x'Px + q'x + mu * sum_i max(0, h_i - (Gx)_i)
    subject to  l <= Ax <= u

The hard rows ``A`` and soft rows ``G`` are stacked into one constraint
matrix.  The splitting follows OSQP: Ruiz equilibration, a cached Cholesky factor
of ``P + sigma I + rho A'A``, over-relaxation, and a z-update that is a box
projection on hard rows and the proximal map of the hinge penalty on soft
rows.  After the iterations an active-set polish solves the reduced KKT
system, which lifts small problems to near machine accuracy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, lu_factor, lu_solve

INF = np.inf


class QpNumericalError(RuntimeError):
    """Raised when the iterates stop being finite."""


@dataclass
class QpProblem:
    P: np.ndarray
    q: np.ndarray
    A: np.ndarray | None = None
    l: np.ndarray | None = None
    u: np.ndarray | None = None
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    mu: float = 1e3

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        n = len(self.q)
        if self.P.shape != (n, n):
            raise ValueError(f"P must be {n}x{n}, got {self.P.shape}")
        self.A = np.zeros((0, n)) if self.A is None else np.asarray(self.A, dtype=float).reshape(-1, n)
        m = len(self.A)
        self.l = np.full(m, -INF) if self.l is None else np.asarray(self.l, dtype=float).reshape(m)
        self.u = np.full(m, INF) if self.u is None else np.asarray(self.u, dtype=float).reshape(m)
        if np.any(self.l > self.u):
            raise ValueError("lower bound exceeds upper bound")
        self.G = np.zeros((0, n)) if self.G is None else np.asarray(self.G, dtype=float).reshape(-1, n)
        self.h = np.zeros(0) if self.h is None else np.asarray(self.h, dtype=float).reshape(len(self.G))
        if self.mu <= 0:
            raise ValueError("soft-row penalty must be > 0")

    @property
    def n(self) -> int:
        return len(self.q)

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.P @ x + self.q @ x
                     + self.mu * np.maximum(0.0, self.h - self.G @ x).sum())

    def violation(self, x) -> float:
        """Largest hard-row violation."""
        if not len(self.A):
            return 0.0
        Ax = self.A @ x
        return float(max(0.0, np.max(self.l - Ax), np.max(Ax - self.u)))


@dataclass
class QpResult:
    x: np.ndarray
    y: np.ndarray       # duals of the hard rows, OSQP sign convention
    y_soft: np.ndarray  # duals of the soft rows, in [-mu, 0]
    objective: float
    iterations: int
    status: str         # "solved" | "max_iter"
    polished: bool
    prim_res: float
    dual_res: float


@dataclass
class QpSettings:
    max_iter: int = 400
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_abs: float = 1e-7
    eps_rel: float = 1e-7
    check_every: int = 10
    adaptive_rho: bool = True
    scaling_iters: int = 10
    polish_every: int = 25
    polish_tol: float = 1e-9
    probe_rounds: int = 6
    polish: bool = True


def _prox(v, l, u, h, mu_rho, m_hard):
    z = np.empty_like(v)
    z[:m_hard] = np.clip(v[:m_hard], l, u)
    s = v[m_hard:]
    # argmin_z  mu*max(0, h - z) + rho/2 (z - s)^2
    z[m_hard:] = np.where(s >= h, s, np.where(s <= h - mu_rho, s + mu_rho, h))
    return z


def kkt_residual(prob: QpProblem, x, y, y_soft=None) -> float:
    """Max of stationarity, feasibility and complementarity residuals.

    Soft rows enter through their hinge subgradient: ``y_soft`` must lie in
    ``[-mu, 0]`` and be pinned to the end points away from the kink.
    """
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    y_soft = np.zeros(len(prob.G)) if y_soft is None else np.asarray(y_soft, dtype=float)
    stat = prob.P @ x + prob.q + prob.A.T @ y + prob.G.T @ y_soft
    res = [np.max(np.abs(stat)) if len(stat) else 0.0, prob.violation(x)]
    if len(prob.A):
        Ax = prob.A @ x
        yp, ym = np.maximum(y, 0.0), np.minimum(y, 0.0)
        lo = np.where(np.isfinite(prob.l), Ax - prob.l, 0.0)
        hi = np.where(np.isfinite(prob.u), prob.u - Ax, 0.0)
        res += [np.max(np.abs(yp * hi)), np.max(np.abs(ym * lo)),
                np.max(np.where(np.isfinite(prob.u), 0.0, yp)),
                np.max(np.where(np.isfinite(prob.l), 0.0, -ym))]
    if len(prob.G):
        g = prob.G @ x - prob.h
        ys = y_soft
        res += [np.max(np.maximum(0.0, ys)), np.max(np.maximum(0.0, -prob.mu - ys)),
                np.max(np.abs(np.where(g > 0, ys * g, 0.0))),
                np.max(np.abs(np.where(g < 0, (ys + prob.mu) * g, 0.0)))]
    return float(max(res))


class AdmmQp:
    """Reusable solver holding its settings; each call equilibrates and factors afresh."""

    def __init__(self, settings: QpSettings | None = None):
        self.settings = settings or QpSettings()

    def solve(self, prob: QpProblem, x0=None, y0=None) -> QpResult:
        st = self.settings
        n, mh, ms = prob.n, len(prob.A), len(prob.G)
        C = np.vstack([prob.A, prob.G])
        D, E, c = _ruiz(prob.P, prob.q, C, st.scaling_iters)
        Ps = c * (D[:, None] * prob.P * D[None, :])
        qs = c * D * prob.q
        Cs = E[:, None] * C * D[None, :]
        ls, us, hs = E[:mh] * prob.l, E[:mh] * prob.u, E[mh:] * prob.h
        mus = c * prob.mu / E[mh:]
        x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float) / D
        y = np.zeros(mh + ms) if y0 is None else c * np.asarray(y0, dtype=float) / E
        early = []

        def probe(xs, ysc):
            # Try the active-set polish on the current iterate; stop ADMM once
            # it certifies an (almost) exact KKT point.
            pol = _polish(prob, D * xs, (E * ysc / c)[:mh], (E * ysc / c)[mh:], st.probe_rounds)
            if pol is not None and prob.violation(pol[0]) <= 1e-9:
                if kkt_residual(prob, *pol) <= st.polish_tol * (1 + _inf(prob.q)):
                    early.append(pol)
                    return True
            return False

        x, y, it, status, prim, dual = _admm(Ps, qs, Cs, ls, us, hs, mus, mh, x, y, st, D, E, c,
                                             probe if st.polish else None)
        if early:
            xp, yhp, ysp = early[0]
            return QpResult(xp, yhp, ysp, prob.objective(xp), it, "solved", True, prim, dual)
        x = D * x
        y = E * y / c
        yh, ys = y[:mh], y[mh:]
        polished = False
        if st.polish:
            pol = _polish(prob, x, yh, ys)
            if pol is not None:
                xp, yhp, ysp = pol
                # Judge by optimality residual: the ADMM point may be slightly
                # infeasible and hence look cheaper than the polished one.
                k_pol = kkt_residual(prob, xp, yhp, ysp)
                if prob.violation(xp) <= 1e-9 and k_pol <= kkt_residual(prob, x, yh, ys):
                    x, yh, ys, polished = xp, yhp, ysp, True
                    status = "solved" if k_pol < 1e-6 else status
        return QpResult(x, yh, ys, prob.objective(x), it, status, polished, prim, dual)


def _ruiz(P, q, C, iters: int):
    """Modified Ruiz equilibration of the KKT matrix, plus a cost scale."""
    n, m = len(q), len(C)
    D, E = np.ones(n), np.ones(m)
    Ps, Cs = P.copy(), C.copy()
    for _ in range(iters):
        col = np.maximum(np.abs(Ps).max(axis=0), np.abs(Cs).max(axis=0) if m else 0.0)
        dx = 1.0 / np.sqrt(np.clip(col, 1e-4, 1e4))
        de = 1.0 / np.sqrt(np.clip(np.abs(Cs).max(axis=1), 1e-4, 1e4)) if m else np.ones(0)
        D *= dx
        E *= de
        Ps = dx[:, None] * Ps * dx[None, :]
        Cs = de[:, None] * Cs * dx[None, :]
    qn = np.max(np.abs(D * q)) if n else 0.0
    c = 1.0 / np.clip(max(np.abs(Ps).max(axis=0).mean(), qn), 1e-4, 1e4)
    return D, E, c


def _admm(P, q, C, l, u, h, mu, mh, x, y, st, D, E, c, probe=None):
    n, m = len(q), len(C)
    z = _prox(C @ x, l, u, h, np.zeros(m - mh), mh) if m else np.zeros(0)
    rho = st.rho
    # Equality rows get a stiffer penalty, as in OSQP.
    eq = np.zeros(m, dtype=bool)
    eq[:mh] = np.abs(u - l) < 1e-9
    rho_vec = np.where(eq, 1e3 * rho, rho)
    Dinv, Einv = 1.0 / D, 1.0 / E

    def factor(rv):
        # Small dense systems: an explicit inverse turns each solve into one matvec.
        K = cho_factor(P + st.sigma * np.eye(n) + C.T @ (rv[:, None] * C), check_finite=False)
        return cho_solve(K, np.eye(n), check_finite=False)

    K = factor(rho_vec)
    status, it = "max_iter", 0
    prim = dual = INF
    for it in range(1, st.max_iter + 1):
        xt = K @ (st.sigma * x - q + C.T @ (rho_vec * z - y))
        zt = C @ xt
        x = st.alpha * xt + (1 - st.alpha) * x
        zh = st.alpha * zt + (1 - st.alpha) * z
        z = _prox(zh + y / rho_vec, l, u, h, mu / rho_vec[mh:], mh)
        y = y + rho_vec * (zh - z)
        if it % st.check_every and it != st.max_iter:
            continue
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise QpNumericalError("ADMM iterates diverged")
        # Residuals in the original units.
        Cx, Px, Cty = C @ x, P @ x, C.T @ y
        prim = _inf(Einv * (Cx - z)) if m else 0.0
        dual = _inf(Dinv * (Px + q + Cty)) / c
        eps_p = st.eps_abs + st.eps_rel * max(_inf(Einv * Cx), _inf(Einv * z))
        eps_d = st.eps_abs + st.eps_rel * max(_inf(Dinv * Px), _inf(Dinv * Cty), _inf(Dinv * q)) / c
        if prim <= eps_p and dual <= eps_d:
            status = "solved"
            break
        if probe is not None and it % st.polish_every == 0 and probe(x, y):
            status = "solved"
            break
        if st.adaptive_rho and m:
            ratio = np.sqrt((_inf(Cx - z) / (max(_inf(Cx), _inf(z)) + 1e-12))
                            / (_inf(Px + q + Cty) / (max(_inf(Px), _inf(Cty), _inf(q)) + 1e-12) + 1e-30))
            if ratio > 5 or ratio < 0.2:
                rho = float(np.clip(rho * ratio, 1e-6, 1e6))
                rho_vec = np.where(eq, 1e3 * rho, rho)
                K = factor(rho_vec)
    return x, y, it, status, prim, dual


def _inf(a) -> float:
    return float(np.max(np.abs(a))) if np.size(a) else 0.0


def _kkt_solve(prob, low, up, seq, sviol, delta=1e-10, refine=3):
    n = prob.n
    Aact = np.vstack([prob.A[low], prob.A[up], prob.G[seq]])
    bact = np.concatenate([prob.l[low], prob.u[up], prob.h[seq]])
    qeff = prob.q - prob.mu * prob.G[sviol].sum(axis=0)
    k = len(Aact)
    Kt = np.block([[prob.P, Aact.T], [Aact, np.zeros((k, k))]])
    K = Kt + np.diag(np.concatenate([np.full(n, delta), np.full(k, -delta)]))
    b = np.concatenate([-qeff, bact])
    lu = lu_factor(K, check_finite=False)
    sol = lu_solve(lu, b, check_finite=False)
    for _ in range(refine):
        sol = sol + lu_solve(lu, b - Kt @ sol, check_finite=False)
    x, lam = sol[:n], sol[n:]
    y = np.zeros(len(prob.A))
    ys = np.zeros(len(prob.G))
    nl, nu = int(low.sum()), int(up.sum())
    y[low], y[up] = lam[:nl], lam[nl: nl + nu]
    ys[seq] = lam[nl + nu:]
    ys[sviol] = -prob.mu
    return x, y, ys


def _polish(prob: QpProblem, x, y, ys, max_rounds: int = 25):
    """Primal-dual active-set correction seeded by the ADMM duals.

    Each round solves the equality-constrained KKT system of the current
    guess, then moves rows whose primal value or dual sign is inconsistent.
    Returns ``None`` when no consistent active set is found.
    """
    tol = 1e-7 * max(1.0, _inf(y), _inf(ys))
    low = (y < -tol) & np.isfinite(prob.l)
    up = (y > tol) & np.isfinite(prob.u)
    seq = (ys < -tol) & (ys > -prob.mu + tol)
    sviol = ys <= -prob.mu + tol
    ftol = 1e-10
    for _ in range(max_rounds):
        try:
            xp, yp, ysp = _kkt_solve(prob, low, up, seq, sviol)
        except (np.linalg.LinAlgError, ValueError):
            return None
        if not np.all(np.isfinite(xp)):
            return None
        Ax, g = prob.A @ xp, prob.G @ xp - prob.h
        scale = 1.0 + _inf(Ax)
        n_low = low & (yp <= 0) | ~low & ~up & (Ax < prob.l - ftol * scale)
        n_up = up & (yp >= 0) | ~low & ~up & (Ax > prob.u + ftol * scale)
        n_seq = (seq & (ysp <= 0) & (ysp >= -prob.mu)) | (~seq & ~sviol & (g < -ftol * scale)) \
            | (sviol & (g > ftol * scale))
        n_viol = (sviol & (g <= ftol * scale)) | (seq & (ysp < -prob.mu))
        n_seq &= ~n_viol
        if (np.array_equal(n_low, low) and np.array_equal(n_up, up)
                and np.array_equal(n_seq, seq) and np.array_equal(n_viol, sviol)):
            return xp, yp, ysp
        low, up, seq, sviol = n_low, n_up, n_seq, n_viol
    return None


def solve_qp(prob: QpProblem, settings: QpSettings | None = None, x0=None, y0=None) -> QpResult:
    return AdmmQp(settings).solve(prob, x0, y0)


def enumerate_active_sets(prob: QpProblem):
    """Brute-force oracle for tiny hard-constrained QPs with ``P`` positive definite.

    Every row is tried free, at its lower bound and at its upper bound; the
    best primal-dual feasible candidate is returned as ``(x, objective)``.
    """
    if len(prob.G):
        raise ValueError("the enumeration oracle handles hard rows only")
    import itertools

    n, m = prob.n, len(prob.A)
    best = None
    for states in itertools.product((0, -1, 1), repeat=m):
        rows = [i for i, s in enumerate(states) if s]
        if any((s == -1 and not np.isfinite(prob.l[i])) or (s == 1 and not np.isfinite(prob.u[i]))
               for i, s in enumerate(states)):
            continue
        Aa = prob.A[rows]
        b = np.array([prob.l[i] if states[i] == -1 else prob.u[i] for i in rows])
        K = np.block([[prob.P, Aa.T], [Aa, np.zeros((len(rows), len(rows)))]])
        try:
            sol = np.linalg.solve(K, np.concatenate([-prob.q, b]))
        except np.linalg.LinAlgError:
            continue
        x = sol[:n]
        if prob.violation(x) > 1e-9:
            continue
        lam = sol[n:]
        if any((states[i] == -1 and lam[j] > 1e-9) or (states[i] == 1 and lam[j] < -1e-9)
               for j, i in enumerate(rows)):
            continue
        f = prob.objective(x)
        if best is None or f < best[1]:
            best = (x, f)
    return best
