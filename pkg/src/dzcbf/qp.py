"""Dense operator-splitting (ADMM) solver for small convex QPs and LPs.

Problems have the form::

    minimize    0.5 x'Px + q'x
    subject to  l <= Ax <= u

The iteration follows the OSQP splitting (Ruiz equilibration, over-relaxation,
adaptive step size) with an active-set polish that solves the reduced KKT
system once the iterates are close. Everything is dense numpy; problem sizes
here are a few dozen variables and at most tens of thousands of rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import lsq_linear

OPTIMAL = "optimal"
MAX_ITERS = "max_iters"
INFEASIBLE = "infeasible-detected"

_RHO_MIN, _RHO_MAX = 1e-6, 1e6
# rho updates per solve; past this the step size is frozen so ADMM's fixed-rho convergence applies
_MAX_RHO_UPDATES = 20
_EQ_TOL = 1e-9


class QpError(ValueError):
    pass


@dataclass
class QpProblem:
    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    l: np.ndarray
    u: np.ndarray
    layout: dict = field(default_factory=dict)

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        n = self.q.size
        A = np.asarray(self.A, dtype=float)
        if A.ndim == 2 and A.shape[1] != n or A.size % max(n, 1):
            raise QpError(f"A has shape {A.shape}, expected (rows, {n})")
        self.A = A.reshape(-1, n)
        self.l = np.asarray(self.l, dtype=float).reshape(-1)
        self.u = np.asarray(self.u, dtype=float).reshape(-1)
        m = self.A.shape[0]
        if self.P.shape != (n, n):
            raise QpError(f"P has shape {self.P.shape}, expected {(n, n)}")
        if self.l.size != m or self.u.size != m:
            raise QpError("bound vectors do not match constraint rows")
        if np.any(self.l > self.u):
            raise QpError("lower bound exceeds upper bound")
        if not np.allclose(self.P, self.P.T, atol=1e-12):
            raise QpError("P is not symmetric")
        try:
            np.linalg.cholesky(self.P + 1e-9 * (1 + np.abs(self.P).max(initial=0)) * np.eye(n))
        except np.linalg.LinAlgError as exc:
            raise QpError("P is not positive semidefinite") from exc

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def objective(self, x) -> float:
        return float(0.5 * x @ self.P @ x + self.q @ x)


@dataclass
class QpSolution:
    primal: np.ndarray
    dual: np.ndarray
    status: str
    primal_residual: float
    dual_residual: float
    iterations: int = 0
    polished: bool = False
    objective: float = np.nan


def kkt_residuals(p: QpProblem, x, y) -> dict:
    """Stationarity, primal infeasibility and complementarity (inf-norms)."""
    Ax = p.A @ x
    stat = p.P @ x + p.q + p.A.T @ y
    viol = np.maximum(Ax - p.u, 0) + np.maximum(p.l - Ax, 0)
    yp, ym = np.maximum(y, 0), np.maximum(-y, 0)
    fu, fl = np.isfinite(p.u), np.isfinite(p.l)
    gap_u = np.where(fu, yp * (np.where(fu, p.u, 0.0) - Ax), yp)
    gap_l = np.where(fl, ym * (Ax - np.where(fl, p.l, 0.0)), ym)
    comp = np.abs(gap_u) + np.abs(gap_l)
    return {
        "stationarity": float(np.abs(stat).max(initial=0)),
        "primal": float(viol.max(initial=0)),
        "complementarity": float(comp.max(initial=0)),
    }


def _inf_norm(v):
    return float(np.abs(v).max(initial=0.0))


class _Scaling:
    def __init__(self, p: QpProblem, iters: int = 15):
        n, m = p.n, p.m
        P, A, q = p.P.copy(), p.A.copy(), p.q.copy()
        D, E = np.ones(n), np.ones(m)
        for _ in range(iters):
            col = np.maximum(np.abs(P).max(axis=0, initial=0), np.abs(A).max(axis=0, initial=0))
            dt = 1.0 / np.sqrt(np.clip(col, 1e-4, 1e4))
            dt[col == 0] = 1.0
            row = np.abs(A).max(axis=1, initial=0)
            et = 1.0 / np.sqrt(np.clip(row, 1e-4, 1e4))
            et[row == 0] = 1.0
            P = dt[:, None] * P * dt[None, :]
            A = et[:, None] * A * dt[None, :]
            q = dt * q
            D *= dt
            E *= et
        pc = np.abs(P).max(axis=0, initial=0).mean() if n else 0.0
        c = 1.0 / np.clip(max(pc, _inf_norm(q)), 1e-4, 1e4)
        if max(pc, _inf_norm(q)) == 0:
            c = 1.0
        self.D, self.E, self.c = D, E, c
        self.P, self.q, self.A = c * P, c * q, A
        self.l, self.u = E * p.l, E * p.u


def _polish(p: QpProblem, x, y, z):
    """Solve the equality-constrained problem on the guessed active set.

    Uses a null-space method so the cost is governed by the variable count,
    not by the (possibly large, redundant) number of active rows.
    """
    lo_act = (z - p.l < -y) | (p.u - p.l < _EQ_TOL)
    up_act = (p.u - z < y) & ~lo_act
    lo_act &= np.isfinite(p.l)
    up_act &= np.isfinite(p.u)
    Ared = np.vstack([p.A[lo_act], p.A[up_act]])
    b = np.concatenate([p.l[lo_act], p.u[up_act]])
    n = p.n
    if Ared.shape[0]:
        U, sv, Vt = np.linalg.svd(Ared, full_matrices=Ared.shape[0] < n)
        rank = int(np.sum(sv > sv[0] * 1e-10)) if sv.size else 0
        Vr = Vt[:rank]
        x_p = Vr.T @ ((U[:, :rank].T @ b) / sv[:rank])
        N = Vt[rank:].T
    else:
        x_p, N = np.zeros(n), np.eye(n)
    if N.shape[1]:
        H = N.T @ p.P @ N
        g = N.T @ (p.q + p.P @ x_p)
        w = np.linalg.lstsq(H, -g, rcond=None)[0]
        if np.abs(H @ w + g).max(initial=0) > 1e-9 * (1 + np.abs(g).max(initial=0)):
            return None  # unbounded along the null space
        xp = x_p + N @ w
    else:
        xp = x_p
    yred = np.zeros(Ared.shape[0])
    if Ared.shape[0]:
        yred = np.linalg.lstsq(Ared.T, -(p.P @ xp + p.q), rcond=None)[0]
    if not (np.all(np.isfinite(xp)) and np.all(np.isfinite(yred))):
        return None
    yp = np.zeros(p.m)
    nl = int(lo_act.sum())
    yp[lo_act] = yred[:nl]
    yp[up_act] = yred[nl:]
    return xp, yp


def solve(
    p: QpProblem,
    tol: float = 1e-6,
    max_iters: int = 20000,
    rho: float = 0.1,
    sigma: float = 1e-6,
    alpha: float = 1.6,
    check_every: int = 10,
    polish: bool = True,
    warm_start=None,
) -> QpSolution:
    """ADMM with over-relaxation; ``optimal`` once both residuals drop below ``tol``.

    Residuals are absolute inf-norms on the unscaled problem. Iteration-limit
    exits return the last iterate with status ``max_iters``.
    """
    n, m = p.n, p.m
    if n == 0:
        raise QpError("problem has no variables")
    if m == 0:
        # unconstrained: P x = -q
        x = np.linalg.lstsq(p.P, -p.q, rcond=None)[0]
        r = _inf_norm(p.P @ x + p.q)
        st = OPTIMAL if r < tol else INFEASIBLE
        return QpSolution(x, np.zeros(0), st, 0.0, r, 0, False, p.objective(x))

    sc = _Scaling(p)
    P, q, A, l, u = sc.P, sc.q, sc.A, sc.l, sc.u
    eq = (u - l) < _EQ_TOL
    free = np.isinf(l) & np.isinf(u)

    def rho_vec(r):
        v = np.full(m, r)
        v[eq] = 1e3 * r
        v[free] = _RHO_MIN
        return v

    def factor(rv):
        K = P + sigma * np.eye(n) + A.T @ (rv[:, None] * A)
        return sla.cho_factor(K, check_finite=False)

    if warm_start is not None:
        x0, y0 = warm_start
        xs = np.asarray(x0, dtype=float) / sc.D
        ys = np.zeros(m) if y0 is None else np.asarray(y0, dtype=float) * sc.c / sc.E
    else:
        xs, ys = np.zeros(n), np.zeros(m)
    zs = np.clip(A @ xs, l, u)
    rv = rho_vec(rho)
    fac = factor(rv)

    def unscale(xs, ys, zs):
        return sc.D * xs, sc.E * ys / sc.c, zs / sc.E

    best = None
    status = MAX_ITERS
    it = updates = 0
    prim = dual = np.inf
    for it in range(1, max_iters + 1):
        x_prev, y_prev, z_prev = xs, ys, zs
        rhs = sigma * xs - q + A.T @ (rv * zs - ys)
        xt = sla.cho_solve(fac, rhs, check_finite=False)
        zt = A @ xt
        xs = alpha * xt + (1 - alpha) * x_prev
        zr = alpha * zt + (1 - alpha) * z_prev
        zs = np.clip(zr + ys / rv, l, u)
        ys = ys + rv * (zr - zs)

        if it % check_every and it != max_iters:
            continue
        x, y, z = unscale(xs, ys, zs)
        Ax = p.A @ x
        prim = _inf_norm(Ax - z)
        dual = _inf_norm(p.P @ x + p.q + p.A.T @ y)
        if prim < tol and dual < tol:
            status = OPTIMAL
            best = (x, y)
            break
        if _primal_infeasible(A, l, u, ys - y_prev, sc):
            status = INFEASIBLE
            best = (x, y)
            break
        if polish:
            res = _try_polish(p, x, y, z, tol)
            if res is not None:
                x, y, prim, dual = res
                return QpSolution(x, y, OPTIMAL, prim, dual, it, True, p.objective(x))
        # adaptive step size in the scaled space
        Axs = A @ xs
        pn = _inf_norm(Axs - zs) / max(_inf_norm(Axs), _inf_norm(zs), 1e-12)
        dn = _inf_norm(P @ xs + q + A.T @ ys) / max(
            _inf_norm(P @ xs), _inf_norm(A.T @ ys), _inf_norm(q), 1e-12
        )
        if dn > 0 and pn > 0 and updates < _MAX_RHO_UPDATES:
            new = float(np.clip(rho * np.sqrt(pn / dn), _RHO_MIN, _RHO_MAX))
            if new > 5 * rho or new < 0.2 * rho:
                updates += 1
                rho = new
                rv = rho_vec(rho)
                fac = factor(rv)
        best = (x, y)

    x, y = best
    if status == OPTIMAL and polish:
        res = _try_polish(p, x, y, p.A @ x, tol)
        if res is not None:
            x2, y2, pr2, du2 = res
            if pr2 <= prim and du2 <= max(dual, tol):
                return QpSolution(x2, y2, OPTIMAL, pr2, du2, it, True, p.objective(x2))
    return QpSolution(x, y, status, prim, dual, it, False, p.objective(x))


def _project_polish(p: QpProblem, x, act_tol=1e-5):
    """Degenerate fallback: snap x onto its nearly-active bounds, refit signed multipliers."""
    Ax = p.A @ x
    scale = 1 + np.abs(Ax)
    lo = np.isfinite(p.l) & (Ax - p.l < act_tol * scale)
    up = np.isfinite(p.u) & (p.u - Ax < act_tol * scale) & ~lo
    act = lo | up
    if not act.any():
        return None
    Aa = p.A[act]
    b = np.where(lo, p.l, p.u)[act]
    xp = x - np.linalg.lstsq(Aa, Aa @ x - b, rcond=1e-12)[0]
    eq = p.u - p.l < _EQ_TOL
    lb = np.where(up & ~eq, 0.0, -np.inf)[act]
    ub = np.where(lo & ~eq, 0.0, np.inf)[act]
    fit = lsq_linear(Aa.T, -(p.P @ xp + p.q), bounds=(lb, ub), method="bvls", tol=1e-14)
    yp = np.zeros(p.m)
    yp[act] = fit.x
    if not (np.all(np.isfinite(xp)) and np.all(np.isfinite(yp))):
        return None
    return xp, yp


def _try_polish(p, x, y, z, tol):
    # null-space solve first, then the projection fallback for degenerate active sets
    for cand in (_polish(p, x, y, z), _project_polish(p, x)):
        if cand is None:
            continue
        xp, yp = cand
        k = kkt_residuals(p, xp, yp)
        if k["primal"] < tol and k["stationarity"] < tol and k["complementarity"] < tol:
            return xp, yp, k["primal"], k["stationarity"]
    return None


def _primal_infeasible(A, l, u, dy, sc, eps: float = 1e-7) -> bool:
    ny = _inf_norm(dy)
    if ny < 1e-12:
        return False
    dy = dy / ny
    if _inf_norm(A.T @ dy) > eps:
        return False
    dyp, dym = np.maximum(dy, 0), np.minimum(dy, 0)
    if np.any(dyp[~np.isfinite(u)] > eps) or np.any(dym[~np.isfinite(l)] < -eps):
        return False
    su = (np.where(np.isfinite(u), u, 0.0) * dyp).sum()
    sl = (np.where(np.isfinite(l), l, 0.0) * dym).sum()
    return bool(su + sl < -eps)


# ---------------------------------------------------------------------------
# safety filter


def build_safety_filter(leader: int, u_nom, constraints, rho: float = 100.0, input_box=(-50.0, 50.0)) -> QpProblem:
    """Slack-penalized projection of ``u_nom`` onto one leader's safe inputs.

    Variables are ``(u, t, s)``: the ``m`` input components, one epigraph
    variable per (constraint, component) pair, and one slack per constraint.
    Each local constraint ``c0 + sum_q min(lo_q d_q, hi_q d_q) >= rhs`` with
    ``d = u - anchor`` becomes ``t_q <= lo_q d_q``, ``t_q <= hi_q d_q`` and
    ``c0 + sum_q t_q + s >= rhs``.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    u_nom = np.atleast_1d(np.asarray(u_nom, dtype=float))
    m = u_nom.size
    K = len(constraints)
    nv = m + K * m + K
    lo_box, hi_box = np.broadcast_to(np.asarray(input_box[0], float), (m,)), np.broadcast_to(
        np.asarray(input_box[1], float), (m,))
    P = np.zeros((nv, nv))
    P[:m, :m] = np.eye(m)
    q = np.zeros(nv)
    q[:m] = -u_nom
    q[m + K * m:] = rho
    rows, lo, hi = [], [], []
    for c_idx, c in enumerate(constraints):
        if c.leader != leader:
            raise ValueError(f"constraint for leader {c.leader} passed to filter of {leader}")
        for qi in range(m):
            t_col = m + c_idx * m + qi
            for slope in (c.slope_lo[qi], c.slope_hi[qi]):
                r = np.zeros(nv)
                r[t_col] = 1.0
                r[qi] = -slope
                rows.append(r)
                lo.append(-np.inf)
                hi.append(-slope * c.input_anchor[qi])
        r = np.zeros(nv)
        r[m + c_idx * m: m + (c_idx + 1) * m] = 1.0
        r[m + K * m + c_idx] = 1.0
        rows.append(r)
        lo.append(c.rhs - c.const_term)
        hi.append(np.inf)
    for qi in range(m):
        r = np.zeros(nv)
        r[qi] = 1.0
        rows.append(r)
        lo.append(lo_box[qi])
        hi.append(hi_box[qi])
    for c_idx in range(K):
        r = np.zeros(nv)
        r[m + K * m + c_idx] = 1.0
        rows.append(r)
        lo.append(0.0)
        hi.append(np.inf)
    layout = {"u": slice(0, m), "t": slice(m, m + K * m), "s": slice(m + K * m, nv), "leader": leader}
    return QpProblem(P, q, np.array(rows), np.array(lo), np.array(hi), layout)


@dataclass
class FilterResult:
    u: np.ndarray
    slack: np.ndarray
    solution: QpSolution | None
    problem: QpProblem | None = None


def solve_safety_filter(leader, u_nom, constraints, rho=100.0, input_box=(-50.0, 50.0), tol=1e-6,
                        max_iters=20000) -> FilterResult:
    u_nom = np.atleast_1d(np.asarray(u_nom, dtype=float))
    if not constraints:
        return FilterResult(np.clip(u_nom, input_box[0], input_box[1]), np.zeros(0), None, None)
    p = build_safety_filter(leader, u_nom, constraints, rho, input_box)
    sol = solve(p, tol=tol, max_iters=max_iters)
    if sol.status == INFEASIBLE:
        raise QpError(f"safety filter of leader {leader} reported infeasible")
    lay = p.layout
    return FilterResult(sol.primal[lay["u"]].copy(), sol.primal[lay["s"]].copy(), sol, p)
