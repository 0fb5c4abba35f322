"""Componentwise Jacobian interval bounds of ``hdot`` learned from samples.

For every pair of samples ``(i, j)`` with feature difference ``d = z_i - z_j``
the mean value theorem requires::

    lo . d+  -  hi . d-   <=  hdot_i - hdot_j  <=  hi . d+  -  lo . d-

The estimator returns the narrowest interval (minimum total width) that is
consistent with all pairs. Swapping ``i`` and ``j`` reproduces the same two
inequalities, so only unordered pairs are assembled.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import qp
from .barriers import analytic_hdot


@dataclass
class JacobianBounds:
    lower_x: np.ndarray
    upper_x: np.ndarray
    lower_u: np.ndarray
    upper_u: np.ndarray
    candidate: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("lower_x", "upper_x", "lower_u", "upper_u"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        if self.lower_x.shape != self.upper_x.shape or self.lower_u.shape != self.upper_u.shape:
            raise ValueError("lower/upper shapes differ")
        if np.any(self.lower_x > self.upper_x) or np.any(self.lower_u > self.upper_u):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def lower(self) -> np.ndarray:
        return np.concatenate([self.lower_x, self.lower_u])

    @property
    def upper(self) -> np.ndarray:
        return np.concatenate([self.upper_x, self.upper_u])

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    def to_json(self, path) -> None:
        doc = {
            "candidate": self.candidate,
            "lower_x": self.lower_x.tolist(),
            "upper_x": self.upper_x.tolist(),
            "lower_u": self.lower_u.tolist(),
            "upper_u": self.upper_u.tolist(),
            "metadata": self.metadata,
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "JacobianBounds":
        with open(path) as fh:
            doc = json.load(fh)
        return cls(doc["lower_x"], doc["upper_x"], doc["lower_u"], doc["upper_u"],
                   doc.get("candidate", ""), doc.get("metadata", {}))


def pair_differences(Z, hdot):
    """Feature and target differences over unordered pairs ``i < j``."""
    i, j = np.triu_indices(Z.shape[0], k=1)
    return Z[i] - Z[j], hdot[i] - hdot[j]


def pairwise_violation(lower, upper, Z, hdot) -> float:
    """Largest violation of the interval consistency constraints (0 if none)."""
    dZ, dh = pair_differences(np.asarray(Z, float), np.asarray(hdot, float))
    dp, dm = np.maximum(dZ, 0), np.maximum(-dZ, 0)
    lo_side = dp @ lower - dm @ upper - dh
    hi_side = dh - (dp @ upper - dm @ lower)
    return float(max(lo_side.max(initial=0.0), hi_side.max(initial=0.0), 0.0))


def _build_lp(Z, hdot, ridge):
    D = Z.shape[1]
    dZ, dh = pair_differences(Z, hdot)
    dp, dm = np.maximum(dZ, 0), np.maximum(-dZ, 0)
    # variables v = (lower, upper)
    A_lo = np.hstack([dp, -dm])   # <= dh
    A_hi = np.hstack([-dm, dp])   # >= dh
    A_order = np.hstack([-np.eye(D), np.eye(D)])  # >= 0
    A = np.vstack([A_lo, A_hi, A_order])
    lo = np.concatenate([np.full(len(dh), -np.inf), dh, np.zeros(D)])
    hi = np.concatenate([dh, np.full(len(dh), np.inf), np.full(D, np.inf)])
    c = np.concatenate([-np.ones(D), np.ones(D)])
    return qp.QpProblem(ridge * np.eye(2 * D), c, A, lo, hi)


class JacobianBoundEstimator(RegressorMixin, BaseEstimator):
    """Minimum-width Jacobian interval consistent with all sample pairs.

    ``fit(Z, hdot)`` takes features ``Z = [x_block, u_block]``. After fitting,
    ``lower_`` and ``upper_`` hold the interval; ``predict`` returns the
    interval midpoint model ``hdot_0 + mid . (z - z_0)`` anchored at the
    first sample, which is mostly useful as a sanity check.

    Parameters
    ----------
    n_state : int or None
        Number of leading feature columns that are states. Used only to split
        the result into state and input blocks.
    solver : {"admm", "highs"}
        Backend for the linear program.
    tol : float
        Solver tolerance.
    ridge : float
        Quadratic regularization added to the LP objective (ADMM backend).
    """

    def __init__(self, n_state=None, solver="admm", tol=1e-8, ridge=1e-9, max_iters=50000):
        self.n_state = n_state
        self.solver = solver
        self.tol = tol
        self.ridge = ridge
        self.max_iters = max_iters

    def fit(self, Z, hdot):
        Z, hdot = check_X_y(Z, hdot, dtype=float, y_numeric=True)
        if Z.shape[0] < 2:
            raise ValueError("need at least two samples to fit bounds")
        D = Z.shape[1]
        if self.solver == "admm":
            p = _build_lp(Z, hdot, self.ridge)
            sol = qp.solve(p, tol=self.tol, max_iters=self.max_iters)
            if sol.status == qp.INFEASIBLE:
                raise qp.QpError("bound LP reported infeasible")
            v = sol.primal
            self.status_ = sol.status
            self.n_iter_ = sol.iterations
        elif self.solver == "highs":
            from scipy.optimize import linprog

            dZ, dh = pair_differences(Z, hdot)
            dp, dm = np.maximum(dZ, 0), np.maximum(-dZ, 0)
            A_ub = np.vstack([np.hstack([dp, -dm]), np.hstack([dm, -dp]), np.hstack([np.eye(D), -np.eye(D)])])
            b_ub = np.concatenate([dh, -dh, np.zeros(D)])
            c = np.concatenate([-np.ones(D), np.ones(D)])
            res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=(None, None), method="highs")
            if res.status != 0:
                raise qp.QpError(f"bound LP failed: {res.message}")
            v = res.x
            self.status_ = qp.OPTIMAL
            self.n_iter_ = int(res.nit)
        else:
            raise ValueError(f"unknown solver {self.solver!r}")
        lower, upper = v[:D].copy(), v[D:].copy()
        # the solver meets the ordering constraint to tolerance; make it exact
        swap = lower > upper
        mid = 0.5 * (lower + upper)
        lower[swap] = upper[swap] = mid[swap]
        # columns that never vary are unconstrained; report them as exactly zero
        flat = np.all(Z == Z[0], axis=0)
        lower[flat] = upper[flat] = 0.0
        self.lower_, self.upper_ = lower, upper
        self.max_violation_ = pairwise_violation(lower, upper, Z, hdot)
        self.anchor_ = (Z[0].copy(), float(hdot[0]))
        return self

    def predict(self, Z):
        check_is_fitted(self, "lower_")
        Z = check_array(Z, dtype=float)
        z0, h0 = self.anchor_
        return h0 + (Z - z0) @ (0.5 * (self.lower_ + self.upper_))

    def to_bounds(self, candidate: str = "", metadata=None) -> JacobianBounds:
        check_is_fitted(self, "lower_")
        ns = len(self.lower_) if self.n_state is None else self.n_state
        return JacobianBounds(self.lower_[:ns], self.upper_[:ns], self.lower_[ns:], self.upper_[ns:],
                              candidate, dict(metadata or {}))


def estimate(ds, solver: str = "highs", tol: float = 1e-8) -> JacobianBounds:
    """Fit bounds on a derivative dataset (state block first, then inputs)."""
    if len(ds) < 2:
        raise ValueError("need at least two samples to fit bounds")
    est = JacobianBoundEstimator(n_state=ds.x.shape[1], solver=solver, tol=tol).fit(ds.features, ds.hdot)
    meta = {
        "num_samples": len(ds),
        "k": ds.provenance.get("k"),
        "dataset_hash": ds.provenance.get("config_hash"),
        "seed": ds.provenance.get("seed"),
        "solver": solver,
        "tol": tol,
        "status": est.status_,
        "max_pair_violation": est.max_violation_,
    }
    return est.to_bounds(ds.candidate.name, meta)


def scale(b: JacobianBounds, factor: float) -> JacobianBounds:
    """Multiply every bound component by a positive factor."""
    if not factor > 0:
        raise ValueError("scale factor must be positive")
    meta = dict(b.metadata)
    meta["scale"] = meta.get("scale", 1.0) * factor
    return JacobianBounds(b.lower_x * factor, b.upper_x * factor, b.lower_u * factor, b.upper_u * factor,
                          b.candidate, meta)


def true_gradient(c, model, x, u, step: float = 1e-6, eps: float = 0.1) -> np.ndarray:
    """Central finite-difference gradient of the true ``hdot`` over the block features."""
    n, m = model.n, model.m
    cols = [(0, a * n + d) for a in c.I_hdot for d in range(n)]
    cols += [(1, a * m + d) for a in c.I_h for d in range(m)]
    g = np.empty(len(cols))
    for q, (which, idx) in enumerate(cols):
        xp, xm = np.array(x, float), np.array(x, float)
        up, um = np.array(u, float), np.array(u, float)
        if which == 0:
            xp[idx] += step
            xm[idx] -= step
        else:
            up[idx] += step
            um[idx] -= step
        g[q] = (analytic_hdot(c, model, xp, up, eps) - analytic_hdot(c, model, xm, um, eps)) / (2 * step)
    return g


def validate_against_truth(b: JacobianBounds, c, model, probes: int = 1000, seed: int = 0,
                           box=None, eps: float = 0.1) -> dict:
    """Fraction of true-gradient components that fall inside the bounds."""
    rng = np.random.default_rng(seed)
    xlo, xhi = model.state_box if box is None else box
    ulo, uhi = model.input_box if box is None else box
    lo, hi = b.lower, b.upper
    inside = total = 0
    worst = 0.0
    done = 0
    while done < probes:
        x = rng.uniform(xlo, xhi, model.state_dim)
        u = model.mask_inputs(rng.uniform(ulo, uhi, model.input_dim))
        try:
            g = true_gradient(c, model, x, u, eps=eps)
        except ValueError:
            continue
        ok = (g >= lo - 1e-6) & (g <= hi + 1e-6)
        inside += int(ok.sum())
        total += g.size
        worst = max(worst, float(np.max(np.maximum(lo - g, g - hi))))
        done += 1
    return {"coverage": inside / total if total else 1.0, "probes": probes, "max_excess": max(worst, 0.0)}
