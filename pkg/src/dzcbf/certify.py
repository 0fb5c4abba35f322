"""Data-index selection and per-leader decoupled safety constraints.

For a candidate with dataset sample ``i`` and Jacobian bounds ``[lo, hi]``
the mean value theorem gives the lower bound::

    hdot(x, u) >= hdot_i + lo_x.dx+ - hi_x.dx- + lo_u.du+ - hi_u.du-

with ``dx = x - x_i`` and ``du = u - u_i``. Each leader in the candidate
enforces its own share of this bound, so that the shares sum to the full
expression and the right-hand sides sum to ``-alpha(h)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .barriers import BarrierCandidate, DegenerateDirectionError, KInfFunction
from .graph import CommGraph


class SelectionError(ValueError):
    """No dataset sample is admissible at the current state."""


class IndexSelection(NamedTuple):
    candidate: str
    index: int
    score: float


class BetaSplit(NamedTuple):
    beta_k: float = 0.5
    beta_j: float = 0.5

    def check(self) -> "BetaSplit":
        if self.beta_k < 0 or self.beta_j < 0 or abs(self.beta_k + self.beta_j - 1.0) > 1e-12:
            raise ValueError(f"invalid beta split {tuple(self)}")
        return self


@dataclass(frozen=True)
class LocalConstraint:
    """``const_term + sum_c min(lo_c*(u_c - a_c), hi_c*(u_c - a_c)) >= rhs``."""

    leader: int
    const_term: float
    input_anchor: np.ndarray
    slope_lo: np.ndarray
    slope_hi: np.ndarray
    rhs: float
    candidate: str = ""

    def __post_init__(self):
        if np.any(np.asarray(self.slope_lo) > np.asarray(self.slope_hi)):
            raise ValueError("slope_lo exceeds slope_hi")

    def lhs(self, u) -> float:
        d = np.asarray(u, dtype=float) - self.input_anchor
        return float(self.const_term + np.sum(np.minimum(self.slope_lo * d, self.slope_hi * d)))

    def satisfied(self, u, tol: float = 0.0) -> bool:
        return self.lhs(u) >= self.rhs - tol


def interval_product(lo, hi, d):
    """Lower bound of ``J . d`` over ``lo <= J <= hi`` (termwise)."""
    d = np.asarray(d, dtype=float)
    return lo * np.maximum(d, 0) - hi * np.maximum(-d, 0)


def state_block(c: BarrierCandidate, x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.concatenate([x[..., a * n:(a + 1) * n] for a in c.I_hdot], axis=-1)


def input_block(c: BarrierCandidate, u, m: int) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    return np.concatenate([u[..., a * m:(a + 1) * m] for a in c.I_h], axis=-1)


def state_scores(ds, b, x_block) -> np.ndarray:
    dx = np.asarray(x_block, dtype=float)[None, :] - ds.x
    return ds.hdot + interval_product(b.lower_x, b.upper_x, dx).sum(axis=1)


def select_index_pair(ds, b, x, n: int) -> IndexSelection:
    """Sample maximizing the state-only part of the lower bound (lowest id on ties)."""
    if len(ds) == 0:
        raise SelectionError(f"empty dataset for {ds.candidate.name}")
    scores = state_scores(ds, b, state_block(ds.candidate, x, n))
    i = int(np.argmax(scores))
    return IndexSelection(ds.candidate.name, i, float(scores[i]))


def segment_min_norm(a, b) -> float:
    """``min over lam in [0,1]`` of ``|(1-lam) a + lam b|``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    d = b - a
    dd = float(d @ d)
    vals = [float(a @ a), float(b @ b)]
    if dd > 0:
        lam = -float(a @ d) / dd
        if 0.0 < lam < 1.0:
            p = a + lam * d
            vals.append(float(p @ p))
    return float(np.sqrt(min(vals)))


def select_index_ff(ds, b, x, n: int, assignment, eps: float = 0.1) -> IndexSelection:
    """Like :func:`select_index_pair`, restricted to samples whose leader
    direction stays at least ``eps`` long along the segment to the current one."""
    c = ds.candidate
    x = np.asarray(x, dtype=float)
    lk, lj = assignment.leader_k, assignment.leader_j
    cur = x[lk * n:(lk + 1) * n] - x[lj * n:(lj + 1) * n]
    if np.linalg.norm(cur) <= eps:
        raise DegenerateDirectionError(f"current leader separation <= eps for {c.name}")
    if len(ds) == 0:
        raise SelectionError(f"empty dataset for {c.name}")
    pk, pj = c.I_hdot.index(lk), c.I_hdot.index(lj)
    data_dir = ds.x[:, pk * n:(pk + 1) * n] - ds.x[:, pj * n:(pj + 1) * n]
    ok = np.array([segment_min_norm(a, cur) >= eps for a in data_dir])
    if not ok.any():
        raise SelectionError(f"no admissible sample for {c.name}")
    scores = state_scores(ds, b, state_block(c, x, n))
    scores = np.where(ok, scores, -np.inf)
    i = int(np.argmax(scores))
    return IndexSelection(c.name, i, float(scores[i]))


def coupled_lower_bound(ds, b, index: int, x_block, u_block) -> float:
    """Full (coupled) mean-value lower bound on ``hdot`` at ``(x, u)``."""
    dx = np.asarray(x_block, dtype=float) - ds.x[index]
    du = np.asarray(u_block, dtype=float) - ds.u[index]
    return float(ds.hdot[index]
                 + interval_product(b.lower_x, b.upper_x, dx).sum()
                 + interval_product(b.lower_u, b.upper_u, du).sum())


def ownership(c: BarrierCandidate, graph: CommGraph) -> tuple:
    """``(owner map agent -> leader, shared agents, (leader_k, leader_j))``.

    Agents owned by a leader contribute unweighted to its constraint; shared
    agents (and the sample's ``hdot``) are split by the beta weights.
    """
    k, j = c.edge
    if c.edge_class == "lf":
        leader = j if j in graph.leaders else k
        return {a: leader for a in c.I_hdot}, (), (leader,)
    if c.edge_class == "ll":
        shared, only_k, only_j = graph.shared_and_exclusive(k, j)
        own = {a: k for a in ({k} | only_k)}
        own.update({a: j for a in ({j} | only_j)})
        return own, tuple(sorted(shared)), (k, j)
    a = c.ff_leaders
    lk, lj = a.leader_k, a.leader_j
    reach_k = graph.neighbors(k) | graph.neighbors(lk)
    reach_j = graph.neighbors(j) | graph.neighbors(lj)
    own = {v: lk for v in ({k, lk} | (reach_k - reach_j))}
    own.update({v: lj for v in ({j, lj} | (reach_j - reach_k))})
    shared = tuple(v for v in c.I_hdot if v not in own)
    return own, shared, (lk, lj)


def assemble(c: BarrierCandidate, graph: CommGraph, ds, b, sel: IndexSelection, alpha: KInfFunction,
             x, n: int, m: int, split: BetaSplit = BetaSplit(), h_value: float | None = None) -> list:
    """Local constraints for every leader of the candidate.

    Follower input terms are dropped: followers have no input, so their
    input difference to any sample is zero.
    """
    if sel.candidate != c.name or not 0 <= sel.index < len(ds):
        raise ValueError(f"invalid selection {sel} for {c.name}")
    split = split.check()
    i = sel.index
    h = float(c.value(x, n)) if h_value is None else float(h_value)
    a_h = float(alpha(h))
    own, shared, leaders = ownership(c, graph)
    dx = state_block(c, x, n) - ds.x[i]
    terms = interval_product(b.lower_x, b.upper_x, dx).reshape(len(c.I_hdot), n).sum(axis=1)
    per_agent = dict(zip(c.I_hdot, terms))
    shared_total = float(ds.hdot[i]) + sum(float(per_agent[v]) for v in shared)
    if len(leaders) == 1:
        weights = {leaders[0]: 1.0}
    else:
        weights = {leaders[0]: split.beta_k, leaders[1]: split.beta_j}
    out = []
    for ld in leaders:
        c0 = weights[ld] * shared_total + sum(float(per_agent[v]) for v, o in own.items() if o == ld)
        p = c.I_h.index(ld)
        sl = slice(p * m, (p + 1) * m)
        out.append(LocalConstraint(
            leader=ld,
            const_term=c0,
            input_anchor=ds.u[i, sl].copy(),
            slope_lo=b.lower_u[sl].copy(),
            slope_hi=b.upper_u[sl].copy(),
            rhs=-weights[ld] * a_h,
            candidate=c.name,
        ))
    return out


def assemble_lf(c, graph, ds, b, sel, alpha, x, n, m):
    if c.edge_class != "lf":
        raise ValueError(f"{c.name} is not a leader-follower candidate")
    return assemble(c, graph, ds, b, sel, alpha, x, n, m)[0]


def assemble_ll(c, graph, ds, b, sel, alpha, split, x, n, m):
    if c.edge_class != "ll":
        raise ValueError(f"{c.name} is not a leader-leader candidate")
    return tuple(assemble(c, graph, ds, b, sel, alpha, x, n, m, split))


def assemble_ff(c, graph, ds, b, sel, alpha, split, x, n, m):
    if c.edge_class != "ff":
        raise ValueError(f"{c.name} is not a follower-follower candidate")
    return tuple(assemble(c, graph, ds, b, sel, alpha, x, n, m, split))


def select_index(c, graph, ds, b, x, n, eps=0.1) -> IndexSelection:
    if c.edge_class == "ff":
        return select_index_ff(ds, b, x, n, c.ff_leaders, eps)
    return select_index_pair(ds, b, x, n)
