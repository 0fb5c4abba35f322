"""Connectivity barrier candidates for every edge class.

Pair candidates (leader-follower and leader-leader edges) use
``d_max**2 - |x_k - x_j|**2``. Follower-follower edges get two candidates
built on the split of the follower offset into components parallel and
orthogonal to the line through their assigned leaders.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import CommGraph, FfLeaderAssignment, canonical_edge

VARIANTS = ("pair", "parallel", "orthogonal")
DEFAULT_EPS = 0.1


class DegenerateDirectionError(ValueError):
    """Leader separation too small to define the projection direction."""


@dataclass(frozen=True)
class KInfFunction:
    """Linear extended class-K-infinity function ``alpha(h) = gamma * h``."""

    gamma: float = 1.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    def __call__(self, h):
        return self.gamma * np.asarray(h, dtype=float) if np.ndim(h) else self.gamma * float(h)


def alpha(f: KInfFunction, h):
    return f(h)


@dataclass(frozen=True)
class BarrierCandidate:
    edge: tuple
    variant: str
    d_max: float
    edge_class: str
    I_h: tuple
    I_hdot: tuple
    ff_leaders: FfLeaderAssignment | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not self.d_max > 0:
            raise ValueError("d_max must be positive")
        if (self.variant == "pair") != (self.ff_leaders is None):
            raise ValueError("ff leader assignment required exactly for parallel/orthogonal")

    @property
    def name(self) -> str:
        k, j = self.edge
        return f"e{k}-{j}_{self.variant}"

    @property
    def k(self) -> int:
        return self.edge[0]

    @property
    def j(self) -> int:
        return self.edge[1]

    def leaders(self, graph: CommGraph) -> tuple:
        return tuple(i for i in self.I_h if i in graph.leaders)

    def positions(self, x, n: int, agent: int) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x[..., agent * n:(agent + 1) * n]

    def value(self, x, n: int, eps: float = DEFAULT_EPS):
        """Evaluate on a (possibly batched) full stacked state."""
        xk = self.positions(x, n, self.k)
        xj = self.positions(x, n, self.j)
        if self.variant == "pair":
            return eval_pair(self, xk, xj)
        a = self.ff_leaders
        return eval_ff(self, xk, xj, self.positions(x, n, a.leader_k), self.positions(x, n, a.leader_j), eps)

    def gradient(self, x, n: int, eps: float = DEFAULT_EPS) -> np.ndarray:
        """Analytic gradient of the candidate w.r.t. the full stacked state."""
        x = np.asarray(x, dtype=float)
        grad = np.zeros_like(x)
        xk = self.positions(x, n, self.k)
        xj = self.positions(x, n, self.j)
        xbar = xk - xj

        def put(agent, g):
            grad[..., agent * n:(agent + 1) * n] += g

        if self.variant == "pair":
            put(self.k, -2 * xbar)
            put(self.j, 2 * xbar)
            return grad
        a = self.ff_leaders
        w = self.positions(x, n, a.leader_k) - self.positions(x, n, a.leader_j)
        wn = np.linalg.norm(w, axis=-1, keepdims=True)
        if np.any(wn <= eps):
            raise DegenerateDirectionError("leader separation below eps")
        e = w / wn
        s = np.sum(xbar * e, axis=-1, keepdims=True)
        # d(s)/dw = (I - e e^T) xbar / |w|
        ds_dw = (xbar - s * e) / wn
        # parallel: h = c - s^2 ; orthogonal: h = c - |xbar|^2 + s^2
        sign = -1.0 if self.variant == "parallel" else 1.0
        g_follow = sign * 2 * s * e
        if self.variant == "orthogonal":
            g_follow = g_follow - 2 * xbar
        put(self.k, g_follow)
        put(self.j, -g_follow)
        put(a.leader_k, sign * 2 * s * ds_dw)
        put(a.leader_j, -sign * 2 * s * ds_dw)
        return grad


def eval_pair(c: BarrierCandidate, x_k, x_j):
    if c.variant != "pair":
        raise ValueError("eval_pair needs a pair candidate")
    d = np.asarray(x_k, dtype=float) - np.asarray(x_j, dtype=float)
    return c.d_max ** 2 - np.sum(d * d, axis=-1)


def decompose(x_k, x_j, x_lk, x_lj, eps: float = DEFAULT_EPS):
    """Split ``x_k - x_j`` into parts parallel and orthogonal to ``x_lk - x_lj``."""
    xbar = np.asarray(x_k, dtype=float) - np.asarray(x_j, dtype=float)
    w = np.asarray(x_lk, dtype=float) - np.asarray(x_lj, dtype=float)
    wn = np.linalg.norm(w, axis=-1, keepdims=True)
    if np.any(wn <= eps):
        raise DegenerateDirectionError(f"leader separation {np.min(wn):.3g} <= eps={eps}")
    e = w / wn
    par = np.sum(xbar * e, axis=-1, keepdims=True) * e
    return par, xbar - par


def eval_ff(c: BarrierCandidate, x_k, x_j, x_lk, x_lj, eps: float = DEFAULT_EPS):
    if c.variant == "pair":
        raise ValueError("eval_ff needs a parallel or orthogonal candidate")
    par, perp = decompose(x_k, x_j, x_lk, x_lj, eps)
    part = par if c.variant == "parallel" else perp
    return c.d_max ** 2 / 2 - np.sum(part * part, axis=-1)


def analytic_hdot(c: BarrierCandidate, model, x, u, eps: float = DEFAULT_EPS):
    """Exact chain-rule derivative of the candidate under the model (oracle)."""
    return np.sum(c.gradient(x, model.n, eps) * model.vector_field(x, model.mask_inputs(u)), axis=-1)


def hdot_index_set(graph: CommGraph, members) -> tuple:
    out = set(members)
    for v in members:
        out |= graph.neighbors(v)
    return tuple(sorted(out))


def build_candidates(graph: CommGraph, d_max: float) -> list:
    """All candidates for the graph, in canonical edge order."""
    part = graph.classify_edges()
    out = []
    for e in graph.edges:
        if e in part.ff:
            a = graph.assign_ff_leaders(e)
            members = tuple(sorted({e[0], e[1], a.leader_k, a.leader_j}))
            Idot = hdot_index_set(graph, members)
            for v in ("parallel", "orthogonal"):
                out.append(BarrierCandidate(e, v, d_max, "ff", members, Idot, a))
        else:
            cls = "ll" if e in part.ll else "lf"
            out.append(BarrierCandidate(e, "pair", d_max, cls, tuple(e), hdot_index_set(graph, e)))
    return out


def candidate_by_name(candidates, name: str) -> BarrierCandidate:
    for c in candidates:
        if c.name == name:
            return c
    raise KeyError(name)


__all__ = [
    "BarrierCandidate",
    "DegenerateDirectionError",
    "KInfFunction",
    "alpha",
    "analytic_hdot",
    "build_candidates",
    "canonical_edge",
    "decompose",
    "eval_ff",
    "eval_pair",
]
