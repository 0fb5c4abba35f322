"""Communication graph with leader/follower roles."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, NamedTuple


class GraphError(ValueError):
    """Raised for malformed graphs or invalid vertex queries."""


class AssumptionError(GraphError):
    """A follower-follower edge has no pair of distinct adjacent leaders."""


Edge = tuple[int, int]


def canonical_edge(i: int, j: int) -> Edge:
    return (i, j) if i < j else (j, i)


class EdgePartition(NamedTuple):
    ll: frozenset
    lf: frozenset
    ff: frozenset


class FfLeaderAssignment(NamedTuple):
    edge: Edge
    leader_k: int
    leader_j: int


@dataclass(frozen=True)
class CommGraph:
    """Undirected simple graph on ``0..num_agents-1`` with a leader subset.

    Edges are stored as sorted ``(min, max)`` tuples.
    """

    num_agents: int
    leaders: frozenset
    edges: tuple = field(default=())

    def __post_init__(self):
        if self.num_agents < 1:
            raise GraphError("graph needs at least one vertex")
        leaders = frozenset(int(v) for v in self.leaders)
        for v in leaders:
            if not 0 <= v < self.num_agents:
                raise GraphError(f"leader id {v} out of range")
        seen = set()
        for e in self.edges:
            i, j = (int(v) for v in e)
            if i == j:
                raise GraphError(f"self-loop on vertex {i}")
            for v in (i, j):
                if not 0 <= v < self.num_agents:
                    raise GraphError(f"edge endpoint {v} out of range")
            seen.add(canonical_edge(i, j))
        object.__setattr__(self, "leaders", leaders)
        object.__setattr__(self, "edges", tuple(sorted(seen)))

    @classmethod
    def from_lists(cls, num_agents: int, leaders: Iterable[int], edges: Iterable[Iterable[int]]):
        return cls(num_agents, frozenset(leaders), tuple(tuple(e) for e in edges))

    @property
    def followers(self) -> frozenset:
        return frozenset(range(self.num_agents)) - self.leaders

    @cached_property
    def _adjacency(self) -> tuple:
        adj = [set() for _ in range(self.num_agents)]
        for i, j in self.edges:
            adj[i].add(j)
            adj[j].add(i)
        return tuple(frozenset(a) for a in adj)

    def _check(self, i: int) -> int:
        if not 0 <= i < self.num_agents:
            raise GraphError(f"vertex id {i} out of range for M={self.num_agents}")
        return i

    def is_leader(self, i: int) -> bool:
        return self._check(i) in self.leaders

    def neighbors(self, i: int) -> frozenset:
        return self._adjacency[self._check(i)]

    def classify_edges(self) -> EdgePartition:
        ll, lf, ff = set(), set(), set()
        for e in self.edges:
            n_lead = sum(v in self.leaders for v in e)
            (ff, lf, ll)[n_lead].add(e)
        return EdgePartition(frozenset(ll), frozenset(lf), frozenset(ff))

    def edge_class(self, edge: Edge) -> str:
        e = canonical_edge(*edge)
        if e not in self.edges:
            raise GraphError(f"{e} is not an edge")
        return ("ff", "lf", "ll")[sum(v in self.leaders for v in e)]

    def shared_and_exclusive(self, k: int, j: int):
        """Return ``(N_k & N_j, N_k - shared - {j}, N_j - shared - {k})``."""
        if k == j:
            raise GraphError("shared_and_exclusive needs two distinct vertices")
        nk, nj = self.neighbors(k), self.neighbors(j)
        shared = nk & nj
        return shared, nk - shared - {j}, nj - shared - {k}

    def two_hop_info(self, j: int) -> frozenset:
        """Local information set of leader ``j``: itself, neighbors, and their neighbors."""
        if not self.is_leader(j):
            raise GraphError(f"vertex {j} is not a leader")
        out = {j} | self.neighbors(j)
        for k in self.neighbors(j):
            out |= self.neighbors(k)
        return frozenset(out)

    def assign_ff_leaders(self, edge: Edge) -> FfLeaderAssignment:
        """Pick the lowest-indexed eligible leader next to each follower.

        Raises :class:`AssumptionError` when no distinct pair exists.
        """
        k, j = canonical_edge(*edge)
        if self.edge_class((k, j)) != "ff":
            raise GraphError(f"{(k, j)} is not a follower-follower edge")
        nk, nj = self.neighbors(k), self.neighbors(j)
        cand_k = sorted((nk & self.leaders) - nj)
        cand_j = sorted((nj & self.leaders) - nk)
        for lk in cand_k:
            for lj in cand_j:
                if lk != lj:
                    return FfLeaderAssignment((k, j), lk, lj)
        raise AssumptionError(
            f"follower edge {(k, j)} lacks distinct exclusive leaders "
            f"(candidates {cand_k} / {cand_j})"
        )

    def validate_ff_assumption(self) -> dict:
        """Assign leaders for every follower edge, failing on the first violation."""
        return {e: self.assign_ff_leaders(e) for e in sorted(self.classify_edges().ff)}
