"""Ground-truth agent dynamics and fixed-step integration.

The certification pipeline treats these models as unknown; they are only
used to generate data, to close the loop in simulation, and by test oracles.
"""
from __future__ import annotations

import abc
import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .graph import CommGraph, GraphError, canonical_edge

DEFAULT_BOX = (-10.0, 10.0)


class SystemModel(abc.ABC):
    """Leader-follower dynamics ``xdot_j = f_j(x_j, x_N_j) + g_j(x_j) u_j``.

    Followers have no input channel. States are stacked agent-major, so agent
    ``i`` occupies ``x[i*n:(i+1)*n]``.
    """

    graph: CommGraph
    n: int
    m: int
    state_box: tuple = DEFAULT_BOX
    input_box: tuple = DEFAULT_BOX

    @abc.abstractmethod
    def drift(self, x, j: int) -> np.ndarray:
        """Drift of agent ``j`` (excluding the input term)."""

    @abc.abstractmethod
    def input_map(self, x, j: int) -> np.ndarray:
        """``g_j(x_j)`` as an ``(n, m)`` matrix; zero for followers."""

    def vector_field(self, x, u) -> np.ndarray:
        """Stacked ``xdot`` for (possibly batched) stacked ``x`` and ``u``."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        out = np.empty_like(x)
        n, m = self.n, self.m
        for j in range(self.graph.num_agents):
            xd = self.drift(x, j)
            g = self.input_map(x, j)
            out[..., j * n:(j + 1) * n] = xd + u[..., j * m:(j + 1) * m] @ g.T
        return out

    @property
    def state_dim(self) -> int:
        return self.n * self.graph.num_agents

    @property
    def input_dim(self) -> int:
        return self.m * self.graph.num_agents

    def mask_inputs(self, u) -> np.ndarray:
        """Zero the input entries of followers."""
        u = np.array(u, dtype=float, copy=True)
        for f in self.graph.followers:
            u[..., f * self.m:(f + 1) * self.m] = 0.0
        return u

    def step(self, x, u, dt: float, method: str = "euler") -> np.ndarray:
        """Advance one step of length ``dt`` with the input held constant."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        u = self.mask_inputs(u)
        x = np.asarray(x, dtype=float)
        if method == "euler":
            return x + dt * self.vector_field(x, u)
        if method == "rk4":
            k1 = self.vector_field(x, u)
            k2 = self.vector_field(x + 0.5 * dt * k1, u)
            k3 = self.vector_field(x + 0.5 * dt * k2, u)
            k4 = self.vector_field(x + dt * k3, u)
            return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        raise ValueError(f"unknown integrator {method!r}")

    def in_state_box(self, x) -> np.ndarray:
        lo, hi = self.state_box
        x = np.asarray(x)
        return np.all((x >= lo) & (x <= hi), axis=-1)


@dataclass(eq=False)
class ConsensusModel(SystemModel):
    """Displacement-based consensus: ``xdot_j = -sum_i (x_j - x_i - d_ji) + u_j``.

    ``desired_disp`` maps a canonical edge ``(i, j)`` with ``i < j`` to
    ``d_ij``; the reverse direction uses ``d_ji = -d_ij``.
    """

    graph: CommGraph
    desired_disp: dict
    n: int = 1
    state_box: tuple = DEFAULT_BOX
    input_box: tuple = DEFAULT_BOX
    _offset: np.ndarray = field(init=False, repr=False)
    _laplacian: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.m = self.n
        disp = {}
        for e, d in self.desired_disp.items():
            i, j = e
            ce = canonical_edge(i, j)
            if ce not in self.graph.edges:
                raise GraphError(f"desired displacement given for non-edge {e}")
            d = np.broadcast_to(np.asarray(d, dtype=float), (self.n,)).copy()
            disp[ce] = d if (i, j) == ce else -d
        for e in self.graph.edges:
            disp.setdefault(e, np.zeros(self.n))
        self.desired_disp = disp
        M = self.graph.num_agents
        lap = np.zeros((M, M))
        off = np.zeros((M, self.n))
        for (i, j), d in disp.items():
            lap[i, i] += 1
            lap[j, j] += 1
            lap[i, j] -= 1
            lap[j, i] -= 1
            off[i] += d  # d_ij pulls x_i - x_j toward d_ij
            off[j] -= d
        self._laplacian = lap
        self._offset = off

    def disp(self, j: int, i: int) -> np.ndarray:
        """``d_ji``: desired value of ``x_j - x_i``."""
        d = self.desired_disp[canonical_edge(i, j)]
        return d if j < i else -d

    def drift(self, x, j: int) -> np.ndarray:
        self.graph._check(j)
        x = np.asarray(x, dtype=float)
        n = self.n
        xj = x[..., j * n:(j + 1) * n]
        out = np.zeros_like(xj)
        for i in self.graph.neighbors(j):
            out -= xj - x[..., i * n:(i + 1) * n] - self.disp(j, i)
        return out

    def input_map(self, x, j: int) -> np.ndarray:
        if self.graph.is_leader(j):
            return np.eye(self.n)
        return np.zeros((self.n, self.m))

    def vector_field(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        M, n = self.graph.num_agents, self.n
        pos = x.reshape(x.shape[:-1] + (M, n))
        xdot = -np.einsum("ij,...jk->...ik", self._laplacian, pos) + self._offset
        return xdot.reshape(x.shape) + self.mask_inputs(u)

    def system_matrices(self):
        """``(A, B, c)`` with ``xdot = A x + B u + c`` (test oracle helper)."""
        n = self.n
        A = -np.kron(self._laplacian, np.eye(n))
        B = np.zeros((self.state_dim, self.input_dim))
        for ld in self.graph.leaders:
            B[ld * n:(ld + 1) * n, ld * n:(ld + 1) * n] = np.eye(n)
        return A, B, self._offset.reshape(-1)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    left_box: bool = False

    def __post_init__(self):
        if not (len(self.times) == len(self.states) == len(self.inputs)):
            raise ValueError("times, states and inputs must have equal length")

    def to_csv(self, path, n_state: int | None = None) -> None:
        ns = self.states.shape[1]
        nu = self.inputs.shape[1]
        header = ["time"] + [f"x_{i}" for i in range(ns)] + [f"u_{i}" for i in range(nu)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t, xs, us in zip(self.times, self.states, self.inputs):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in xs] + [repr(float(v)) for v in us])

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float)
        ns = sum(h.startswith("x_") for h in header)
        return cls(body[:, 0], body[:, 1:1 + ns], body[:, 1 + ns:])


def rollout(
    model: SystemModel,
    x0,
    input_policy: Callable[[float, np.ndarray], np.ndarray],
    horizon: float,
    dt: float,
    method: str = "euler",
) -> Trajectory:
    """Integrate ``floor(horizon/dt)`` steps; the input is sampled at each step start."""
    if dt <= 0 or horizon <= 0:
        raise ValueError("dt and horizon must be positive")
    if horizon < dt * (1 - 1e-9):
        raise ValueError("horizon shorter than one step")
    n_steps = int(np.floor(horizon / dt + 1e-9))
    times = dt * np.arange(n_steps + 1)
    states = np.empty((n_steps + 1, model.state_dim))
    inputs = np.zeros((n_steps + 1, model.input_dim))
    states[0] = x0
    for t in range(n_steps):
        u = model.mask_inputs(input_policy(times[t], states[t]))
        inputs[t] = u
        states[t + 1] = model.step(states[t], u, dt, method=method)
    inputs[-1] = inputs[-2] if n_steps else inputs[-1]
    return Trajectory(times, states, inputs, left_box=not bool(np.all(model.in_state_box(states))))
