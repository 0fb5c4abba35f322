"""Derivative datasets: generation, central differences, filtering, k-means reduction."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_array, check_is_fitted

from .barriers import BarrierCandidate, KInfFunction


class DataSample(NamedTuple):
    hdot: float
    x_block: np.ndarray
    u_block: np.ndarray


def _as_rows(a, N: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 2 and a.shape[0] == N:
        return a
    return a.reshape(N, -1) if N else a.reshape(0, 0)


@dataclass
class DerivativeDataset:
    """Samples ``(hdot_i, x_i over I_hdot, u_i over I_h)`` for one candidate.

    ``h`` holds the candidate value at each sample's state; it is kept so
    the feasibility filter can run without re-evaluating the barrier.
    """

    candidate: BarrierCandidate
    hdot: np.ndarray
    x: np.ndarray
    u: np.ndarray
    h: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.hdot = np.asarray(self.hdot, dtype=float).reshape(-1)
        N = len(self.hdot)
        self.x = _as_rows(self.x, N)
        self.u = _as_rows(self.u, N)
        if self.h is not None:
            self.h = np.asarray(self.h, dtype=float).reshape(-1)
            if len(self.h) != N:
                raise ValueError("h misaligned with samples")

    def __len__(self) -> int:
        return len(self.hdot)

    def __getitem__(self, i) -> DataSample:
        return DataSample(float(self.hdot[i]), self.x[i], self.u[i])

    @property
    def features(self) -> np.ndarray:
        return np.hstack([self.x, self.u])

    def subset(self, idx) -> "DerivativeDataset":
        idx = np.asarray(idx, dtype=int)
        return replace(
            self,
            hdot=self.hdot[idx],
            x=self.x[idx],
            u=self.u[idx],
            h=None if self.h is None else self.h[idx],
            provenance=dict(self.provenance),
        )

    def column_names(self, n: int, m: int) -> list:
        c = self.candidate
        names = ["hdot"]
        names += [f"x_{a}_{d}" for a in c.I_hdot for d in range(n)]
        names += [f"u_{a}_{d}" for a in c.I_h for d in range(m)]
        return names

    def to_csv(self, path, n: int, m: int) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.column_names(n, m))
            for i in range(len(self)):
                row = [self.hdot[i], *self.x[i], *self.u[i]]
                w.writerow([repr(float(v)) for v in row])

    def write(self, csv_path, manifest_path, n: int, m: int) -> None:
        self.to_csv(csv_path, n, m)
        c = self.candidate
        manifest = {
            "candidate": c.name,
            "edge": list(c.edge),
            "variant": c.variant,
            "I_h": list(c.I_h),
            "I_hdot": list(c.I_hdot),
            "n": n,
            "m": m,
            "num_samples": len(self),
            "h": None if self.h is None else [float(v) for v in self.h],
            **self.provenance,
        }
        with open(manifest_path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def read(cls, candidate: BarrierCandidate, csv_path, manifest_path=None) -> "DerivativeDataset":
        with open(csv_path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        body = np.array(rows[1:], dtype=float).reshape(-1, len(header))
        nx = sum(h.startswith("x_") for h in header)
        prov, h = {}, None
        if manifest_path is not None:
            with open(manifest_path) as fh:
                man = json.load(fh)
            if man["candidate"] != candidate.name:
                raise ValueError(f"manifest is for {man['candidate']}, expected {candidate.name}")
            h = man.pop("h", None)
            prov = {k: man[k] for k in ("seed", "config_hash", "stage", "k") if k in man}
        return cls(candidate, body[:, 0], body[:, 1:1 + nx], body[:, 1 + nx:], h, prov)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def rollout_rng(seed: int, index: int) -> np.random.Generator:
    """PCG64 stream keyed on ``(seed, rollout index)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(index)])))


def central_diff(h_prev, h_next, dt: float):
    if dt <= 0:
        raise ValueError("dt must be positive")
    return (np.asarray(h_next) - np.asarray(h_prev)) / (2.0 * dt)


def _blocks(x, agents, width):
    return np.concatenate([x[..., a * width:(a + 1) * width] for a in agents], axis=-1)


def generate(
    model,
    candidates,
    n_sims: int,
    horizon: float,
    dt: float,
    box=(-5.0, 5.0),
    seed: int = 0,
    eps: float = 0.1,
    integrator: str = "rk4",
) -> dict:
    """Roll out randomized open-loop simulations and extract derivative samples.

    Each rollout draws every agent state and every leader input i.i.d.
    uniform from ``box``; inputs stay constant over the rollout. Interior
    time points give one sample per candidate via central differences.
    Returns ``{candidate name: DerivativeDataset}``.
    """
    if n_sims < 1:
        raise ValueError("n_sims must be >= 1")
    n_steps = int(np.floor(horizon / dt + 1e-9))
    if n_steps < 2:
        raise ValueError("horizon too short for central differences (need >= 2 steps)")
    lo, hi = box
    graph = model.graph
    leaders = sorted(graph.leaders)
    X0 = np.empty((n_sims, model.state_dim))
    U = np.zeros((n_sims, model.input_dim))
    for s in range(n_sims):
        rng = rollout_rng(seed, s)
        X0[s] = rng.uniform(lo, hi, model.state_dim)
        draw = rng.uniform(lo, hi, model.m * len(leaders))
        for q, ld in enumerate(leaders):
            U[s, ld * model.m:(ld + 1) * model.m] = draw[q * model.m:(q + 1) * model.m]
    traj = np.empty((n_steps + 1, n_sims, model.state_dim))
    traj[0] = X0
    for t in range(n_steps):
        traj[t + 1] = model.step(traj[t], U, dt, method=integrator)

    prov = {
        "seed": int(seed),
        "config_hash": config_hash(
            {"n_sims": n_sims, "horizon": horizon, "dt": dt, "box": list(box), "seed": seed,
             "integrator": integrator, "eps": eps}
        ),
        "stage": "raw",
    }
    out = {}
    for c in candidates:
        hvals = np.full((n_steps + 1, n_sims), np.nan)
        for t in range(n_steps + 1):
            if c.variant == "pair":
                hvals[t] = c.value(traj[t], model.n)
            else:
                a = c.ff_leaders
                w = traj[t][:, a.leader_k * model.n:(a.leader_k + 1) * model.n] - \
                    traj[t][:, a.leader_j * model.n:(a.leader_j + 1) * model.n]
                ok = np.linalg.norm(w, axis=-1) > eps
                if np.any(ok):
                    hvals[t, ok] = c.value(traj[t][ok], model.n, eps)
        hd = central_diff(hvals[:-2], hvals[2:], dt)  # (n_steps-1, n_sims)
        mid = traj[1:-1]
        keep = np.isfinite(hd) & np.isfinite(hvals[1:-1])
        # rollout-major ordering: all interior samples of sim 0, then sim 1, ...
        ss, ts = np.nonzero(keep.T)
        xs = _blocks(mid[ts, ss], c.I_hdot, model.n)
        us = _blocks(U[ss], c.I_h, model.m)
        out[c.name] = DerivativeDataset(c, hd[ts, ss], xs, us, hvals[1:-1][ts, ss], dict(prov))
    return out


def filter_feasible(ds: DerivativeDataset, alpha: KInfFunction, h_values=None) -> DerivativeDataset:
    """Keep samples with ``hdot + alpha(h) >= 0``."""
    h = ds.h if h_values is None else np.asarray(h_values, dtype=float).reshape(-1)
    if h is None or len(h) != len(ds):
        raise ValueError("h values misaligned with samples")
    keep = np.nonzero(ds.hdot + alpha(h) >= 0)[0]
    out = ds.subset(keep)
    if h_values is not None:
        out.h = h[keep]
    out.provenance["stage"] = "filtered"
    return out


def _sq_dists(X, C, chunk: int = 4096) -> np.ndarray:
    out = np.empty((X.shape[0], C.shape[0]))
    for s in range(0, X.shape[0], chunk):
        d = X[s:s + chunk, None, :] - C[None, :, :]
        out[s:s + chunk] = np.einsum("ikd,ikd->ik", d, d)
    return out


def kmeans_plusplus(X, k: int, rng: np.random.Generator) -> np.ndarray:
    """D^2-weighted seeding; returns indices of the chosen rows."""
    N = X.shape[0]
    idx = [int(rng.integers(N))]
    d2 = _sq_dists(X, X[idx]).ravel()
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(N, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(N), idx)
            nxt = int(rest[rng.integers(len(rest))])
        idx.append(nxt)
        d2 = np.minimum(d2, _sq_dists(X, X[[nxt]]).ravel())
    return np.asarray(idx)


def lloyd(X, centers, max_iter: int = 300):
    """Plain Lloyd iterations from given centers; empty clusters keep their center."""
    centers = np.array(centers, dtype=float, copy=True)
    labels = None
    for it in range(max_iter):
        new = np.argmin(_sq_dists(X, centers), axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(len(centers)):
            members = labels == c
            if members.any():
                centers[c] = X[members].mean(axis=0)
    return centers, labels, it + 1


class KMeansReducer(ClusterMixin, BaseEstimator):
    """k-means (k-means++ seeding, Lloyd updates) that keeps real samples.

    After fitting, ``representatives_`` holds, for every non-empty cluster,
    the index of the training row closest to the final centroid.

    Parameters
    ----------
    n_clusters : int
        Number of clusters ``k``.
    random_state : int
        Seed for the k-means++ draw.
    max_iter : int
        Lloyd iteration cap.
    """

    def __init__(self, n_clusters: int = 100, random_state: int = 0, max_iter: int = 300):
        self.n_clusters = n_clusters
        self.random_state = random_state
        self.max_iter = max_iter

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        if self.n_clusters > X.shape[0]:
            raise ValueError(f"n_clusters={self.n_clusters} exceeds {X.shape[0]} samples")
        rng = np.random.default_rng(self.random_state)
        self.init_indices_ = kmeans_plusplus(X, self.n_clusters, rng)
        centers, labels, n_iter = lloyd(X, X[self.init_indices_], self.max_iter)
        self.cluster_centers_ = centers
        self.labels_ = labels
        self.n_iter_ = n_iter
        reps = []
        for c in range(self.n_clusters):
            members = np.nonzero(labels == c)[0]
            if len(members):
                d = _sq_dists(X[members], centers[[c]]).ravel()
                reps.append(int(members[np.argmin(d)]))
        self.representatives_ = np.asarray(sorted(reps), dtype=int)
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=float)
        return np.argmin(_sq_dists(X, self.cluster_centers_), axis=1)


def kmeans_reduce(ds: DerivativeDataset, k: int, seed: int = 0, normalize: bool = False) -> DerivativeDataset:
    """Keep the sample nearest each k-means centroid; ``normalize`` standardizes features first."""
    if k > len(ds):
        raise ValueError(f"k={k} exceeds dataset size {len(ds)}")
    if k == len(ds):
        out = ds.subset(np.arange(len(ds)))
    else:
        feats = StandardScaler().fit_transform(ds.features) if normalize else ds.features
        red = KMeansReducer(n_clusters=k, random_state=seed).fit(feats)
        out = ds.subset(red.representatives_)
    out.provenance["stage"] = "reduced"
    out.provenance["k"] = int(k)
    return out


def prepare_datasets(model, candidates, alpha: KInfFunction, n_sims, horizon, dt,
                     box=(-5.0, 5.0), k: int = 100, seed: int = 0, eps: float = 0.1,
                     integrator: str = "rk4", normalize: bool = False, log=None) -> tuple:
    """generate -> filter_feasible -> kmeans_reduce for every candidate.

    Returns ``(filtered, reduced)`` dicts keyed by candidate name. The
    filtered set anchors the online index selection; the reduced set only
    feeds the pairwise bound fit, whose size grows quadratically.
    """
    raw = generate(model, candidates, n_sims, horizon, dt, box, seed, eps, integrator)
    filtered, reduced = {}, {}
    for name, ds in raw.items():
        filt = filter_feasible(ds, alpha)
        if len(filt) < 2:
            raise ValueError(f"fewer than two feasible samples for {name}")
        red = kmeans_reduce(filt, min(k, len(filt)), seed, normalize)
        if log is not None:
            log(f"{name}: raw={len(ds)} filtered={len(filt)} reduced={len(red)}")
        filtered[name] = filt
        reduced[name] = red
    return filtered, reduced
