"""Closed-loop simulation with per-leader data-driven safety filters."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from . import bounds as bnd
from . import certify, qp
from .barriers import BarrierCandidate, DegenerateDirectionError, KInfFunction, build_candidates
from .data import prepare_datasets
from .dynamics import ConsensusModel, Trajectory
from .graph import CommGraph, GraphError, canonical_edge

log = logging.getLogger(__name__)

WARMUP = 0.1


class SimulationError(RuntimeError):
    pass


@dataclass
class DatasetSpec:
    n_sims: int = 50
    horizon: float = 1.0
    dt: float = 0.01
    box: tuple = (-5.0, 5.0)
    k: int = 100
    seed: int = 0
    integrator: str = "rk4"
    normalize: bool = False


@dataclass
class Scenario:
    graph: CommGraph
    model: ConsensusModel
    targets: dict
    k_p: float
    x0: np.ndarray
    d_max: float = 3.0
    gamma: float = 1.0
    eps: float = 0.1
    rho: float = 100.0
    dt: float = 0.01
    horizon: float = 5.0
    betas: dict = field(default_factory=dict)
    input_box: tuple = (-50.0, 50.0)
    bound_scale: float = 1.0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)

    def __post_init__(self):
        if not self.dt > 0 or not self.horizon > 0:
            raise ValueError("dt and horizon must be positive")
        self.x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if self.x0.size != self.model.state_dim:
            raise ValueError(f"initial state has {self.x0.size} entries, expected {self.model.state_dim}")
        for ld in self.targets:
            if ld not in self.graph.leaders:
                raise GraphError(f"target given for non-leader {ld}")
        for ld in self.graph.leaders:
            if ld not in self.targets:
                raise GraphError(f"leader {ld} has no target")
        betas = {}
        for e, s in self.betas.items():
            ce = canonical_edge(*e)
            if ce not in self.graph.edges:
                raise GraphError(f"beta split given for non-edge {e}")
            betas[ce] = certify.BetaSplit(*s).check()
        self.betas = betas
        self.graph.validate_ff_assumption()

    @property
    def alpha(self) -> KInfFunction:
        return KInfFunction(self.gamma)

    @property
    def n(self) -> int:
        return self.model.n

    def candidates(self) -> list:
        return build_candidates(self.graph, self.d_max)

    def split(self, edge) -> certify.BetaSplit:
        return self.betas.get(canonical_edge(*edge), certify.BetaSplit())


@dataclass
class RunMetrics:
    control_cost: float
    min_h_after_warmup: float | None
    violation_count: int
    violation_flag: bool
    num_steps: int
    slack_steps: int = 0
    fallback_selections: int = 0

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class RunResult:
    trajectory: Trajectory
    metrics: RunMetrics
    h: dict
    u_nominal: np.ndarray
    selections: dict


def nominal_input(scn: Scenario, x, leader: int) -> np.ndarray:
    """Proportional controller toward the leader's target position."""
    if leader not in scn.graph.leaders:
        raise GraphError(f"vertex {leader} is not a leader")
    n = scn.n
    x = np.asarray(x, dtype=float)
    return -scn.k_p * (x[leader * n:(leader + 1) * n] - np.asarray(scn.targets[leader], dtype=float))


def fit_bounds(datasets: dict, scale: float = 1.0, solver: str = "highs") -> dict:
    out = {}
    for name, ds in datasets.items():
        b = bnd.estimate(ds, solver=solver)
        out[name] = bnd.scale(b, scale) if scale != 1.0 else b
    return out


class SafetyFilter(BaseEstimator):
    """Data-driven connectivity filter for all leaders of a graph.

    ``fit(datasets, bounds=None)`` stores per-candidate datasets and fits
    Jacobian bounds when none are supplied. ``filter_input(x, u_nom)``
    returns the filtered stacked input and the per-step diagnostics.

    Parameters
    ----------
    graph : CommGraph
    n, m : int
        State and input dimension per agent.
    d_max, gamma, eps, rho : float
        Communication range, class-K gain, leader-separation floor and slack weight.
    input_box : tuple
        Per-component input bounds.
    betas : dict or None
        Per-edge ``(beta_k, beta_j)``; defaults to an even split.
    bound_scale : float
        Factor applied to fitted bounds.
    """

    def __init__(self, graph=None, n=1, m=1, d_max=3.0, gamma=1.0, eps=0.1, rho=100.0,
                 input_box=(-50.0, 50.0), betas=None, bound_scale=1.0, tol=1e-6):
        self.graph = graph
        self.n = n
        self.m = m
        self.d_max = d_max
        self.gamma = gamma
        self.eps = eps
        self.rho = rho
        self.input_box = input_box
        self.betas = betas
        self.bound_scale = bound_scale
        self.tol = tol

    def fit(self, datasets: dict, bounds: dict | None = None):
        self.candidates_ = build_candidates(self.graph, self.d_max)
        missing = [c.name for c in self.candidates_ if c.name not in datasets]
        if missing:
            raise ValueError(f"missing datasets for {missing}")
        self.datasets_ = {c.name: datasets[c.name] for c in self.candidates_}
        if bounds is None:
            bounds = fit_bounds(self.datasets_, self.bound_scale)
        missing = [c.name for c in self.candidates_ if c.name not in bounds]
        if missing:
            raise ValueError(f"missing bounds for {missing}")
        self.bounds_ = {c.name: bounds[c.name] for c in self.candidates_}
        self.alpha_ = KInfFunction(self.gamma)
        return self

    def _split(self, c):
        betas = self.betas or {}
        s = betas.get(c.edge, betas.get(tuple(c.edge), None))
        return certify.BetaSplit(*s) if s is not None else certify.BetaSplit()

    def constraints(self, x) -> tuple:
        """Local constraints grouped by leader, selections, and fallback count."""
        grouped = {ld: [] for ld in sorted(self.graph.leaders)}
        selections = {}
        fallbacks = 0
        for c in self.candidates_:
            ds, b = self.datasets_[c.name], self.bounds_[c.name]
            try:
                sel = certify.select_index(c, self.graph, ds, b, x, self.n, self.eps)
            except certify.SelectionError:
                if len(ds) == 0:
                    raise
                # no admissible sample: keep the constraint, let the slack absorb it
                sel = certify.select_index_pair(ds, b, x, self.n)
                fallbacks += 1
            selections[c.name] = sel
            for lc in certify.assemble(c, self.graph, ds, b, sel, self.alpha_, x, self.n, self.m,
                                       self._split(c)):
                grouped[lc.leader].append(lc)
        return grouped, selections, fallbacks

    def filter_input(self, x, u_nom, joint: bool = False):
        x = np.asarray(x, dtype=float)
        u_nom = np.asarray(u_nom, dtype=float)
        grouped, selections, fallbacks = self.constraints(x)
        u = np.zeros_like(u_nom)
        slack = 0.0
        m = self.m
        if joint:
            u_j, s_j = solve_joint(grouped, u_nom, m, self.rho, self.input_box, self.tol)
            return u_j, {"slack": s_j, "selections": selections, "fallbacks": fallbacks, "grouped": grouped}
        for ld, cons in grouped.items():
            res = qp.solve_safety_filter(ld, u_nom[ld * m:(ld + 1) * m], cons, self.rho, self.input_box, self.tol)
            if res.solution is not None and res.solution.status != qp.OPTIMAL:
                log.debug("leader %d filter status %s", ld, res.solution.status)
            u[ld * m:(ld + 1) * m] = res.u
            slack += float(np.sum(res.slack))
        return u, {"slack": slack, "selections": selections, "fallbacks": fallbacks, "grouped": grouped}


def solve_joint(grouped: dict, u_nom, m: int, rho: float, input_box, tol: float = 1e-6):
    """One QP over all leaders' inputs (block-stacked per-leader problems)."""
    probs = []
    for ld, cons in grouped.items():
        probs.append((ld, qp.build_safety_filter(ld, u_nom[ld * m:(ld + 1) * m], cons, rho, input_box)))
    nv = sum(p.n for _, p in probs)
    nr = sum(p.m for _, p in probs)
    P, A = np.zeros((nv, nv)), np.zeros((nr, nv))
    q, lo, hi = np.zeros(nv), np.zeros(nr), np.zeros(nr)
    cv = cr = 0
    offsets = []
    for ld, p in probs:
        P[cv:cv + p.n, cv:cv + p.n] = p.P
        A[cr:cr + p.m, cv:cv + p.n] = p.A
        q[cv:cv + p.n] = p.q
        lo[cr:cr + p.m], hi[cr:cr + p.m] = p.l, p.u
        offsets.append((ld, cv, p.layout))
        cv += p.n
        cr += p.m
    sol = qp.solve(qp.QpProblem(P, q, A, lo, hi), tol=tol)
    u = np.zeros_like(np.asarray(u_nom, dtype=float))
    slack = 0.0
    for ld, off, lay in offsets:
        u[ld * m:(ld + 1) * m] = sol.primal[off + lay["u"].start: off + lay["u"].stop]
        slack += float(np.sum(sol.primal[off + lay["s"].start: off + lay["s"].stop]))
    return u, slack


def run_closed_loop(scn: Scenario, datasets: dict | None = None, bounds: dict | None = None,
                    use_filter: bool = True, horizon: float | None = None, check_joint: bool = False) -> RunResult:
    """Simulate the scenario; bounds are fitted from ``datasets`` when omitted."""
    model, graph = scn.model, scn.graph
    n, m = model.n, model.m
    horizon = scn.horizon if horizon is None else horizon
    n_steps = int(np.floor(horizon / scn.dt + 1e-9))
    cands = scn.candidates()
    filt = None
    if use_filter:
        if datasets is None:
            raise ValueError("filtered runs need datasets")
        filt = SafetyFilter(graph, n, m, scn.d_max, scn.gamma, scn.eps, scn.rho, scn.input_box,
                            scn.betas, scn.bound_scale).fit(datasets, bounds)
    times = scn.dt * np.arange(n_steps + 1)
    X = np.empty((n_steps + 1, model.state_dim))
    U = np.zeros((n_steps + 1, model.input_dim))
    Unom = np.zeros((n_steps + 1, model.input_dim))
    H = {c.name: np.empty(n_steps + 1) for c in cands}
    sel_idx = {c.name: np.full(n_steps, -1) for c in cands}
    X[0] = scn.x0
    cost = 0.0
    slack_steps = fallbacks = 0
    for t in range(n_steps + 1):
        x = X[t]
        for c in cands:
            try:
                H[c.name][t] = c.value(x, n, scn.eps)
            except DegenerateDirectionError as exc:
                raise SimulationError(f"t={times[t]:.3f}: {exc}") from exc
        if t == n_steps:
            break
        u_nom = np.zeros(model.input_dim)
        for ld in graph.leaders:
            u_nom[ld * m:(ld + 1) * m] = nominal_input(scn, x, ld)
        if filt is not None:
            try:
                u, info = filt.filter_input(x, u_nom)
            except (DegenerateDirectionError, qp.QpError) as exc:
                raise SimulationError(f"t={times[t]:.3f}: {exc}") from exc
            if check_joint:
                uj, _ = solve_joint(info["grouped"], u_nom, m, scn.rho, scn.input_box)
                if np.max(np.abs(uj - u)) > 1e-5:
                    raise SimulationError(f"t={times[t]:.3f}: joint and per-leader solutions differ")
            slack_steps += info["slack"] > 1e-6
            fallbacks += info["fallbacks"]
            for name, s in info["selections"].items():
                sel_idx[name][t] = s.index
        else:
            u = u_nom.copy()
        cost += 0.5 * float(np.sum((u - u_nom) ** 2))
        U[t], Unom[t] = u, u_nom
        X[t + 1] = model.step(x, u, scn.dt)
    U[-1], Unom[-1] = U[-2], Unom[-2]
    hmat = np.vstack([H[c.name] for c in cands]) if cands else np.zeros((0, n_steps + 1))
    post = hmat[:, 1:]
    violations = int(np.sum(np.any(post < 0, axis=0)))
    late = times >= WARMUP - 1e-9
    min_h = float(hmat[:, late].min()) if late.any() and cands else None
    metrics = RunMetrics(
        control_cost=cost,
        min_h_after_warmup=None if violations else min_h,
        violation_count=violations,
        violation_flag=violations > 0,
        num_steps=n_steps,
        slack_steps=int(slack_steps),
        fallback_selections=int(fallbacks),
    )
    traj = Trajectory(times, X, U, left_box=not bool(np.all(model.in_state_box(X))))
    return RunResult(traj, metrics, H, Unom, sel_idx)


def build_pipeline(scn: Scenario, seed: int | None = None, n_sims: int | None = None, log_fn=None):
    """Filtered datasets and bounds (fitted on the reduced sets, then scaled)."""
    spec = scn.dataset
    ds, red = prepare_datasets(
        scn.model, scn.candidates(), scn.alpha,
        n_sims=spec.n_sims if n_sims is None else n_sims,
        horizon=spec.horizon, dt=spec.dt, box=spec.box, k=spec.k,
        seed=spec.seed if seed is None else seed, eps=scn.eps, integrator=spec.integrator,
        normalize=spec.normalize, log=log_fn,
    )
    return ds, fit_bounds(red, scn.bound_scale)


STUDY_CONFIGS = ((5, 1.0), (50, 1.0), (500, 1.0), (50, 0.5), (50, 2.0), (500, 2.0))


def config_label(n_sims: int, scale: float) -> str:
    if scale == 1.0:
        return f"{n_sims} sims"
    return f"{n_sims} sims, {scale:g}x bounds"


def run_study(scn: Scenario, seeds, configs=STUDY_CONFIGS, horizon: float = 1.0, dt: float = 0.01,
              log_fn=None) -> list:
    """Average metrics over seeds for each (dataset size, bound scale) configuration."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("study needs at least one seed")

    run_scn = replace(scn, horizon=horizon, dt=dt)
    cache = {}
    rows = []
    for n_sims, factor in configs:
        results, failures = [], []
        for seed in seeds:
            try:
                if (n_sims, seed) not in cache:
                    ds, base = build_pipeline(replace(run_scn, bound_scale=1.0), seed=seed, n_sims=n_sims)
                    cache[(n_sims, seed)] = (ds, base)
                ds, base = cache[(n_sims, seed)]
                b = {k: bnd.scale(v, factor) for k, v in base.items()} if factor != 1.0 else base
                res = run_closed_loop(run_scn, ds, b)
                results.append(res.metrics)
            except (SimulationError, ValueError, qp.QpError) as exc:
                failures.append(f"seed {seed}: {exc}")
                log.warning("study run %s seed %s failed: %s", config_label(n_sims, factor), seed, exc)
        safe = [r.min_h_after_warmup for r in results if not r.violation_flag]
        row = {
            "configuration": config_label(n_sims, factor),
            "n_sims": n_sims,
            "bound_scale": factor,
            "runs": len(results),
            "control_cost": float(np.mean([r.control_cost for r in results])) if results else None,
            "min_h": float(np.mean(safe)) if safe else None,
            "violations": int(sum(r.violation_count for r in results)),
            "violating_runs": int(sum(r.violation_flag for r in results)),
            "failed_runs": len(failures),
        }
        rows.append(row)
        if log_fn is not None:
            log_fn(format_row(row))
    return rows


def format_row(row: dict) -> str:
    cost = "-" if row["control_cost"] is None else f"{row['control_cost']:.2f}"
    mh = "-" if row["min_h"] is None else f"{row['min_h']:.2f}"
    return f"{row['configuration']:<26} {cost:>10} {mh:>8} {row['violations']:>6} ({row['violating_runs']})"
