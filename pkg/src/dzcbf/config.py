"""Strict JSON scenario configuration."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .dynamics import ConsensusModel
from .graph import CommGraph, canonical_edge
from .sim import STUDY_CONFIGS, DatasetSpec, Scenario

__all__ = ["Config", "ConfigError", "load_config", "dump_config"]


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


Interval = tuple[float, float]


def _check_interval(v):
    if not v[0] < v[1]:
        raise ValueError(f"interval {list(v)} must have lower < upper")
    return v


class GraphSection(_Strict):
    num_agents: int = Field(gt=0)
    leaders: list[int]
    edges: list[tuple[int, int]]


class Displacement(_Strict):
    edge: tuple[int, int]
    d: list[float] = Field(min_length=1)


class ModelSection(_Strict):
    n: int = Field(default=1, gt=0)
    desired: list[Displacement] = []
    state_box: Interval = (-10.0, 10.0)

    _box = field_validator("state_box")(_check_interval)


class BetaSection(_Strict):
    edge: tuple[int, int]
    beta_k: float = Field(gt=0)
    beta_j: float = Field(gt=0)


class BarrierSection(_Strict):
    d_max: float = Field(default=3.0, gt=0)
    gamma: float = Field(default=1.0, gt=0)
    eps: float = Field(default=0.1, gt=0)
    betas: list[BetaSection] = []


class DatasetSection(_Strict):
    n_sims: int = Field(default=50, gt=0)
    horizon: float = Field(default=1.0, gt=0)
    dt: float = Field(default=0.01, gt=0)
    box: Interval = (-5.0, 5.0)
    k: int = Field(default=100, gt=0)
    seed: int = Field(default=0, ge=0)
    integrator: Literal["euler", "rk4"] = "rk4"
    normalize: bool = False

    _box = field_validator("box")(_check_interval)


class BoundsSection(_Strict):
    scale: float = Field(default=1.0, gt=0)
    solver: Literal["highs", "admm"] = "highs"
    directory: Optional[str] = None


class ControllerSection(_Strict):
    k_p: float = Field(gt=0)
    targets: dict[int, list[float]]
    rho: float = Field(default=100.0, gt=0)
    input_box: Interval = (-50.0, 50.0)

    _box = field_validator("input_box")(_check_interval)


class SimSection(_Strict):
    dt: float = Field(default=0.01, gt=0)
    horizon: float = Field(default=5.0, gt=0)
    x0: list[float]


class OutputsSection(_Strict):
    directory: str = "out"


class StudyRow(_Strict):
    n_sims: int = Field(gt=0)
    scale: float = Field(gt=0)


class StudySection(_Strict):
    seeds: list[int] = Field(default_factory=lambda: list(range(10)), min_length=1)
    configurations: list[StudyRow] = Field(
        default_factory=lambda: [StudyRow(n_sims=n, scale=s) for n, s in STUDY_CONFIGS], min_length=1)
    horizon: float = Field(default=1.0, gt=0)
    dt: float = Field(default=0.01, gt=0)


class Config(_Strict):
    graph: GraphSection
    model: ModelSection = ModelSection()
    barrier: BarrierSection = BarrierSection()
    dataset: DatasetSection = DatasetSection()
    bounds: BoundsSection = BoundsSection()
    controller: ControllerSection
    sim: SimSection
    outputs: OutputsSection = OutputsSection()
    study: Optional[StudySection] = None

    @model_validator(mode="after")
    def _cross_refs(self):
        g = self.graph
        edges = {canonical_edge(*e) for e in g.edges}
        n = self.model.n
        for disp in self.model.desired:
            if canonical_edge(*disp.edge) not in edges:
                raise ValueError(f"displacement given for non-edge {list(disp.edge)}")
            if len(disp.d) != n:
                raise ValueError(f"displacement on {list(disp.edge)} has {len(disp.d)} entries, expected {n}")
        for b in self.barrier.betas:
            if canonical_edge(*b.edge) not in edges:
                raise ValueError(f"beta split given for non-edge {list(b.edge)}")
        for ld, tgt in self.controller.targets.items():
            if ld not in g.leaders:
                raise ValueError(f"target given for non-leader {ld}")
            if len(tgt) != n:
                raise ValueError(f"target for leader {ld} has {len(tgt)} entries, expected {n}")
        if len(self.sim.x0) != g.num_agents * n:
            raise ValueError(f"x0 has {len(self.sim.x0)} entries, expected {g.num_agents * n}")
        if self.bounds.directory is not None and not Path(self.bounds.directory).is_dir():
            raise ValueError(f"bounds directory {self.bounds.directory!r} does not exist")
        return self

    def build_graph(self) -> CommGraph:
        g = self.graph
        return CommGraph.from_lists(g.num_agents, g.leaders, [tuple(e) for e in g.edges])

    def build_model(self, graph: CommGraph | None = None) -> ConsensusModel:
        graph = self.build_graph() if graph is None else graph
        desired = {}
        for disp in self.model.desired:
            i, j = disp.edge
            d = list(disp.d)
            # stored as d_ij for the canonical (min, max) order
            desired[canonical_edge(i, j)] = d if i < j else [-v for v in d]
        n = self.model.n
        desired = {e: (v[0] if n == 1 else v) for e, v in desired.items()}
        return ConsensusModel(graph, desired, n=n, state_box=tuple(self.model.state_box),
                              input_box=tuple(self.controller.input_box))

    def scenario(self, seed: int | None = None, n_sims: int | None = None, scale: float | None = None) -> Scenario:
        graph = self.build_graph()
        ds = self.dataset
        spec = DatasetSpec(
            n_sims=ds.n_sims if n_sims is None else n_sims, horizon=ds.horizon, dt=ds.dt,
            box=tuple(ds.box), k=ds.k, seed=ds.seed if seed is None else seed, integrator=ds.integrator,
            normalize=ds.normalize,
        )
        return Scenario(
            graph=graph,
            model=self.build_model(graph),
            targets={ld: list(t) for ld, t in self.controller.targets.items()},
            k_p=self.controller.k_p,
            x0=list(self.sim.x0),
            d_max=self.barrier.d_max,
            gamma=self.barrier.gamma,
            eps=self.barrier.eps,
            rho=self.controller.rho,
            dt=self.sim.dt,
            horizon=self.sim.horizon,
            betas={tuple(b.edge): (b.beta_k, b.beta_j) for b in self.barrier.betas},
            input_box=tuple(self.controller.input_box),
            bound_scale=self.bounds.scale if scale is None else scale,
            dataset=spec,
        )


def parse_config(text: str, base_dir: Path | None = None) -> Config:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    bsec = raw.get("bounds") if isinstance(raw, dict) else None
    if base_dir is not None and isinstance(bsec, dict) and isinstance(bsec.get("directory"), str):
        # a relative bounds directory resolves against the config file's directory
        if not Path(bsec["directory"]).is_absolute():
            bsec["directory"] = str(base_dir / bsec["directory"])
    try:
        return Config.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> Config:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(), path.parent)


def dump_config(cfg: Config) -> str:
    return cfg.model_dump_json(indent=2) + "\n"
