"""Command-line pipeline: generate -> fit-bounds -> simulate, plus the study grid."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bounds as bnd
from .config import Config, ConfigError, load_config
from .data import DerivativeDataset, prepare_datasets
from .sim import SimulationError, fit_bounds, format_row, run_closed_loop, run_study

log = logging.getLogger("dzcbf")

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE, EXIT_ERROR = 0, 1, 2, 3


class PipelineError(RuntimeError):
    pass


def _out_dir(cfg: Config, args) -> Path:
    return Path(args.out) if args.out else Path(cfg.outputs.directory)


def _dataset_paths(root: Path, name: str, reduced: bool):
    d = root / "datasets" / ("reduced" if reduced else "filtered")
    return d / f"{name}.csv", d / f"{name}.json"


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])


def generate(cfg: Config, out: Path, seed=None, echo=print) -> dict:
    scn = cfg.scenario(seed=seed)
    spec = scn.dataset
    n = m = scn.n
    filtered, reduced = prepare_datasets(
        scn.model, scn.candidates(), scn.alpha, spec.n_sims, spec.horizon, spec.dt, spec.box, spec.k,
        spec.seed, scn.eps, spec.integrator, spec.normalize, log=echo,
    )
    for stage, group in (("filtered", filtered), ("reduced", reduced)):
        (out / "datasets" / stage).mkdir(parents=True, exist_ok=True)
        for name, ds in group.items():
            ds.write(*_dataset_paths(out, name, stage == "reduced"), n, m)
    return filtered


def read_datasets(cfg: Config, out: Path, reduced: bool) -> dict:
    scn = cfg.scenario()
    found = {}
    for c in scn.candidates():
        csv_path, man_path = _dataset_paths(out, c.name, reduced)
        if not csv_path.is_file():
            raise PipelineError(f"missing dataset for candidate {c.name}: {csv_path}")
        found[c.name] = DerivativeDataset.read(c, csv_path, man_path if man_path.is_file() else None)
    return found


def fit(cfg: Config, out: Path, scale=None, echo=print) -> dict:
    reduced = read_datasets(cfg, out, reduced=True)
    factor = cfg.bounds.scale if scale is None else scale
    try:
        fitted = fit_bounds(reduced, factor, solver=cfg.bounds.solver)
    except RuntimeError as exc:
        raise PipelineError(f"bound LP failed: {exc}") from exc
    bdir = out / "bounds"
    bdir.mkdir(parents=True, exist_ok=True)
    for name, b in fitted.items():
        b.to_json(bdir / f"{name}.json")
        echo(f"{name}: widths {np.array2string(b.widths, precision=3, max_line_width=200)}")
    return fitted


def read_bounds(cfg: Config, bdir: Path, scale: float) -> dict:
    scn = cfg.scenario()
    out = {}
    for c in scn.candidates():
        path = bdir / f"{c.name}.json"
        if not path.is_file():
            raise PipelineError(f"missing bounds for candidate {c.name}: {path}")
        b = bnd.JacobianBounds.from_json(path)
        have = float(b.metadata.get("scale", 1.0))
        out[c.name] = b if have == scale else bnd.scale(b, scale / have)
    return out


def simulate(cfg: Config, out: Path, use_filter=True, seed=None, scale=None, echo=print):
    scn = cfg.scenario(seed=seed, scale=scale)
    datasets = bounds = None
    if use_filter:
        if seed is not None or not (out / "datasets" / "filtered").is_dir():
            generate(cfg, out, seed=seed, echo=echo)
        datasets = read_datasets(cfg, out, reduced=False)
        bdir = Path(cfg.bounds.directory) if cfg.bounds.directory else out / "bounds"
        if cfg.bounds.directory is None and (seed is not None or not bdir.is_dir()):
            fit(cfg, out, scale=1.0, echo=echo)
        bounds = read_bounds(cfg, bdir, scn.bound_scale)
    res = run_closed_loop(scn, datasets, bounds, use_filter=use_filter)
    out.mkdir(parents=True, exist_ok=True)
    traj = res.trajectory
    ns, nu = traj.states.shape[1], traj.inputs.shape[1]
    _write_csv(out / "trajectory.csv", ["time"] + [f"x_{i}" for i in range(ns)],
               np.column_stack([traj.times, traj.states]))
    _write_csv(out / "inputs.csv",
               ["time"] + [f"u_nom_{i}" for i in range(nu)] + [f"u_{i}" for i in range(nu)],
               np.column_stack([traj.times, res.u_nominal, traj.inputs]))
    names = list(res.h)
    _write_csv(out / "h_values.csv", ["time"] + names, np.column_stack([traj.times] + [res.h[k] for k in names]))
    doc = res.metrics.as_dict()
    doc["filtered"] = use_filter
    doc["min_h"] = {k: float(v.min()) for k, v in res.h.items()}
    with open(out / "metrics.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return res


STUDY_COLUMNS = ["configuration", "n_sims", "bound_scale", "runs", "control_cost", "min_h",
                 "violations", "violating_runs", "failed_runs"]


def study(cfg: Config, out: Path, echo=print) -> list:
    from .config import StudySection

    spec = cfg.study or StudySection()
    scn = cfg.scenario()
    configs = [(r.n_sims, r.scale) for r in spec.configurations]
    echo(f"{'configuration':<26} {'cost':>10} {'min h':>8} {'viol':>6}")
    rows = run_study(scn, spec.seeds, configs, horizon=spec.horizon, dt=spec.dt, log_fn=echo)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "study.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=STUDY_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in STUDY_COLUMNS})
    return rows


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dzcbf", description="Data-driven connectivity barrier filters.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="scenario JSON file")
        sp.add_argument("--out", help="output directory (overrides outputs.directory)")

    sp = sub.add_parser("generate", help="generate, filter and reduce derivative datasets")
    common(sp)
    sp.add_argument("--seed", type=int, help="dataset seed override")
    sp = sub.add_parser("fit-bounds", help="fit Jacobian bounds on the reduced datasets")
    common(sp)
    sp.add_argument("--scale", type=float, help="bound scale factor override")
    sp = sub.add_parser("simulate", help="run the closed loop and write run artifacts")
    common(sp)
    sp.add_argument("--seed", type=int, help="dataset seed override (regenerates data and bounds)")
    sp.add_argument("--scale", type=float, help="bound scale factor override")
    sp.add_argument("--no-filter", action="store_true", help="apply the nominal input unfiltered")
    sp = sub.add_parser("study", help="run the dataset-size / bound-scale grid")
    common(sp)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "scale", None) is not None and not args.scale > 0:
        parser.error("--scale must be positive")
    try:
        cfg = load_config(args.config)
    except (FileNotFoundError, ConfigError) as exc:
        print(f"dzcbf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = _out_dir(cfg, args)
    try:
        if args.command == "generate":
            generate(cfg, out, seed=args.seed)
        elif args.command == "fit-bounds":
            fit(cfg, out, scale=args.scale)
        elif args.command == "simulate":
            res = simulate(cfg, out, use_filter=not args.no_filter, seed=args.seed, scale=args.scale)
            m = res.metrics
            mh = "-" if m.min_h_after_warmup is None else f"{m.min_h_after_warmup:.4f}"
            print(f"steps={m.num_steps} cost={m.control_cost:.4f} min_h={mh} violations={m.violation_count}")
            if m.violation_flag:
                worst = min(res.h, key=lambda k: res.h[k].min())
                log.error("safety violation: %s reached h=%.4f", worst, res.h[worst].min())
                print(f"violation: {worst} reached h={res.h[worst].min():.4f}", file=sys.stderr)
                return EXIT_VIOLATION
        elif args.command == "study":
            study(cfg, out)
    except (PipelineError, SimulationError, ValueError) as exc:
        print(f"dzcbf: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
