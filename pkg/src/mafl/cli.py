"""Command-line entry point: ``mafl <command> --scenario PATH --out DIR``.

Commands: validate, estimate, optimize, simulate, bound, compare, sweep.
Exit codes: 0 ok, 2 validation failure, 3 optimizer failure, 4 simulation
failure.  ``MAFL_LOG`` sets the log level.  Every output file is written to
a temporary name and renamed into place; ``MANIFEST.json`` in the output
directory records the command, seeds, overrides and final status.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sca
from . import simulator as sim
from .bound import BoundConstants, eval_bound, eval_conv_lhs, estimate_constants
from .core import ScenarioError, load_scenario, validate_scenario
from .scheduling import ScheduleLimits, read_schedule_csv, write_schedule_csv

log = logging.getLogger("mafl")

COMMANDS = ("validate", "estimate", "optimize", "simulate", "bound", "compare", "sweep")
EXIT_OK, EXIT_VALIDATION, EXIT_OPTIMIZER, EXIT_SIMULATION = 0, 2, 3, 4
METHODS = ("mafl", "async_random_idle", "sync_fedavg")
SUMMARY_COLUMNS = ["method", "task", "final_loss_mean", "final_loss_stderr", "final_accuracy_mean",
                   "final_accuracy_stderr", "energy_j_mean", "energy_j_stderr", "sgd_share_mean",
                   "sgd_share_stderr", "seeds"]
BOUND_COLUMNS = ["task", "term", "value"]
# sweepable parameters: name -> dotted override path ({j} is the task index)
SWEEP_PARAMETERS = {
    "importance": "tasks.{j}.importance",
    "energy_weight": "tasks.{j}.energy_weight",
    "staleness_limit": "tasks.{j}.staleness_limit",
    "c1": "objective_weights.0",
    "c2": "objective_weights.1",
    "c3": "objective_weights.2",
}
PROBE_POINTS = 8


class CommandFailed(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(code, message)
        self.code = code
        self.message = message

    def __str__(self):
        return self.message


@dataclass
class RunManifest:
    scenario: str
    command: str
    out: str
    seeds: list
    overrides: dict = field(default_factory=dict)
    status: str = "running"
    message: str = ""
    artifacts: list = field(default_factory=list)

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ValueError(f"unknown command {self.command!r}")
        if not self.seeds:
            raise ValueError("need at least one seed")

    def save(self):
        atomic_write(Path(self.out) / "MANIFEST.json", json.dumps(dataclasses.asdict(self), indent=2) + "\n")


# --------------------------------------------------------------------------
# file helpers
# --------------------------------------------------------------------------


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_via(path, writer, *args) -> None:
    """Run ``writer(tmp_path, *args)`` and rename the result onto ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        writer(tmp, *args)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def constants_to_dict(c: BoundConstants) -> dict:
    out = dataclasses.asdict(c)
    for k, v in out.items():
        if isinstance(v, np.ndarray):
            out[k] = v.tolist()
    return out


def constants_from_dict(d: dict) -> BoundConstants:
    return BoundConstants(**{k: (np.asarray(v) if isinstance(v, list) else v) for k, v in d.items()})


def write_constants(path, constants) -> None:
    atomic_write(path, json.dumps([constants_to_dict(c) for c in constants], indent=2) + "\n")


def read_constants(path) -> list:
    with open(path) as fh:
        return [constants_from_dict(d) for d in json.load(fh)]


# --------------------------------------------------------------------------
# pipeline stages
# --------------------------------------------------------------------------


def load(manifest: RunManifest, extra=()):
    overrides = [f"{k}={v}" for k, v in manifest.overrides.items()] + list(extra)
    try:
        sc = load_scenario(manifest.scenario, overrides)
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise CommandFailed(EXIT_VALIDATION, f"cannot load scenario: {exc}") from exc
    bad = validate_scenario(sc)
    if bad:
        atomic_write(Path(manifest.out) / "validation.txt", "".join(f"{v}\n" for v in bad))
        raise CommandFailed(EXIT_VALIDATION, f"{len(bad)} validation errors, first: {bad[0]}")
    return sc


def prepared(sc, seed: int, base_dir):
    try:
        return sim.prepare_data(sc, seed, base_dir)
    except ValueError as exc:
        raise CommandFailed(EXIT_VALIDATION, f"data preparation failed: {exc}") from exc


def estimate(data, seed: int):
    return [estimate_constants(data.losses[j], list(data.partitions[j]), PROBE_POINTS, [seed, j],
                               rho=t.reg_weight).inflated(1.2)
            for j, t in enumerate(data.scenario.tasks)]


def optimize_stage(data, constants, config=None):
    try:
        return sca.optimize(data.scenario, constants, config or sca.SCAConfig())
    except (sca.OptimizerError, ValueError) as exc:
        raise CommandFailed(EXIT_OPTIMIZER, f"optimizer failed: {exc}") from exc


def simulate_stage(data, tensors, plans, seed: int):
    try:
        return sim.run(data.scenario, tensors, plans, data.losses, data.partitions, seed, data.heldout)
    except (sim.SimulationError, ValueError) as exc:
        raise CommandFailed(EXIT_SIMULATION, f"simulation failed: {exc}") from exc


def sgd_share(sc, tensors, plans) -> np.ndarray:
    """Share of the total local SGD iterations spent on each task."""
    per = np.array([sum(float(plans[j].sgd_iters[i, g]) for i, g, _ in tensors[j].triples)
                    for j in range(sc.num_tasks)])
    return per / per.sum() if per.sum() > 0 else per


def one_seed(scenario_path, overrides, seed: int, methods=METHODS):
    """Every method on one seed; returns ``{method: (RunMetrics, sgd share)}``."""
    sc = load_scenario(scenario_path, overrides)
    data = sim.prepare_data(sc, seed, Path(scenario_path).parent)
    constants = estimate(data, seed)
    out = {}
    if "mafl" in methods:
        tensors, plans, _ = optimize_stage(data, constants)
        _, metrics, _ = simulate_stage(data, tensors, plans, seed)
        out["mafl"] = (metrics, sgd_share(data.scenario, tensors, plans))
    if "async_random_idle" in methods:
        try:
            _, metrics, info = sim.run_baseline(data.scenario, "async_random_idle", data.losses, data.partitions,
                                                seed, data.heldout, constants)
        except sca.OptimizerError as exc:
            raise CommandFailed(EXIT_OPTIMIZER, f"baseline resource allocation failed: {exc}") from exc
        except sim.SimulationError as exc:
            raise CommandFailed(EXIT_SIMULATION, f"baseline simulation failed: {exc}") from exc
        out["async_random_idle"] = (metrics, sgd_share(info["scenario"], info["schedules"], info["plans"]))
    if "sync_fedavg" in methods:
        _, metrics, info = sim.run_baseline(data.scenario, "sync_fedavg", data.losses, data.partitions, seed,
                                            data.heldout)
        share = np.array([float(info["plans"][j].sgd_iters.sum()) for j in range(sc.num_tasks)])
        out["sync_fedavg"] = (metrics, share / share.sum())
    return out


def _mean_stderr(x):
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return float(x.mean()), 0.0
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size))


def summarize(results: dict) -> list:
    """Rows of the summary table from ``{seed: {method: (metrics, share)}}``."""
    rows = []
    seeds = sorted(results)
    for method in METHODS:
        runs = [results[s][method] for s in seeds if method in results[s]]
        if not runs:
            continue
        for j in sorted(runs[0][0].tasks):
            loss = [m.tasks[j].loss[-1] for m, _ in runs]
            acc = [m.tasks[j].accuracy[-1] for m, _ in runs]
            en = [m.tasks[j].energy[-1] for m, _ in runs]
            share = [s[j] for _, s in runs]
            rows.append([method, j, *_mean_stderr(loss), *_mean_stderr(acc), *_mean_stderr(en),
                         *_mean_stderr(share), len(runs)])
    return rows


GNUPLOT = """# loss against cumulative energy, one curve per method and task
set datafile separator ','
set key autotitle columnhead
set xlabel 'cumulative energy [J]'
set ylabel 'global loss'
set logscale x
plot {plots}
"""


def gnuplot_script(files) -> str:
    plots = ", \\\n     ".join(f"'{f}' using 6:4 with linespoints title '{Path(f).stem}'" for f in files)
    return GNUPLOT.format(plots=plots)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_validate(m: RunManifest, args) -> int:
    load(m)
    atomic_write(Path(m.out) / "validation.txt", "ok\n")
    return EXIT_OK


def cmd_estimate(m: RunManifest, args) -> int:
    sc = load(m)
    data = prepared(sc, m.seeds[0], Path(m.scenario).parent)
    path = Path(m.out) / "constants.json"
    write_constants(path, estimate(data, m.seeds[0]))
    m.artifacts.append(path.name)
    return EXIT_OK


def _constants_for(m, data):
    path = Path(m.out) / "constants.json"
    if path.exists():
        c = read_constants(path)
        if len(c) == data.scenario.num_tasks:
            return c
    c = estimate(data, m.seeds[0])
    write_constants(path, c)
    m.artifacts.append(path.name)
    return c


def cmd_optimize(m: RunManifest, args) -> int:
    sc = load(m)
    data = prepared(sc, m.seeds[0], Path(m.scenario).parent)
    constants = _constants_for(m, data)
    tensors, plans, history = optimize_stage(data, constants)
    out = Path(m.out)
    atomic_via(out / "schedule.csv", write_schedule_csv, tensors)
    atomic_via(out / "plan.csv", sca.write_plan_csv, plans)
    atomic_via(out / "history.csv", sca.write_history_csv, history)
    m.artifacts += ["schedule.csv", "plan.csv", "history.csv"]
    return EXIT_OK


def _read_solution(m, sc):
    out = Path(m.out)
    if not (out / "schedule.csv").exists() or not (out / "plan.csv").exists():
        raise CommandFailed(EXIT_OPTIMIZER, f"missing schedule.csv or plan.csv in {out}; run optimize first")
    limits = {j: ScheduleLimits(t.staleness_limit, t.num_aggregations) for j, t in enumerate(sc.tasks)}
    try:
        tensors = read_schedule_csv(out / "schedule.csv", sc.num_devices, limits)
        plans = sca.read_plan_csv(out / "plan.csv", sc)
    except (KeyError, ValueError) as exc:
        raise CommandFailed(EXIT_OPTIMIZER, f"cannot read the stored solution: {exc}") from exc
    return tensors, plans


def cmd_simulate(m: RunManifest, args) -> int:
    sc = load(m)
    data = prepared(sc, m.seeds[0], Path(m.scenario).parent)
    tensors, plans = _read_solution(m, data.scenario)
    out = Path(m.out)
    for seed in m.seeds:
        elog, metrics, _ = simulate_stage(data, tensors, plans, seed)
        atomic_via(out / f"events_seed{seed}.csv", elog.write_csv)
        atomic_via(out / f"metrics_seed{seed}.csv", metrics.write_csv)
        m.artifacts += [f"events_seed{seed}.csv", f"metrics_seed{seed}.csv"]
    return EXIT_OK


def cmd_bound(m: RunManifest, args) -> int:
    sc = load(m)
    data = prepared(sc, m.seeds[0], Path(m.scenario).parent)
    constants = _constants_for(m, data)
    tensors, plans = _read_solution(m, data.scenario)
    lhs = {}
    if args.with_lhs:
        _, metrics, _ = simulate_stage(data, tensors, plans, m.seeds[0])
        lhs = {j: eval_conv_lhs(metrics.tasks[j].grad_norm_sq, tensors[j]) for j in tensors}
    rows = []
    for j, t in enumerate(data.scenario.tasks):
        rep = eval_bound(tensors[j], plans[j], constants[j], t)
        rep.lhs_conv = lhs.get(j)
        for k, v in rep.as_row().items():
            if v is not None:
                rows.append([j, k, repr(float(v))])
    atomic_write(Path(m.out) / "bound.csv", csv_text(BOUND_COLUMNS, rows))
    m.artifacts.append("bound.csv")
    return EXIT_OK


def _run_seeds(m: RunManifest, extra=(), jobs: int = 1, methods=METHODS) -> dict:
    overrides = [f"{k}={v}" for k, v in m.overrides.items()] + list(extra)
    if jobs > 1 and len(m.seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = {s: pool.submit(one_seed, m.scenario, overrides, s, methods) for s in m.seeds}
            return {s: futs[s].result() for s in m.seeds}
    return {s: one_seed(m.scenario, overrides, s, methods) for s in m.seeds}


def _write_method_csvs(out: Path, results: dict, prefix: str = "") -> list:
    files = []
    for method in METHODS:
        rows = []
        for s in sorted(results):
            if method not in results[s]:
                continue
            metrics = results[s][method][0]
            for j in sorted(metrics.tasks):
                tm = metrics.tasks[j]
                for k in range(len(tm.loss)):
                    rows.append([s, j, k, repr(float(tm.time[k])), repr(float(tm.loss[k])),
                                 repr(float(tm.energy[k])), repr(float(tm.accuracy[k]))])
        if rows:
            name = f"{prefix}{method}.csv"
            # loss is column 5 and energy column 6 in gnuplot's 1-based count
            atomic_write(out / name, csv_text(["seed", "task", "g_prime", "time", "loss", "energy_j", "accuracy"],
                                              rows))
            files.append(name)
    return files


def cmd_compare(m: RunManifest, args) -> int:
    load(m)
    out = Path(m.out)
    results = _run_seeds(m, jobs=args.jobs)
    files = _write_method_csvs(out, results)
    atomic_write(out / "summary.csv", csv_text(SUMMARY_COLUMNS, summarize(results)))
    atomic_write(out / "plot.gp", gnuplot_script(files))
    m.artifacts += files + ["summary.csv", "plot.gp"]
    return EXIT_OK


def parse_sweep_parameter(name: str):
    """``importance.0`` -> override path; unknown names raise CommandFailed."""
    base, _, idx = name.partition(".")
    if base not in SWEEP_PARAMETERS:
        raise CommandFailed(EXIT_VALIDATION, f"unknown sweep parameter {name!r}; valid: "
                            + ", ".join(k + (".J" if "{j}" in v else "") for k, v in SWEEP_PARAMETERS.items()))
    path = SWEEP_PARAMETERS[base]
    if "{j}" in path:
        if not idx.isdigit():
            raise CommandFailed(EXIT_VALIDATION, f"parameter {base!r} needs a task index, e.g. {base}.0")
        path = path.format(j=int(idx))
    return path


def cmd_sweep(m: RunManifest, args) -> int:
    if not args.param or not args.values:
        raise CommandFailed(EXIT_VALIDATION, "sweep needs --param and --values")
    path = parse_sweep_parameter(args.param)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    load(m, [f"{path}={values[0]}"])
    out = Path(m.out)
    rows = []
    for v in values:
        results = _run_seeds(m, [f"{path}={v}"], jobs=args.jobs, methods=("mafl",))
        for r in summarize(results):
            rows.append([args.param, v] + r)
    atomic_write(out / "sweep.csv", csv_text(["parameter", "value"] + SUMMARY_COLUMNS, rows))
    m.artifacts.append("sweep.csv")
    return EXIT_OK


HANDLERS = {"validate": cmd_validate, "estimate": cmd_estimate, "optimize": cmd_optimize,
            "simulate": cmd_simulate, "bound": cmd_bound, "compare": cmd_compare, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mafl", description="Multi-task asynchronous federated learning experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--scenario", required=True, help="scenario TOML file")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--jobs", type=int, default=1, help="parallel seeds")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VAL",
                   help="dotted override, repeatable (e.g. tasks.0.importance=1e7)")
    p.add_argument("--with-lhs", action="store_true", help="bound: add the simulated left-hand side")
    p.add_argument("--param", help="sweep: parameter name, e.g. importance.0")
    p.add_argument("--values", help="sweep: comma-separated values")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = os.environ.get("MAFL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        overrides = dict(o.split("=", 1) for o in args.overrides)
    except ValueError:
        print("error: --seeds must be integers and --set must be KEY=VAL", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        m = RunManifest(args.scenario, args.command, args.out, seeds, overrides)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        Path(m.out).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: output directory not writable: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    m.save()
    try:
        code = HANDLERS[args.command](m, args)
        m.status, m.message = "ok", ""
    except CommandFailed as exc:
        code = exc.code
        m.status, m.message = "failed", str(exc)
        print(f"error: {exc}", file=sys.stderr)
    except ScenarioError as exc:
        code = EXIT_VALIDATION
        m.status, m.message = "failed", str(exc)
        print(f"error: {exc}", file=sys.stderr)
    m.save()
    return code


if __name__ == "__main__":
    sys.exit(main())
