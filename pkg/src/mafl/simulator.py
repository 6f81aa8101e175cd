"""Discrete-event execution of schedules and resource plans, plus two baselines.

Every task has its own timeline.  Device ``i`` runs its local periods of
task ``j`` back to back from time zero: a reception period idles, downloads
the current global model, trains on it, and uploads when the same period is
also an upload period; an upload-only period just transmits.  The server
applies each arriving upload with the convex combination of
:func:`mafl.training.aggregate`.

Exact time ties inside a task are resolved by the scheduled aggregation
index; ties across tasks or devices fall back to ``(task, device)`` order.
"""

from __future__ import annotations

import csv
import dataclasses
import heapq
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (LabeledDataset, Scenario, make_dataset, partition_non_iid, split_heldout,
                   with_dataset_sizes)
from .scheduling import ScheduleLimits, ScheduleTensor, check_schedule, pair_rounds, round_pairs
from .training import (LossModel, ModelState, SgdTrace, aggregate, global_gradient, global_loss,
                       local_train, make_loss)
from .wireless import link_table, period_breakdown

log = logging.getLogger(__name__)

EVENT_KINDS = ("downlink_start", "downlink_end", "compute_end", "uplink_end", "aggregate")
_KIND_RANK = {k: n for n, k in enumerate(EVENT_KINDS)}
EVENT_COLUMNS = ["time", "kind", "device", "task", "g", "g_prime", "device_energy_j", "bs_energy_j"]
METRIC_COLUMNS = ["task", "g_prime", "time", "loss", "accuracy", "energy_j", "device_energy_j",
                  "bs_energy_j", "grad_norm_sq"]
# slack for comparing event times that were computed by different sums
TIME_TOL = 1e-9


class SimulationError(RuntimeError):
    """The physics of a run contradict its schedule."""


@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    device: int
    task: int
    g: int
    g_prime: int = -1
    device_energy: float = 0.0
    bs_energy: float = 0.0

    def __post_init__(self):
        if self.kind not in _KIND_RANK:
            raise ValueError(f"unknown event kind {self.kind!r}")

    def sort_key(self):
        # aggregates of one task at the same instant keep their index order
        seq = self.g_prime if self.kind == "aggregate" else -1
        return (self.time, self.task, seq, self.device, _KIND_RANK[self.kind], self.g)


@dataclass
class EventLog:
    """Time-ordered events with running energy totals."""

    events: list = field(default_factory=list)
    device_energy: np.ndarray | None = None
    bs_energy: float = 0.0
    aggregations: dict = field(default_factory=dict)

    @classmethod
    def from_events(cls, events, num_devices: int) -> "EventLog":
        out = cls(sorted(events, key=Event.sort_key), np.zeros(num_devices), 0.0, {})
        for ev in out.events:
            if ev.device_energy < 0 or ev.bs_energy < 0:
                raise SimulationError("negative energy increment")
            if ev.device >= 0:
                out.device_energy[ev.device] += ev.device_energy
            out.bs_energy += ev.bs_energy
            if ev.kind == "aggregate":
                out.aggregations[ev.task] = out.aggregations.get(ev.task, 0) + 1
        return out

    def of_task(self, task: int) -> list:
        return [e for e in self.events if e.task == task]

    def task_energy(self, task: int) -> tuple[np.ndarray, float]:
        """Per-device and base-station energy spent on one task."""
        dev = np.zeros_like(self.device_energy)
        bs = 0.0
        for ev in self.of_task(task):
            if ev.device >= 0:
                dev[ev.device] += ev.device_energy
            bs += ev.bs_energy
        return dev, bs

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(EVENT_COLUMNS)
            for ev in self.events:
                w.writerow([repr(ev.time), ev.kind, ev.device, ev.task, ev.g, ev.g_prime,
                            repr(ev.device_energy), repr(ev.bs_energy)])


@dataclass
class TaskMetrics:
    """Per-aggregation series of one task; entry ``k`` describes ``w^(k+1)``.

    ``grad_norm_sq[k]`` is the squared full-batch global gradient norm at
    ``w^(k)``, the model a round started from.
    """

    time: np.ndarray
    loss: np.ndarray
    accuracy: np.ndarray
    device_energy: np.ndarray
    bs_energy: np.ndarray
    grad_norm_sq: np.ndarray
    initial_loss: float
    initial_accuracy: float

    @property
    def energy(self) -> np.ndarray:
        return self.device_energy + self.bs_energy

    def energy_to_reach(self, target: float) -> float:
        """Cumulative energy at the first aggregation with loss at or below ``target``."""
        if self.initial_loss <= target:
            return 0.0
        hit = np.flatnonzero(self.loss <= target)
        return float(self.energy[hit[0]]) if hit.size else float("inf")


@dataclass
class RunMetrics:
    """Per-task metrics, realized QoE spans and the global models ``w^(0) .. w^(n)``."""

    tasks: dict
    qoe_total: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_COLUMNS)
            for j in sorted(self.tasks):
                m = self.tasks[j]
                for k in range(len(m.loss)):
                    w.writerow([j, k, repr(float(m.time[k])), repr(float(m.loss[k])),
                                repr(float(m.accuracy[k])), repr(float(m.energy[k])),
                                repr(float(m.device_energy[k])), repr(float(m.bs_energy[k])),
                                repr(float(m.grad_norm_sq[k]))])


# --------------------------------------------------------------------------
# data preparation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PreparedData:
    """Scenario with realized dataset sizes, plus per-task data and losses."""

    scenario: Scenario
    partitions: tuple
    heldout: tuple
    losses: tuple


def prepare_data(scenario: Scenario, seed: int | None = None, base_dir=None) -> PreparedData:
    """Build each task's pooled dataset, carve the held-out split, partition the rest.

    The held-out split is drawn before partitioning and depends on ``seed``.
    The returned scenario carries the realized partition sizes.
    """
    seed = scenario.seed if seed is None else int(seed)
    I = scenario.num_devices
    parts, held, losses = [], [], []
    sizes = np.zeros((I, scenario.num_tasks), dtype=int)
    for j, t in enumerate(scenario.tasks):
        spec = scenario.datasets[j]
        if spec.generator == "blobs":
            spec = dataclasses.replace(spec, seed=spec.seed + 7919 * j)
        data = make_dataset(spec, base_dir)
        train, out = split_heldout(data, scenario.heldout_fraction, seed * 1000 + j)
        p = partition_non_iid(train, I, scenario.max_labels_per_device, seed * 1000 + 500 + j)
        parts.append(tuple(p))
        held.append(out)
        losses.append(make_loss(t.loss, data.label_count))
        sizes[:, j] = [len(x) for x in p]
    return PreparedData(with_dataset_sizes(scenario, sizes), tuple(parts), tuple(held), tuple(losses))


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def accuracy(loss: LossModel, w, data: LabeledDataset) -> float:
    """Share of points whose predicted label matches."""
    if len(data) == 0:
        return float("nan")
    return float(np.mean(loss.predict(np.asarray(w, float), data.features) == data.labels))


def collect_metrics(log_: EventLog, models, losses, partitions, heldout, qoe_total=None) -> RunMetrics:
    """Per-task loss, accuracy, energy and gradient-norm series.

    ``models[j]`` lists the global models ``w^(0) .. w^(n)`` of task ``j``,
    one per aggregate event plus the initial one.
    """
    out = {}
    for j in sorted(models):
        hist = models[j]
        aggs = [e for e in log_.of_task(j) if e.kind == "aggregate"]
        if len(hist) != len(aggs) + 1:
            raise SimulationError(f"task {j}: {len(hist)} model snapshots for {len(aggs)} aggregations")
        loss, parts, held = losses[j], partitions[j], heldout[j]
        n = len(aggs)
        times = np.array([e.time for e in aggs])
        dev_e = np.zeros(n)
        bs_e = np.zeros(n)
        run_dev = run_bs = 0.0
        k = 0
        for ev in log_.of_task(j):
            run_dev += ev.device_energy
            run_bs += ev.bs_energy
            if ev.kind == "aggregate":
                dev_e[k], bs_e[k] = run_dev, run_bs
                k += 1
        ws = [np.asarray(getattr(w, "weights", w), float) for w in hist]
        lval = np.array([global_loss(ModelState(w, j), parts, loss) for w in ws])
        acc = np.array([accuracy(loss, w, held) for w in ws])
        gn = np.array([float(np.sum(global_gradient(w, parts, loss) ** 2)) for w in ws[:-1]])
        out[j] = TaskMetrics(times, lval[1:], acc[1:], dev_e, bs_e, gn, float(lval[0]), float(acc[0]))
    return RunMetrics(out, dict(qoe_total or {}), {j: list(models[j]) for j in models})


# --------------------------------------------------------------------------
# scheduled runs
# --------------------------------------------------------------------------


def _task_timeline(scenario, j, R, U, plan, links):
    """Events of one task's periods plus the realized arrival times."""
    bd = period_breakdown(scenario, j, R, U, plan, links)
    I, G = R.shape
    start = np.cumsum(bd.total, axis=1) - bd.total
    events = []
    for i in range(I):
        for g in range(G):
            t = start[i, g]
            if R[i, g]:
                t += bd.idle[i, g]
                events.append(Event(t, "downlink_start", i, j, g))
                t += bd.downlink[i, g]
                events.append(Event(t, "downlink_end", i, j, g, bs_energy=bd.downlink_energy[i, g]))
                t += bd.compute[i, g]
                events.append(Event(t, "compute_end", i, j, g, device_energy=bd.compute_energy[i, g]))
            if U[i, g]:
                t += bd.uplink[i, g]
                events.append(Event(t, "uplink_end", i, j, g, g, device_energy=bd.uplink_energy[i, g]))
    return events, start, bd


def run(scenario, schedules, plans, losses, partitions, seed: int, heldout=None, initial_models=None,
        check: bool = True, order_constraint: bool = True):
    """Execute scheduled rounds of every task.

    ``schedules`` maps task index to :class:`ScheduleTensor`, ``plans`` to
    :class:`~mafl.sca.ResourcePlan`.  Returns ``(EventLog, RunMetrics,
    traces)`` with ``traces[(j, i, g)]`` the SGD record of the round device
    ``i`` started from ``w^(g)``.  Raises :class:`SimulationError` when an
    upload lands out of its scheduled order or a device downloads a model
    that does not exist yet.  ``check`` runs the schedule checker first;
    ``order_constraint=False`` exempts the period-sum upload-order rule
    from it (the realized arrival order is verified either way).
    """
    events = []
    traces = {}
    models = {}
    qoe = {}
    for j, t in enumerate(scenario.tasks):
        tensor = schedules[j]
        R = np.asarray(tensor.receive)
        U = np.asarray(tensor.upload)
        G = t.num_aggregations
        plan = plans[j]
        links = link_table(scenario, j)
        task_events, start, bd = _task_timeline(scenario, j, R, U, plan, links)
        if check:
            lim = ScheduleLimits(t.staleness_limit, G)
            bad = [v for v in check_schedule(R, U, bd.total, lim, bd.idle)
                   if order_constraint or v.constraint != "upload_order"]
            if bad:
                raise SimulationError(f"task {j}: schedule rejected: {bad[0]}")
        end = start + bd.total
        pairs, _ = round_pairs(R, U)
        owner = {gp: (i, g) for i, g, gp in pairs}
        if sorted(owner) != list(range(G)):
            raise SimulationError(f"task {j}: aggregations without a scheduled upload")
        arrival = np.array([end[owner[gp][0], gp] for gp in range(G)])
        for gp in range(1, G):
            if arrival[gp] < arrival[gp - 1] - TIME_TOL * max(1.0, arrival[gp - 1]):
                i0, i1 = owner[gp - 1][0], owner[gp][0]
                raise SimulationError(
                    f"task {j}: upload of device {i1} for aggregation {gp} lands at {arrival[gp]:.9g} s, "
                    f"before device {i0}'s upload for aggregation {gp - 1} at {arrival[gp - 1]:.9g} s")
        for i in range(R.shape[0]):
            for g in np.flatnonzero(R[i]):
                if g == 0:
                    continue
                t_dl = start[i, g] + bd.idle[i, g]
                if t_dl < arrival[g - 1] - TIME_TOL * max(1.0, arrival[g - 1]):
                    raise SimulationError(
                        f"task {j}: device {i} downloads w^({g}) at {t_dl:.9g} s before it exists "
                        f"({arrival[g - 1]:.9g} s)")
        # model evolution, in aggregation order
        loss = losses[j]
        dim = loss.dim(partitions[j][0])
        w = initial_models[j] if initial_models is not None else ModelState(np.zeros(dim), j, 0)
        hist = [w]
        for gp in range(G):
            i, g = owner[gp]
            if gp - g > t.staleness_limit:
                raise SimulationError(f"task {j}: round ({i}, {g}, {gp}) exceeds the staleness limit")
            local, tr = local_train(hist[g], int(plan.sgd_iters[i, g]), int(plan.batch_size[i, g]),
                                    t.learning_rate_schedule[g], t.reg_weight, loss, partitions[j][i],
                                    [int(seed), j, i, g])
            traces[(j, i, g)] = tr
            hist.append(aggregate(hist[-1], local, t.agg_weight))
            task_events.append(Event(arrival[gp], "aggregate", -1, j, g, gp))
        models[j] = hist
        qoe[j] = bd.total.sum(axis=1) + np.asarray(plan.final_idle, float)
        events.extend(task_events)
    elog = EventLog.from_events(events, scenario.num_devices)
    held = heldout if heldout is not None else [p[0] for p in partitions]
    metrics = collect_metrics(elog, models, losses, partitions, held, qoe)
    return elog, metrics, traces


def model_history(scenario, schedules, traces, losses, partitions, initial_models=None):
    """Global models ``w^(0) .. w^(G)`` of each task rebuilt from SGD traces."""
    out = {}
    for j, t in enumerate(scenario.tasks):
        dim = losses[j].dim(partitions[j][0])
        w = initial_models[j] if initial_models is not None else ModelState(np.zeros(dim), j, 0)
        hist = [w]
        for i, g, gp in sorted(schedules[j].triples, key=lambda x: x[2]):
            local = ModelState(traces[(j, i, g)].weights[-1], j)
            hist.append(aggregate(hist[-1], local, t.agg_weight))
        out[j] = hist
    return out


# --------------------------------------------------------------------------
# baselines
# --------------------------------------------------------------------------


def _baseline_plans(scenario):
    """Mid-range resources, or the lower ends when mid-range breaks an energy budget."""
    from .sca import default_plan

    return {j: default_plan(scenario, j, "mid") for j in range(scenario.num_tasks)}


def run_sync(scenario, plans, losses, partitions, seed: int, heldout=None):
    """Synchronous FedAvg: every device trains each round, the server waits for all.

    Round ``g`` lasts the slowest device's downlink, compute and uplink time;
    the new global model is the plain average of the local models.
    """
    events = []
    models = {}
    I = scenario.num_devices
    for j, t in enumerate(scenario.tasks):
        G = t.num_aggregations
        ones = np.ones((I, G), dtype=int)
        plan = plans[j].copy()
        plan.idle = np.zeros((I, G))
        bd = period_breakdown(scenario, j, ones, ones, plan)
        loss = losses[j]
        w = ModelState(np.zeros(loss.dim(partitions[j][0])), j, 0)
        hist = [w]
        clock = 0.0
        for g in range(G):
            locals_ = []
            for i in range(I):
                tt = clock
                events.append(Event(tt, "downlink_start", i, j, g))
                tt += bd.downlink[i, g]
                events.append(Event(tt, "downlink_end", i, j, g, bs_energy=bd.downlink_energy[i, g]))
                tt += bd.compute[i, g]
                events.append(Event(tt, "compute_end", i, j, g, device_energy=bd.compute_energy[i, g]))
                tt += bd.uplink[i, g]
                events.append(Event(tt, "uplink_end", i, j, g, g, device_energy=bd.uplink_energy[i, g]))
                local, _ = local_train(hist[g], int(plan.sgd_iters[i, g]), int(plan.batch_size[i, g]),
                                       t.learning_rate_schedule[g], t.reg_weight, loss, partitions[j][i],
                                       [int(seed), j, i, g])
                locals_.append(local.weights)
            clock += float(np.max(bd.downlink[:, g] + bd.compute[:, g] + bd.uplink[:, g]))
            hist.append(ModelState(np.mean(locals_, axis=0), j, g + 1))
            events.append(Event(clock, "aggregate", -1, j, g, g))
        models[j] = hist
    elog = EventLog.from_events(events, I)
    held = heldout if heldout is not None else [p[0] for p in partitions]
    return elog, collect_metrics(elog, models, losses, partitions, held)


def random_idle_order(scenario, j, plan, rng, idle_scale: float = 1.0):
    """Free-running asynchronous order with random idle times.

    Every device loops idle, download, train, upload; the server aggregates
    each arrival.  Idle times are uniform on ``[0, idle_scale * d]`` with
    ``d`` the device's busy time for one round.  Rounds that would land
    after the last aggregation are never started.

    Returns ``(R, U, base_idle, rounds)`` with ``rounds`` the ``(i, g, g', idle)`` tuples.
    """
    t = scenario.tasks[j]
    I, G = scenario.num_devices, t.num_aggregations
    ones = np.ones((I, G), dtype=int)
    p = plan.copy()
    p.idle = np.zeros((I, G))
    bd = period_breakdown(scenario, j, ones, ones, p)
    busy = bd.downlink + bd.compute + bd.uplink
    queue = []  # (time, order, kind, device, payload)
    order = itertools.count()
    for i in range(I):
        idle = rng.uniform(0.0, idle_scale * float(busy[i].mean()))
        heapq.heappush(queue, (idle, 0, next(order), i, idle))
    landed = 0
    rounds = []
    while landed < G:
        now, kind, _, i, payload = heapq.heappop(queue)
        if kind == 0:
            # download of the current global model; the round lands after its busy time
            g = landed
            heapq.heappush(queue, (now + busy[i, g], 1, next(order), i, (g, payload)))
        else:
            g, idle = payload
            rounds.append((i, g, landed, idle))
            landed += 1
            nxt = rng.uniform(0.0, idle_scale * float(busy[i].mean()))
            heapq.heappush(queue, (now + nxt, 0, next(order), i, nxt))
    R = np.zeros((I, G), dtype=np.int8)
    U = np.zeros((I, G), dtype=np.int8)
    base = np.zeros((I, G))
    for i, g, gp, idle in rounds:
        R[i, g] = 1
        U[i, gp] = 1
        base[i, g] = idle
    return R, U, base, rounds


def run_baseline(scenario, mode: str, losses, partitions, seed: int, heldout=None, constants=None,
                 config=None, idle_scale: float = 1.0):
    """Conventional synchronous FedAvg or asynchronous FL with random idle times.

    ``async_random_idle`` draws idle times, lets the devices run freely to
    obtain an aggregation order, fixes that order as the schedule (with the
    staleness limit raised to the realized staleness), optimizes CPU
    frequency, SGD count and batch size for it, and re-times it keeping the
    drawn idle times as a floor.  The free-running order generally breaks
    the period-sum upload-order rule, so that rule is waived for this
    baseline; arrivals still have to land in the fixed order.  Returns ``(EventLog, RunMetrics, info)``.
    """
    from . import sca

    plans = _baseline_plans(scenario)
    if mode == "sync_fedavg":
        elog, metrics = run_sync(scenario, plans, losses, partitions, seed, heldout)
        return elog, metrics, {"plans": plans}
    if mode != "async_random_idle":
        raise ValueError(f"unknown baseline mode {mode!r}")
    rng = np.random.default_rng([int(seed), 4242])
    tasks = list(scenario.tasks)
    schedules, base = {}, {}
    start_plans = {}
    for j, t in enumerate(scenario.tasks):
        plan = plans[j]
        R, U, idle, rounds = random_idle_order(scenario, j, plan, rng, idle_scale)
        K = max(gp - g for _, g, gp, _ in rounds)
        tasks[j] = dataclasses.replace(t, staleness_limit=max(int(K), 0))
        schedules[j] = (R, U)
        base[j] = idle
    sc_b = dataclasses.replace(scenario, tasks=tuple(tasks))
    if constants is not None:
        res_plans, _ = sca.optimize_resources(sc_b, constants, schedules, config or sca.SCAConfig(),
                                              base_idle=base, order_constraint=False)
    else:
        last = None
        for level in ("mid", "low"):
            try:
                res_plans = sca.finalize_plans(sc_b, schedules, {j: sca.default_plan(sc_b, j, level)
                                                                for j in range(sc_b.num_tasks)},
                                               base_idle=base, order_constraint=False)
                break
            except sca.OptimizerError as exc:
                last = exc
        else:
            raise last
    tensors = {j: pair_rounds(R, U, ScheduleLimits(sc_b.tasks[j].staleness_limit, sc_b.tasks[j].num_aggregations))
               for j, (R, U) in schedules.items()}
    elog, metrics, traces = run(sc_b, tensors, res_plans, losses, partitions, seed, heldout,
                                order_constraint=False)
    return elog, metrics, {"scenario": sc_b, "schedules": tensors, "plans": res_plans, "traces": traces}
