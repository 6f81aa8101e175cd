"""Scenario data model, validation, datasets and non-iid partitioning.

Everything in this module is immutable once built.  A :class:`Scenario`
bundles the devices, the tasks, the radio channel and the weights of the
joint scheduling objective.  Scenarios are usually read from a TOML file
(see :func:`load_scenario`); the README documents the schema.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

try:  # Python >= 3.11
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10 only
    import tomli as _toml


class ScenarioError(ValueError):
    """Raised when a scenario violates one of its invariants."""

    def __init__(self, violations: Sequence["Violation"]):
        self.violations = list(violations)
        text = "; ".join(str(v) for v in self.violations)
        super().__init__(f"invalid scenario: {text}")


@dataclass(frozen=True)
class Violation:
    """One failed invariant, located by a dotted field path."""

    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


@dataclass(frozen=True)
class ChannelParams:
    """Large-scale path loss and noise parameters of the radio channel.

    Attributes:
        pathloss_ref_db: Path loss at the reference distance, in dB.
        ref_distance: Reference distance in metres.
        pathloss_exponent: Path loss exponent.
        noise_density: Noise power spectral density in W/Hz.
        fading_seed: Seed of the counter-based fading generator.
    """

    pathloss_ref_db: float = -30.0
    ref_distance: float = 1.0
    pathloss_exponent: float = 3.0
    noise_density: float = 3.98e-21
    fading_seed: int = 0


@dataclass(frozen=True)
class TaskSpec:
    """Static description of one learning task.

    ``learning_rate_schedule`` holds one step size per aggregation index.
    ``loss`` names the shipped loss model (``"quadratic"`` or ``"logistic"``).
    """

    task_id: int
    model_dim: int
    bits_per_param: int
    num_aggregations: int
    agg_weight: float
    learning_rate_schedule: tuple[float, ...]
    reg_weight: float = 1.0
    importance: float = 1.0
    energy_weight: float = 1.0
    qoe_window: float = 1e4
    staleness_limit: int = 5
    loss: str = "logistic"

    @property
    def eta_min(self) -> float:
        return float(min(self.learning_rate_schedule))

    @property
    def eta_max(self) -> float:
        return float(max(self.learning_rate_schedule))


@dataclass(frozen=True)
class DeviceProfile:
    """Hardware and radio description of one edge device.

    Per-task quantities (``cycles_per_sample``, ``dataset_sizes``) are tuples
    indexed by task position in the scenario.
    """

    device_id: int
    cycles_per_sample: tuple[float, ...]
    chipset_capacitance: float
    cpu_freq_bounds: tuple[float, float]
    uplink_power: float
    uplink_bandwidth: float
    downlink_bandwidth: float
    energy_budget: float
    position: tuple[float, float]
    dataset_sizes: tuple[int, ...]

    @property
    def distance(self) -> float:
        return float(math.hypot(*self.position))


@dataclass(frozen=True)
class DatasetSpec:
    """How to obtain the pooled dataset of a task.

    ``generator`` is ``"blobs"`` for Gaussian blobs or ``"csv"`` for a file
    with feature columns followed by an integer label column.
    """

    generator: str = "blobs"
    points: int = 1000
    features: int = 10
    classes: int = 10
    seed: int = 0
    spread: float = 1.0
    separation: float = 2.0
    path: str = ""


@dataclass(frozen=True)
class Scenario:
    """The full experiment description."""

    devices: tuple[DeviceProfile, ...]
    tasks: tuple[TaskSpec, ...]
    channel: ChannelParams = field(default_factory=ChannelParams)
    objective_weights: tuple[float, float, float] = (1e-9, 1.0, 1.0)
    downlink_power: float = 0.1
    sgd_count_bounds: tuple[tuple[int, int], ...] = ()
    seed: int = 0
    datasets: tuple[DatasetSpec, ...] = ()
    max_labels_per_device: int = 4
    heldout_fraction: float = 0.2

    @property
    def num_devices(self) -> int:
        return len(self.devices)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix with integer labels in ``[0, label_count)``."""

    features: np.ndarray
    labels: np.ndarray
    label_count: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.labels, dtype=int).reshape(-1)
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=int)
        return LabeledDataset(self.features[idx], self.labels[idx], self.label_count)


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------


def _positive(v, path, out, strict=True):
    ok = v > 0 if strict else v >= 0
    if not (np.isfinite(v) and ok):
        out.append(Violation(path, "must be > 0" if strict else "must be >= 0"))


def validate_scenario(scenario: Scenario) -> list[Violation]:
    """Check every invariant of the scenario types.

    Returns the list of violations (empty when the scenario is valid).
    Values are never clamped.
    """
    out: list[Violation] = []
    if not scenario.devices:
        out.append(Violation("devices", "must be non-empty"))
    if not scenario.tasks:
        out.append(Violation("tasks", "must be non-empty"))
    num_tasks = len(scenario.tasks)

    for k, t in enumerate(scenario.tasks):
        p = f"tasks.{k}"
        if not (0.0 < t.agg_weight < 1.0):
            out.append(Violation(f"{p}.agg_weight", "agg_weight must be in open interval (0,1)"))
        if t.num_aggregations < 1:
            out.append(Violation(f"{p}.num_aggregations", "must be >= 1"))
        if t.model_dim < 1:
            out.append(Violation(f"{p}.model_dim", "must be >= 1"))
        if t.bits_per_param < 1:
            out.append(Violation(f"{p}.bits_per_param", "must be >= 1"))
        lr = np.asarray(t.learning_rate_schedule, dtype=float)
        if lr.size != t.num_aggregations:
            out.append(Violation(f"{p}.learning_rate_schedule",
                                 f"needs {t.num_aggregations} entries, got {lr.size}"))
        if lr.size and not np.all(lr > 0):
            out.append(Violation(f"{p}.learning_rate_schedule", "all step sizes must be > 0"))
        _positive(t.reg_weight, f"{p}.reg_weight", out, strict=False)
        _positive(t.importance, f"{p}.importance", out, strict=False)
        _positive(t.energy_weight, f"{p}.energy_weight", out, strict=False)
        _positive(t.qoe_window, f"{p}.qoe_window", out)
        if t.staleness_limit < 0:
            out.append(Violation(f"{p}.staleness_limit", "must be >= 0"))
        if t.loss not in ("quadratic", "logistic"):
            out.append(Violation(f"{p}.loss", "must be 'quadratic' or 'logistic'"))

    for k, d in enumerate(scenario.devices):
        p = f"devices.{k}"
        if len(d.cycles_per_sample) != num_tasks:
            out.append(Violation(f"{p}.cycles_per_sample", "needs one entry per task"))
        for j, a in enumerate(d.cycles_per_sample):
            _positive(a, f"{p}.cycles_per_sample.{j}", out)
        _positive(d.chipset_capacitance, f"{p}.chipset_capacitance", out)
        fmin, fmax = d.cpu_freq_bounds
        _positive(fmin, f"{p}.cpu_freq_bounds.0", out)
        _positive(fmax, f"{p}.cpu_freq_bounds.1", out)
        if fmin > fmax:
            out.append(Violation(f"{p}.cpu_freq_bounds", "f_min must not exceed f_max"))
        _positive(d.uplink_power, f"{p}.uplink_power", out)
        _positive(d.uplink_bandwidth, f"{p}.uplink_bandwidth", out)
        _positive(d.downlink_bandwidth, f"{p}.downlink_bandwidth", out)
        _positive(d.energy_budget, f"{p}.energy_budget", out)
        if len(d.dataset_sizes) != num_tasks:
            out.append(Violation(f"{p}.dataset_sizes", "needs one entry per task"))
        for j, n in enumerate(d.dataset_sizes):
            if n < 1:
                out.append(Violation(f"{p}.dataset_sizes.{j}", "must be >= 1"))

    c = scenario.objective_weights
    if len(c) != 3:
        out.append(Violation("objective_weights", "needs three entries (c1, c2, c3)"))
    for k, v in enumerate(c):
        _positive(v, f"objective_weights.{k}", out, strict=False)
    _positive(scenario.downlink_power, "downlink_power", out)
    if len(scenario.sgd_count_bounds) != num_tasks:
        out.append(Violation("sgd_count_bounds", "needs one (e_min, e_max) pair per task"))
    for j, (emin, emax) in enumerate(scenario.sgd_count_bounds):
        if emin < 1:
            out.append(Violation(f"sgd_count_bounds.{j}", "e_min must be >= 1"))
        if emax < emin:
            out.append(Violation(f"sgd_count_bounds.{j}", "e_max must be >= e_min"))
    ch = scenario.channel
    _positive(ch.ref_distance, "channel.ref_distance", out)
    _positive(ch.noise_density, "channel.noise_density", out)
    if scenario.max_labels_per_device < 1:
        out.append(Violation("max_labels_per_device", "must be >= 1"))
    if not (0.0 <= scenario.heldout_fraction < 1.0):
        out.append(Violation("heldout_fraction", "must be in [0, 1)"))
    if scenario.datasets and len(scenario.datasets) != num_tasks:
        out.append(Violation("datasets", "needs one dataset per task"))
    return out


def require_valid(scenario: Scenario) -> Scenario:
    """Return ``scenario`` unchanged or raise :class:`ScenarioError`."""
    problems = validate_scenario(scenario)
    if problems:
        raise ScenarioError(problems)
    return scenario


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


def make_blobs(points: int, features: int, classes: int, seed: int,
               spread: float = 1.0, separation: float = 2.0) -> LabeledDataset:
    """Gaussian blobs with balanced classes.

    Class centres are drawn from N(0, separation^2 I); points are the centre
    plus N(0, spread^2 I) noise.
    """
    rng = np.random.default_rng(seed)
    centres = rng.normal(0.0, separation, size=(classes, features))
    labels = np.arange(points) % classes
    rng.shuffle(labels)
    x = centres[labels] + rng.normal(0.0, spread, size=(points, features))
    return LabeledDataset(x, labels, classes)


def load_csv_dataset(path, label_column: str | int = -1) -> LabeledDataset:
    """Read a CSV with feature columns and one integer label column.

    A header row is detected automatically.  ``label_column`` may be a header
    name or a column position.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = None
    try:
        [float(v) for v in rows[0]]
    except ValueError:
        header, rows = rows[0], rows[1:]
    data = np.array([[float(v) for v in r] for r in rows if r], dtype=float)
    if isinstance(label_column, str):
        if header is None:
            raise ValueError("label column given by name but file has no header")
        col = header.index(label_column)
    else:
        col = label_column % data.shape[1]
    labels = data[:, col].astype(int)
    feats = np.delete(data, col, axis=1)
    if np.any(labels < 0):
        raise ValueError("labels must be non-negative")
    return LabeledDataset(feats, labels, int(labels.max()) + 1)


def make_dataset(spec: DatasetSpec, base_dir: Path | None = None) -> LabeledDataset:
    """Build the pooled dataset described by ``spec``."""
    if spec.generator == "blobs":
        return make_blobs(spec.points, spec.features, spec.classes, spec.seed,
                          spec.spread, spec.separation)
    if spec.generator == "csv":
        p = Path(spec.path)
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        return load_csv_dataset(p)
    raise ValueError(f"unknown dataset generator {spec.generator!r}")


def split_heldout(data: LabeledDataset, fraction: float, seed: int):
    """Deterministically carve a held-out set; returns ``(train, heldout)``."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    n_out = int(round(fraction * len(data)))
    return data.subset(np.sort(order[n_out:])), data.subset(np.sort(order[:n_out]))


def partition_non_iid(dataset: LabeledDataset, num_devices: int,
                      max_labels_per_device: int, seed: int) -> list[LabeledDataset]:
    """Split ``dataset`` into disjoint, label-skewed device partitions.

    Labels are first spread over devices in sorted order (label ``k`` goes to
    device ``k mod num_devices``) so every label is held by some device.  Each
    device then draws extra labels at random until it holds a random number of
    labels not exceeding ``max_labels_per_device``.  Points of every label are
    shuffled and dealt round-robin among the devices holding that label.
    """
    if max_labels_per_device < 1:
        raise ValueError("max_labels_per_device must be >= 1")
    if num_devices < 1:
        raise ValueError("num_devices must be >= 1")
    if len(dataset) < num_devices:
        raise ValueError("dataset has fewer points than devices")
    present = np.unique(dataset.labels)
    if present.size < 1:
        raise ValueError("insufficient label diversity")
    if num_devices * max_labels_per_device < present.size:
        raise ValueError("insufficient label diversity: "
                         f"{present.size} labels cannot be covered by {num_devices} devices "
                         f"holding at most {max_labels_per_device} labels each")
    rng = np.random.default_rng(seed)
    holds: list[set[int]] = [set() for _ in range(num_devices)]
    for k, lab in enumerate(present):
        holds[k % num_devices].add(int(lab))
    for dev in range(num_devices):
        room = min(max_labels_per_device, present.size)
        target = int(rng.integers(max(len(holds[dev]), 1), room + 1))
        spare = [int(l) for l in rng.permutation(present) if int(l) not in holds[dev]]
        holds[dev].update(spare[: max(0, target - len(holds[dev]))])

    members: list[list[int]] = [[] for _ in range(num_devices)]
    for lab in present:
        owners = [d for d in range(num_devices) if int(lab) in holds[d]]
        owners = [owners[k] for k in rng.permutation(len(owners))]
        idx = np.flatnonzero(dataset.labels == lab)
        idx = idx[rng.permutation(idx.size)]
        for pos, point in enumerate(idx):
            members[owners[pos % len(owners)]].append(int(point))
    parts = []
    for dev in range(num_devices):
        if not members[dev]:
            raise ValueError(f"partition would leave device {dev} empty")
        parts.append(dataset.subset(np.sort(np.asarray(members[dev]))))
    return parts


# --------------------------------------------------------------------------
# configuration files
# --------------------------------------------------------------------------


def _coerce(text: str):
    low = text.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    if text.startswith("[") and text.endswith("]"):
        return [_coerce(t) for t in text[1:-1].split(",") if t.strip()]
    return text


def apply_overrides(config: dict, overrides: Sequence[str]) -> dict:
    """Apply ``KEY=VALUE`` overrides with dotted paths to a config mapping.

    Integer path components index into lists, e.g. ``tasks.0.importance=1e7``.
    Returns a modified deep copy.
    """
    out = copy.deepcopy(config)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node: Any = out
        for part in parts[:-1]:
            node = node[int(part)] if isinstance(node, list) else node.setdefault(part, {})
        last = parts[-1]
        if isinstance(node, list):
            node[int(last)] = _coerce(value)
        else:
            node[last] = _coerce(value)
    return out


def read_config(path) -> dict:
    with open(path, "rb") as fh:
        return _toml.load(fh)


def _draw(value, rng, size=None):
    """Scalars pass through; ``[lo, hi]`` pairs are sampled uniformly."""
    if isinstance(value, (list, tuple)) and len(value) == 2:
        lo, hi = float(value[0]), float(value[1])
        return rng.uniform(lo, hi, size=size)
    if size is None:
        return float(value)
    return np.full(size, float(value))


def disk_positions(count: int, radius: float, seed: int) -> np.ndarray:
    """Points uniformly distributed in a disk centred on the base station."""
    rng = np.random.default_rng(seed)
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, count))
    phi = rng.uniform(0.0, 2 * np.pi, count)
    return np.column_stack([r * np.cos(phi), r * np.sin(phi)])


def scenario_from_dict(config: Mapping, base_dir: Path | None = None) -> Scenario:
    """Build a :class:`Scenario` from a parsed configuration mapping.

    Missing per-device dataset sizes default to an equal split of each task's
    pooled training set; :func:`mafl.simulator.prepare_data` replaces them by
    the realised partition sizes.
    """
    seed = int(config.get("seed", 0))
    rng = np.random.default_rng(seed)
    tasks_cfg = list(config.get("tasks", []))
    datasets = []
    tasks = []
    for k, tc in enumerate(tasks_cfg):
        g = int(tc["num_aggregations"])
        lr = tc.get("learning_rate", 0.05)
        sched = tuple(float(v) for v in lr) if isinstance(lr, list) else (float(lr),) * g
        ds = tc.get("dataset", {})
        dspec = DatasetSpec(**{f.name: ds[f.name] for f in dataclasses.fields(DatasetSpec)
                               if f.name in ds})
        datasets.append(dspec)
        loss = tc.get("loss", "logistic")
        if "model_dim" in tc:
            dim = int(tc["model_dim"])
        elif loss == "logistic":
            dim = (dspec.features + 1) * dspec.classes
        else:
            dim = dspec.features
        tasks.append(TaskSpec(
            task_id=int(tc.get("task_id", k)),
            model_dim=dim,
            bits_per_param=int(tc.get("bits_per_param", 4096)),
            num_aggregations=g,
            agg_weight=float(tc.get("agg_weight", 0.5)),
            learning_rate_schedule=sched,
            reg_weight=float(tc.get("reg_weight", 1.0)),
            importance=float(tc.get("importance", 1.0)),
            energy_weight=float(tc.get("energy_weight", 1.0)),
            qoe_window=float(tc.get("qoe_window", 1e4)),
            staleness_limit=int(tc.get("staleness_limit", 5)),
            loss=loss,
        ))
    num_tasks = len(tasks)

    dev_cfg = dict(config.get("devices", {}))
    explicit = list(config.get("device", []))
    count = int(dev_cfg.get("count", len(explicit)))
    radius = float(dev_cfg.get("radius", 25.0))
    pos = disk_positions(count, radius, seed + 1)
    # keep devices outside the reference distance of the path-loss model
    d0 = float(config.get("channel", {}).get("ref_distance", 1.0))
    norms = np.maximum(np.hypot(pos[:, 0], pos[:, 1]), 1e-12)
    pos = pos * (np.maximum(norms, d0) / norms)[:, None]
    heldout = float(config.get("heldout_fraction", 0.2))
    pooled = [ds.points if ds.generator == "blobs" else count for ds in datasets]
    devices = []
    for i in range(count):
        entry = dict(dev_cfg)
        if i < len(explicit):
            entry.update(explicit[i])
        if "cycles_per_sample_by_task" in entry:
            cycles = tuple(float(c) for c in entry["cycles_per_sample_by_task"])
        else:
            cyc = entry.get("cycles_per_sample", [5e2, 5e3])
            cycles = tuple(float(_draw(cyc, rng)) for _ in range(num_tasks))
        if "dataset_sizes" in entry:
            sizes = tuple(int(s) for s in entry["dataset_sizes"])
        else:
            sizes = tuple(max(1, int(n * (1 - heldout)) // count) for n in pooled)
        position = tuple(float(v) for v in entry.get("position", pos[i]))
        devices.append(DeviceProfile(
            device_id=i,
            cycles_per_sample=cycles,
            chipset_capacitance=float(_draw(entry.get("chipset_capacitance", [2e-22, 2e-19]), rng)),
            cpu_freq_bounds=(float(entry.get("cpu_freq_min", 1e8)),
                             float(entry.get("cpu_freq_max", 2e9))),
            uplink_power=float(entry.get("uplink_power", 0.25)),
            uplink_bandwidth=float(entry.get("uplink_bandwidth", 1e6)),
            downlink_bandwidth=float(entry.get("downlink_bandwidth", 1e5)),
            energy_budget=float(entry.get("energy_budget", 1e3)),
            position=position,
            dataset_sizes=sizes,
        ))
    ch = config.get("channel", {})
    channel = ChannelParams(**{f.name: ch[f.name] for f in dataclasses.fields(ChannelParams)
                               if f.name in ch})
    bounds = config.get("sgd_count_bounds")
    if bounds is None:
        bounds = [[tc.get("e_min", 1), tc.get("e_max", 10)] for tc in tasks_cfg]
    return Scenario(
        devices=tuple(devices),
        tasks=tuple(tasks),
        channel=channel,
        objective_weights=tuple(float(c) for c in config.get("objective_weights", (1e-9, 1, 1))),
        downlink_power=float(config.get("downlink_power", 0.1)),
        sgd_count_bounds=tuple((int(a), int(b)) for a, b in bounds),
        seed=seed,
        datasets=tuple(datasets),
        max_labels_per_device=int(config.get("max_labels_per_device", 4)),
        heldout_fraction=heldout,
    )


def load_scenario(path, overrides: Sequence[str] = ()) -> Scenario:
    """Read a TOML scenario file, apply dotted overrides, build the scenario."""
    path = Path(path)
    cfg = apply_overrides(read_config(path), overrides)
    return scenario_from_dict(cfg, base_dir=path.parent)


def with_dataset_sizes(scenario: Scenario, sizes: np.ndarray) -> Scenario:
    """Copy of ``scenario`` with ``sizes[i, j]`` samples at device i for task j."""
    devices = tuple(dataclasses.replace(d, dataset_sizes=tuple(int(s) for s in sizes[i]))
                    for i, d in enumerate(scenario.devices))
    return dataclasses.replace(scenario, devices=devices)
