"""Device scheduling: reception/upload indicator matrices and the tensors built from them.

Index conventions.  For one task with ``G`` aggregations, ``R[i, g] = 1`` when
device ``i`` downloads global model ``w^(g)`` and ``U[i, g] = 1`` when its
upload is the one applied at aggregation ``g`` (turning ``w^(g)`` into
``w^(g+1)``).  A triple ``(i, g, g')`` of a schedule tensor says device ``i``
trained from ``w^(g)`` and its result was applied at aggregation ``g'``.

Two constructions are provided:

* :func:`build_tensor` evaluates the closed-form product
  ``U[g] * R[g'] * prod_{g<k<g'} (1 - U[k])`` term by term.
* :func:`pair_rounds` pairs each upload with the reception that started its
  local round, ``R[g] * U[g'] * prod_{g<=k<g'} (1 - U[k]) * prod_{g<k<=g'} (1 - R[k])``.
  This is the tensor the simulator, the bound and the optimizer consume.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ScheduleLimits:
    staleness_limit: int
    num_aggregations: int

    def __post_init__(self):
        if int(self.staleness_limit) < 0:
            raise ValueError("staleness limit must be >= 0")
        if int(self.num_aggregations) < 1:
            raise ValueError("need at least one aggregation")


def _as_binary(mat, name):
    a = np.asarray(mat)
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-D [devices x aggregations] matrix")
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{name} must be binary")
    out = a.astype(np.int8)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ScheduleTensor:
    """Reception/upload matrices of one task plus the sparse triples derived from them."""

    receive: np.ndarray
    upload: np.ndarray
    triples: tuple = field(default=())
    limits: ScheduleLimits | None = None

    @property
    def num_devices(self) -> int:
        return int(self.receive.shape[0])

    @property
    def num_aggregations(self) -> int:
        return int(self.receive.shape[1])

    def dense(self) -> np.ndarray:
        """``X[i, g, g']`` as a dense 0/1 array."""
        I, G = self.receive.shape
        X = np.zeros((I, G, G), dtype=np.int8)
        for i, g, gp in self.triples:
            X[i, g, gp] = 1
        return X

    def uploader(self, g_prime: int):
        """The ``(device, g)`` pair applied at aggregation ``g_prime`` or None."""
        for i, g, gp in self.triples:
            if gp == g_prime:
                return i, g
        return None

    def rounds_of(self, device: int):
        return [(g, gp) for i, g, gp in self.triples if i == device]


def tensor_indicator(R, U, staleness_limit: int) -> np.ndarray:
    """Dense ``[devices x G x G]`` boolean form of the closed-form product.

    Every device row is handled independently, so a stack of unrelated rows
    can be evaluated in one call.
    """
    R = np.asarray(R).astype(bool, copy=False)
    U = np.asarray(U).astype(bool, copy=False)
    if R.shape != U.shape or R.ndim != 2:
        raise ValueError("R and U must be 2-D matrices of the same shape")
    I, G = R.shape
    K = int(staleness_limit)
    # device-last layout keeps every column operation contiguous
    Rt = np.ascontiguousarray(R.T)
    Ut = np.ascontiguousarray(U.T)
    X = np.zeros((G, G, I), dtype=bool)
    for g in range(G):
        clear = Ut[g].copy()  # U[g] times the running product of (1 - U[k]), g < k < g'
        for gp in range(g, min(G, g + K + 1)):
            if gp >= g + 2:
                clear &= ~Ut[gp - 1]
            np.logical_and(clear, Rt[gp], out=X[g, gp])
    return X.transpose(2, 0, 1)


def build_tensor(R, U, limits: ScheduleLimits) -> ScheduleTensor:
    """Closed-form tensor ``U[g] R[g'] prod_{k=g+1}^{g'-1} (1 - U[k])`` for ``0 <= g'-g <= K``."""
    R = _as_binary(R, "R")
    U = _as_binary(U, "U")
    if R.shape != U.shape:
        raise ValueError("R and U must have the same shape")
    X = tensor_indicator(R, U, limits.staleness_limit)
    triples = tuple((int(i), int(g), int(gp)) for i, g, gp in np.argwhere(X))
    return ScheduleTensor(R, U, triples, limits)


def round_pairs(R, U):
    """Walk each device's row and pair uploads with the reception that started them.

    Returns ``(pairs, orphans)`` where ``pairs`` holds ``(i, g, g')`` for every
    upload preceded by a reception (no own upload in between, the latest
    reception wins) and ``orphans`` holds ``(i, g')`` for uploads with no
    pending reception.
    """
    R = np.asarray(R)
    U = np.asarray(U)
    pairs, orphans = [], []
    for i in range(R.shape[0]):
        pending = None
        for g in range(R.shape[1]):
            if R[i, g]:
                pending = g
            if U[i, g]:
                if pending is None:
                    orphans.append((i, g))
                else:
                    pairs.append((i, pending, g))
                    pending = None
    return pairs, orphans


def pair_rounds(R, U, limits: ScheduleLimits) -> ScheduleTensor:
    """Tensor of local rounds: reception at ``g`` paired with the upload at ``g'``.

    Pairs whose gap exceeds the staleness limit are dropped here; the
    schedule checker reports them.
    """
    R = _as_binary(R, "R")
    U = _as_binary(U, "U")
    if R.shape != U.shape:
        raise ValueError("R and U must have the same shape")
    K = int(limits.staleness_limit)
    pairs, _ = round_pairs(R, U)
    triples = tuple(sorted((p for p in pairs if p[2] - p[1] <= K), key=lambda t: (t[2], t[0], t[1])))
    return ScheduleTensor(R, U, triples, limits)


def pairing_weight(R, U, i, g, gp):
    """Product form of the pairing indicator; works on floats or dual numbers."""
    val = R[i][g] * U[i][gp]
    for k in range(g, gp):
        val = val * (1 - U[i][k])
    for k in range(g + 1, gp + 1):
        val = val * (1 - R[i][k])
    return val


def staleness(tensor: ScheduleTensor) -> int:
    """Largest ``g' - g`` over the scheduled triples."""
    if not tensor.triples:
        raise ValueError("no scheduled uploads")
    return max(gp - g for _, g, gp in tensor.triples)


def round_robin(num_devices: int, num_aggregations: int):
    """Device ``g mod I`` downloads ``w^(g)`` and is the one applied at ``g``."""
    R = np.zeros((num_devices, num_aggregations), dtype=np.int8)
    for g in range(num_aggregations):
        R[g % num_devices, g] = 1
    return R, R.copy()


def schedule_from_triples(triples, num_devices, num_aggregations):
    """Rebuild ``(R, U)`` from round triples ``(i, g, g')``."""
    R = np.zeros((num_devices, num_aggregations), dtype=np.int8)
    U = np.zeros_like(R)
    for i, g, gp in triples:
        R[i, g] = 1
        U[i, gp] = 1
    return R, U


@dataclass(frozen=True)
class ScheduleViolation:
    constraint: str
    indices: tuple
    message: str

    def __str__(self):
        return f"{self.constraint}{list(self.indices)}: {self.message}"


def check_schedule(R, U, periods, limits: ScheduleLimits, idle=None) -> list[ScheduleViolation]:
    """Check the scheduling constraints of the joint problem.

    ``periods`` is the ``[devices x G]`` matrix of local-period lengths (the
    ordering check is skipped when it is None); ``idle`` the matching idle
    times (the idle gating check is skipped when it is None).
    """
    R = np.asarray(R)
    U = np.asarray(U)
    if R.shape != U.shape:
        raise ValueError("R and U must have the same shape")
    I, G = R.shape
    if G != limits.num_aggregations:
        raise ValueError("matrix width must equal the number of aggregations")
    K = int(limits.staleness_limit)
    out = []
    total_r = int(R.sum())
    if not (G <= total_r <= G + K):
        out.append(ScheduleViolation("reception_count", (), f"{total_r} receptions outside [{G}, {G + K}]"))
    for g in range(G):
        n = int(U[:, g].sum())
        if n != 1:
            out.append(ScheduleViolation("single_uploader", (g,), f"{n} uploaders at aggregation {g}"))
    if int(U.sum()) != G:
        out.append(ScheduleViolation("upload_count", (), f"{int(U.sum())} uploads, expected {G}"))
    if idle is not None:
        idle = np.asarray(idle, dtype=float)
        for i, g in zip(*np.nonzero((R == 0) & (idle != 0))):
            out.append(ScheduleViolation("idle_gating", (int(i), int(g)), "idle time without a reception"))
    if periods is not None:
        T = np.asarray(periods, dtype=float)
        if T.shape != R.shape:
            raise ValueError("periods must match the schedule shape")
        before = np.cumsum(T, axis=1) - T  # sum over k < g
        through = np.cumsum(T, axis=1)     # sum over k <= g
        for g in range(G - 1):
            lhs = float(np.sum(U[:, g] * before[:, g]))
            rhs = float(np.sum(U[:, g + 1] * through[:, g]))
            if lhs > rhs:
                out.append(ScheduleViolation("upload_order", (g,), f"{lhs:.6g} > {rhs:.6g}"))
    pairs, orphans = round_pairs(R, U)
    for i, gp in orphans:
        out.append(ScheduleViolation("staleness", (int(i), int(gp)), "upload without a preceding reception"))
    for i, g, gp in pairs:
        if gp - g > K:
            out.append(ScheduleViolation("staleness", (int(i), int(g), int(gp)), f"gap {gp - g} exceeds {K}"))
    return out


def _device_rows(upload_row, G, K):
    """All reception rows compatible with one device's upload row.

    An upload needs a reception since the device's previous upload, at most
    ``K`` slots earlier; the latest such reception starts the round.
    """
    rows = []
    for bits in itertools.product((0, 1), repeat=G):
        pending = None
        ok = True
        for g in range(G):
            if bits[g]:
                pending = g
            if upload_row[g]:
                if pending is None or g - pending > K:
                    ok = False
                    break
                pending = None
        if ok:
            rows.append(bits)
    return rows


def enumerate_feasible(num_devices: int, limits: ScheduleLimits) -> list[tuple[np.ndarray, np.ndarray]]:
    """Every binary ``(R, U)`` satisfying the combinatorial scheduling constraints.

    The ordering constraint is skipped because it depends on period lengths.
    """
    I = int(num_devices)
    G = int(limits.num_aggregations)
    K = int(limits.staleness_limit)
    if I < 1:
        raise ValueError("need at least one device")
    if I * G > 20:
        raise ValueError("instance too large to enumerate (devices x aggregations > 20)")
    out = []
    row_cache = {}
    for owners in itertools.product(range(I), repeat=G):
        U = np.zeros((I, G), dtype=np.int8)
        for g, i in enumerate(owners):
            U[i, g] = 1
        options = []
        for i in range(I):
            key = tuple(U[i])
            if key not in row_cache:
                row_cache[key] = _device_rows(U[i], G, K)
            options.append(row_cache[key])
        for combo in itertools.product(*options):
            total = sum(sum(r) for r in combo)
            if G <= total <= G + K:
                R = np.array(combo, dtype=np.int8)
                out.append((R, U.copy()))
    return out


def write_schedule_csv(path, tensors) -> None:
    """Write ``{task_id: ScheduleTensor}`` as rows ``task, device, g, g_prime``."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "device", "g", "g_prime"])
        for task in sorted(tensors):
            for i, g, gp in tensors[task].triples:
                w.writerow([task, i, g, gp])


def read_schedule_csv(path, num_devices: int, limits_by_task) -> dict:
    """Read a schedule CSV back into ``{task_id: ScheduleTensor}``."""
    triples = {t: [] for t in limits_by_task}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            t = int(row["task"])
            if t not in triples:
                raise ValueError(f"schedule references unknown task {t}")
            triples[t].append((int(row["device"]), int(row["g"]), int(row["g_prime"])))
    out = {}
    for t, lim in limits_by_task.items():
        R, U = schedule_from_triples(triples[t], num_devices, lim.num_aggregations)
        out[t] = pair_rounds(R, U, lim)
    return out
