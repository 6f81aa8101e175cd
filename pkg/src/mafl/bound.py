"""Convergence-bound evaluation and the checks built around it.

The bound on the schedule-weighted average of global gradient norms is split
into five terms:

* (a) initial loss gap,
* (b) model dissimilarity,
* (c) mini-batch sampling noise,
* (d) proximal-gradient accumulation,
* (e) staleness.

Terms (b)-(d) sum over the scheduled rounds, (e) over aggregation indices.

The per-round pieces are written with plain arithmetic so the optimizer can
push dual numbers through :func:`round_terms`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .training import LogisticLoss, device_loss


@dataclass(frozen=True)
class BoundConstants:
    """Problem constants entering the bound.

    ``dissimilarity`` and ``sample_variance`` are per device (shape ``[I]``)
    or per device and round (``[I, G]``).  ``estimated`` marks empirical
    maxima, which are lower bounds of the true suprema.
    """

    smoothness: float
    data_variability: float
    dissimilarity: np.ndarray
    sample_variance: np.ndarray
    grad_norm_cap: float
    reg_grad_norm_cap: float
    reg_weight: float
    initial_loss_gap: float
    estimated: bool = False

    def __post_init__(self):
        for name in ("dissimilarity", "sample_variance"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        scalars = (self.smoothness, self.data_variability, self.grad_norm_cap,
                   self.reg_grad_norm_cap, self.reg_weight, self.initial_loss_gap)
        if min(scalars) < 0 or np.any(self.dissimilarity < 0) or np.any(self.sample_variance < 0):
            raise ValueError("bound constants must be non-negative")

    def inflated(self, factor: float = 1.2) -> "BoundConstants":
        """Scale every estimated supremum by ``factor`` (the loss gap and rho are kept)."""
        return replace(self, smoothness=self.smoothness * factor,
                       data_variability=self.data_variability * factor,
                       dissimilarity=self.dissimilarity * factor,
                       sample_variance=self.sample_variance * factor,
                       grad_norm_cap=self.grad_norm_cap * factor,
                       reg_grad_norm_cap=self.reg_grad_norm_cap * factor)

    def per_round(self, name: str, i: int, g: int) -> float:
        arr = getattr(self, name)
        return float(arr[i] if arr.ndim == 1 else arr[i, g])


@dataclass
class BoundReport:
    term_a: float
    term_b: float
    term_c: float
    term_d: float
    term_e: float
    lhs_conv: float | None = None
    per_aggregation: list = field(default_factory=list)

    @property
    def total(self) -> float:
        return self.term_a + self.term_b + self.term_c + self.term_d + self.term_e

    def as_row(self) -> dict:
        return {"term_a": self.term_a, "term_b": self.term_b, "term_c": self.term_c,
                "term_d": self.term_d, "term_e": self.term_e, "total": self.total,
                "lhs_conv": self.lhs_conv}


def geometric_staleness_factor(k_alpha: float, g_prime: int) -> float:
    """``sum_{k < g'} (K alpha)^k``, with the ``K alpha = 1`` limit ``g'``."""
    if k_alpha < 0 or g_prime < 0:
        raise ValueError("need K*alpha >= 0 and g' >= 0")
    if g_prime == 0:
        return 0.0
    if k_alpha == 1.0:
        return float(g_prime)
    return float((k_alpha ** g_prime - 1.0) / (k_alpha - 1.0))


def round_terms(eta, e, B, D, delta, svar, c: BoundConstants):
    """Unscaled contributions ``(b, c, d)`` of one scheduled round.

    Works for floats and for dual numbers in ``e`` and ``B``.
    """
    b = eta * e * delta
    sampling = (1 - B / D) * ((D - 1) * c.data_variability ** 2) / (B * D)
    cc = 4 * c.smoothness * eta * eta * e * sampling * svar
    rho = c.reg_weight
    d = 2 * rho * eta * eta * e * c.reg_grad_norm_cap * (0.5 * rho * eta * (e - 1) + e)
    return b, cc, d


def staleness_term(c: BoundConstants, task, e_max: float) -> tuple[float, list]:
    """Term (e) and its per-aggregation pieces; independent of the schedule."""
    G = task.num_aggregations
    k_alpha = task.staleness_limit * task.agg_weight
    scale = 1.0 / (G * task.eta_min)
    core = k_alpha * e_max ** 2 * task.eta_max ** 2
    pieces = []
    for gp in range(G):
        phi = geometric_staleness_factor(k_alpha, gp)
        root = math.sqrt(4 * core * c.grad_norm_cap * c.reg_grad_norm_cap * phi)
        lin = (c.smoothness + 2) * core * c.reg_grad_norm_cap * phi
        pieces.append(scale * (root + lin))
    return float(sum(pieces)), pieces


def _check_plan(schedule, plan, task):
    G = task.num_aggregations
    if G < 1:
        raise ValueError("need at least one aggregation")
    if task.eta_min <= 0:
        raise ValueError("minimum learning rate must be positive")
    I = schedule.num_devices
    if schedule.num_aggregations != G or np.shape(plan.sgd_iters) != (I, G):
        raise ValueError("schedule/plan shape mismatch")


def eval_bound(schedule, plan, constants: BoundConstants, task) -> BoundReport:
    """Evaluate the five bound terms for one task's schedule and resource plan."""
    _check_plan(schedule, plan, task)
    G = task.num_aggregations
    scale = 1.0 / (G * task.eta_min)
    eta = task.learning_rate_schedule
    per = [{"g_prime": gp, "term_b": 0.0, "term_c": 0.0, "term_d": 0.0, "term_e": 0.0} for gp in range(G)]
    tb = tc = td = 0.0
    for i, g, gp in schedule.triples:
        e = float(plan.sgd_iters[i, g])
        if not (plan.e_min <= e <= plan.e_max):
            raise ValueError(f"SGD count {e} outside [{plan.e_min}, {plan.e_max}]")
        b, c, d = round_terms(eta[g], e, float(plan.batch_size[i, g]), float(plan.dataset_sizes[i]),
                              constants.per_round("dissimilarity", i, g),
                              constants.per_round("sample_variance", i, g), constants)
        tb += scale * b
        tc += scale * c
        td += scale * d
        per[gp]["term_b"] += scale * b
        per[gp]["term_c"] += scale * c
        per[gp]["term_d"] += scale * d
    te, pieces = staleness_term(constants, task, plan.e_max)
    for gp, p in enumerate(pieces):
        per[gp]["term_e"] = p
    ta = 2.0 * scale / task.agg_weight * constants.initial_loss_gap
    return BoundReport(ta, tb, tc, td, te, per_aggregation=per)


def eval_conv_lhs(grad_norms, schedule) -> float:
    """Schedule-weighted average of global gradient norms over the scheduled rounds."""
    G = schedule.num_aggregations
    grad_norms = np.asarray(grad_norms, dtype=float)
    total = 0.0
    for _, g, gp in schedule.triples:
        if gp > G - 1:
            continue
        if g >= len(grad_norms):
            raise ValueError(f"missing gradient norm for aggregation {g}")
        total += grad_norms[g]
    return float(total / G)


def aggregation_recursion_check(schedule, sgd_traces, alpha: float, g: int, g_prime: int, history):
    """Compare ``w^(g) - w^(g')`` from the aggregation history with the recursion.

    The recursion is ``Psi(k, k') = -alpha * sum_{q'=k}^{k'-1} sum_{q<=q'}
    sum_i X[i, q, q'] * (Psi(q, q') - a_i(q))`` with ``Psi(k, k) = 0`` and
    ``a_i(q)`` the step size times the summed SGD gradients of that round.
    """
    if g > g_prime:
        raise ValueError("need g <= g'")
    if len(history) <= g_prime:
        raise ValueError("aggregation history shorter than g'")
    hist = [np.asarray(getattr(w, "weights", w), dtype=float) for w in history]
    by_slot = {}
    for i, q, qp in schedule.triples:
        by_slot.setdefault(qp, []).append((i, q))
    memo = {}

    def accumulated(i, q):
        key = (i, q)
        if key not in sgd_traces:
            raise ValueError(f"missing SGD trace for device {i} round {q}")
        return sgd_traces[key].accumulated_update()

    def psi(k, kp):
        if k == kp:
            return np.zeros_like(hist[0])
        if (k, kp) in memo:
            return memo[(k, kp)]
        acc = np.zeros_like(hist[0])
        for qp in range(k, kp):
            for i, q in by_slot.get(qp, ()):
                acc += psi(q, qp) - accumulated(i, q)
        memo[(k, kp)] = -alpha * acc
        return memo[(k, kp)]

    lhs = hist[g] - hist[g_prime]
    rhs = psi(g, g_prime)
    return lhs, rhs, float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0


def data_embedding(loss, data) -> np.ndarray:
    """Vector form of datapoints used for data distances and variances."""
    if isinstance(loss, LogisticLoss):
        onehot = np.eye(loss.num_classes)[data.labels]
        return np.hstack([data.features, onehot])
    return np.asarray(data.features, dtype=float)


def sample_variance(loss, data) -> float:
    """``sum ||d - mean||^2 / (D - 1)`` over the embedded datapoints."""
    z = data_embedding(loss, data)
    if len(z) < 2:
        return 0.0
    return float(np.sum((z - z.mean(axis=0)) ** 2) / (len(z) - 1))


def _pairwise_ratio_max(grads, points):
    """Max over point pairs of ``||g_a - g_b|| / ||d_a - d_b||`` (pairs at zero distance skipped)."""
    g2 = np.sum(grads ** 2, axis=1)
    p2 = np.sum(points ** 2, axis=1)
    dg = np.maximum(g2[:, None] + g2[None, :] - 2 * grads @ grads.T, 0.0)
    dp = np.maximum(p2[:, None] + p2[None, :] - 2 * points @ points.T, 0.0)
    iu = np.triu_indices(len(points), 1)
    dg, dp = dg[iu], dp[iu]
    ok = dp > 1e-12 * max(1.0, dp.max(initial=0.0))
    if not np.any(ok):
        return 0.0
    return float(np.sqrt(np.max(dg[ok] / dp[ok])))


def estimate_constants(loss, partitions, probe_points: int, seed, rho: float = 1.0,
                       scale: float = 1.0, initial_weights=None, max_pair_points: int = 200) -> BoundConstants:
    """Empirical constants from random probe models.

    Every supremum is estimated by a maximum over probes, so the values are
    lower bounds of the true constants (``estimated=True``).  The initial loss
    gap is the global loss at the initial model, an upper bound of the true
    gap because both shipped losses are non-negative.
    """
    if probe_points < 2:
        raise ValueError("need at least two probe points")
    rng = np.random.default_rng(seed)
    dim = loss.dim(partitions[0])
    probes = scale * rng.standard_normal((probe_points, dim))
    I = len(partitions)
    beta = 0.0
    theta = 0.0
    delta = np.zeros(I)
    v1 = v2 = 0.0
    dev_grads = np.array([[loss.mean_grad(w, p.features, p.labels) for p in partitions] for w in probes])
    glob = dev_grads.mean(axis=1)
    for a in range(probe_points):
        b = (a + 1) % probe_points
        dw = np.linalg.norm(probes[a] - probes[b])
        if dw > 0:
            beta = max(beta, float(np.max(np.linalg.norm(dev_grads[a] - dev_grads[b], axis=1)) / dw))
        delta = np.maximum(delta, np.sum((glob[a] - dev_grads[a]) ** 2, axis=1))
    single = False
    for p in partitions:
        if len(p) < 2:
            single = True
        idx = rng.choice(len(p), size=min(len(p), max_pair_points), replace=False)
        sub = p.subset(idx)
        emb = data_embedding(loss, sub)
        for a in range(probe_points):
            grads = loss.point_grads(probes[a], sub.features, sub.labels)
            sq = np.sum(grads ** 2, axis=1)
            v1 = max(v1, float(sq.max()))
            anchor = probes[(a + 1) % probe_points]
            reg = grads + rho * (probes[a] - anchor)[None, :]
            v2 = max(v2, float(np.sum(reg ** 2, axis=1).max()))
            if len(sub) >= 2:
                theta = max(theta, _pairwise_ratio_max(grads, emb))
    if single:
        warnings.warn("partition with a single datapoint: data variability estimate is degenerate")
    svar = np.array([sample_variance(loss, p) for p in partitions])
    w0 = np.zeros(dim) if initial_weights is None else np.asarray(initial_weights, dtype=float)
    gap = float(np.mean([device_loss(w0, loss, p) for p in partitions]))
    return BoundConstants(beta, theta, delta, svar, v1, v2, rho, gap, estimated=True)


def constants_along_run(loss, partitions, traces, history, rho: float, smoothness: float,
                        data_variability: float) -> BoundConstants:
    """Constants measured on the iterates of one simulated run.

    The gradient caps and per-round dissimilarities are maxima over every
    local iterate actually visited, which is what the bound requires
    during training.  Smoothness and data variability are supplied.
    """
    G = len(history) - 1
    I = len(partitions)
    delta = np.zeros((I, max(G, 1)))
    v1 = v2 = 0.0
    for (i, g), tr in traces.items():
        anchor = tr.weights[0]
        for w in tr.weights[:-1]:
            glob = np.mean([loss.mean_grad(w, p.features, p.labels) for p in partitions], axis=0)
            loc = loss.mean_grad(w, partitions[i].features, partitions[i].labels)
            delta[i, g] = max(delta[i, g], float(np.sum((glob - loc) ** 2)))
            for p in partitions:
                pg = loss.point_grads(w, p.features, p.labels)
                v1 = max(v1, float(np.sum(pg ** 2, axis=1).max()))
                reg = pg + rho * (w - anchor)[None, :]
                v2 = max(v2, float(np.sum(reg ** 2, axis=1).max()))
    svar = np.array([sample_variance(loss, p) for p in partitions])
    w0 = np.asarray(getattr(history[0], "weights", history[0]))
    wG = np.asarray(getattr(history[-1], "weights", history[-1]))
    gap = float(np.mean([device_loss(w0, loss, p) for p in partitions])
                - np.mean([device_loss(wG, loss, p) for p in partitions]))
    return BoundConstants(smoothness, data_variability, delta, svar, v1, v2, rho, max(gap, 0.0))


@dataclass(frozen=True)
class ScalingInputs:
    """Fixed ingredients of the step-size/horizon scaling study.

    Every round uses SGD count ``e_min``, batch ``batch_size`` out of
    ``dataset_size`` points; the schedule is sequential round robin.
    """

    constants: BoundConstants
    num_devices: int
    agg_weight: float
    staleness_limit: int
    batch_size: float
    dataset_size: float
    e_max_ratio: float = 1.0


@dataclass
class ScalingReport:
    rows: list

    def normalized(self, piece: str) -> np.ndarray:
        return np.array([r["normalized"][piece] for r in self.rows])

    def max_relative_spread(self, piece: str) -> float:
        v = self.normalized(piece)
        return float((v.max() - v.min()) / abs(v).max()) if np.any(v) else 0.0


SCALING_POWERS = {"a": 1, "b": 2, "c": 3, "d_rho2": 4, "d_rho": 3, "e_root": 2, "e_lin": 3}


def stepsize_horizon_scaling(inputs: ScalingInputs, tau, zeta: float, e_min_values=(4, 8, 16)) -> ScalingReport:
    """Evaluate the bound with ``eta = tau / e_min`` and ``G = zeta e_min^2``.

    Each term is split into the pieces of the asymptotic statement; every
    piece is divided by its inner sum and multiplied by ``e_min`` raised to
    its stated power.  Those normalized values should stay constant.
    """
    c = inputs.constants
    rows = []
    for e_min in e_min_values:
        G = int(round(zeta * e_min ** 2))
        if G < 1:
            raise ValueError("zeta * e_min^2 must be at least one")
        taus = np.broadcast_to(np.asarray(tau, dtype=float), (G,)) if np.ndim(tau) == 0 else np.asarray(tau)[:G]
        eta = taus / e_min
        eta_min, eta_max = float(eta.min()), float(eta.max())
        e = float(e_min)
        e_max = e_min * inputs.e_max_ratio
        scale = 1.0 / (G * eta_min)
        B, D = inputs.batch_size, inputs.dataset_size
        inner = dict.fromkeys(SCALING_POWERS, 0.0)
        raw = dict.fromkeys(SCALING_POWERS, 0.0)
        inner["a"] = c.initial_loss_gap
        raw["a"] = 2 * scale / inputs.agg_weight * c.initial_loss_gap
        sampling = (1 - B / D) * (D - 1) * c.data_variability ** 2 / (B * D)
        rho, V1, V2 = c.reg_weight, c.grad_norm_cap, c.reg_grad_norm_cap
        for g in range(G):
            i = g % inputs.num_devices
            delta = c.per_round("dissimilarity", i, 0)
            svar = c.per_round("sample_variance", i, 0)
            inner["b"] += e * delta
            raw["b"] += scale * eta[g] * e * delta
            inner["c"] += e * sampling * svar
            raw["c"] += scale * 4 * c.smoothness * eta[g] ** 2 * e * sampling * svar
            inner["d_rho2"] += e * V2 * (e - 1)
            raw["d_rho2"] += scale * 2 * rho * eta[g] ** 2 * e * V2 * 0.5 * rho * eta[g] * (e - 1)
            inner["d_rho"] += e * e * V2
            raw["d_rho"] += scale * 2 * rho * eta[g] ** 2 * e * V2 * e
        k_alpha = inputs.staleness_limit * inputs.agg_weight
        for gp in range(G):
            phi = geometric_staleness_factor(k_alpha, gp)
            inner["e_root"] += math.sqrt(4 * k_alpha * V1 * V2 * phi)
            inner["e_lin"] += (c.smoothness + 2) * k_alpha * V2 * phi
        raw["e_root"] = scale * e_max * eta_max * inner["e_root"]
        raw["e_lin"] = scale * e_max ** 2 * eta_max ** 2 * inner["e_lin"]
        normalized = {}
        for k, p in SCALING_POWERS.items():
            if inner[k] == 0:
                normalized[k] = 0.0
                continue
            coeff = raw[k] / inner[k]
            # the staleness pieces also carry e_max and e_max^2
            coeff /= {"e_root": e_max, "e_lin": e_max ** 2}.get(k, 1.0)
            normalized[k] = coeff * e_min ** p
        terms = {"a": raw["a"], "b": raw["b"], "c": raw["c"], "d": raw["d_rho2"] + raw["d_rho"],
                 "e": raw["e_root"] + raw["e_lin"]}
        rows.append({"e_min": e_min, "G": G, "raw": raw, "inner": inner, "normalized": normalized,
                     "terms": terms})
    return ScalingReport(rows)
