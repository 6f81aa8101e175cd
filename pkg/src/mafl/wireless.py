"""Link budgets, transfer and computation costs, and local-period assembly.

Rates use ``log2`` so that they come out in bits per second.  Fading is
redrawn per ``(device, aggregation index, direction)`` from a counter-keyed
generator, so results do not depend on evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ChannelParams

UPLINK = "uplink"
DOWNLINK = "downlink"
_DIRECTION_CODE = {UPLINK: 0, DOWNLINK: 1}


def channel_rng(seed: int, device: int, g: int, direction: str) -> np.random.Generator:
    """Generator keyed by ``(seed, device, g, direction)``."""
    return np.random.default_rng([int(seed), int(device), int(g), _DIRECTION_CODE[direction]])


def pathloss_linear(distance, params: ChannelParams) -> float:
    """Large-scale gain ``10^(beta_db / 10)`` with log-distance path loss."""
    if distance < params.ref_distance:
        raise ValueError("distance below the reference distance")
    beta_db = params.pathloss_ref_db - 10.0 * params.pathloss_exponent * np.log10(distance / params.ref_distance)
    return float(10.0 ** (beta_db / 10.0))


def channel_gain(distance: float, params: ChannelParams, rng) -> float:
    """Squared channel magnitude: path loss times a unit-power Rayleigh draw."""
    beta = pathloss_linear(distance, params)
    re, im = rng.standard_normal(2)
    return beta * 0.5 * (re * re + im * im)


def link_rate(bandwidth: float, gain_squared: float, tx_power: float, noise_density: float) -> float:
    """Shannon rate ``B log2(1 + |h|^2 p / (N0 B))`` in bits/s."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    if gain_squared < 0 or tx_power < 0 or noise_density <= 0:
        raise ValueError("gain and power must be >= 0 and noise density > 0")
    return float(bandwidth * np.log2(1.0 + gain_squared * tx_power / (noise_density * bandwidth)))


def compute_time(active, cycles_per_sample, sgd_iters, batch, freq) -> float:
    """Local computation time ``R a e B / f``."""
    if not active:
        return 0.0
    if freq <= 0:
        raise ValueError("active device needs a positive CPU frequency")
    return float(cycles_per_sample * sgd_iters * batch / freq)


def compute_energy(active, capacitance, sgd_iters, cycles_per_sample, batch, freq) -> float:
    """Local computation energy ``R xi e a B f^2``."""
    if not active:
        return 0.0
    if freq <= 0:
        raise ValueError("active device needs a positive CPU frequency")
    return float(capacitance * sgd_iters * cycles_per_sample * batch * freq ** 2)


def transfer_cost(indicator, bits_per_param, model_dim, rate, power) -> tuple[float, float]:
    """Delay ``sigma M / r`` and energy ``p T`` of one model transfer."""
    if not indicator:
        return 0.0, 0.0
    if rate <= 0:
        raise ValueError("link outage")
    delay = float(bits_per_param) * float(model_dim) / float(rate)
    return delay, power * delay


def local_period(idle, receive, compute, uplink, downlink) -> float:
    """Length of one local period ``R idle + compute + uplink + downlink``."""
    for name, v in (("idle", idle), ("compute", compute), ("uplink", uplink), ("downlink", downlink)):
        if v < 0:
            raise ValueError(f"negative {name} time")
    return float(receive * idle + compute + uplink + downlink)


@dataclass(frozen=True)
class LinkBudget:
    gain_squared: float
    rate: float
    direction: str
    aggregation_index: int


def link_budget(scenario, device_index: int, g: int, direction: str) -> LinkBudget:
    """Gain and rate of one device link at aggregation ``g``."""
    dev = scenario.devices[device_index]
    ch = scenario.channel
    rng = channel_rng(ch.fading_seed, dev.device_id, g, direction)
    h2 = channel_gain(dev.distance, ch, rng)
    if direction == UPLINK:
        rate = link_rate(dev.uplink_bandwidth, h2, dev.uplink_power, ch.noise_density)
    else:
        rate = link_rate(dev.downlink_bandwidth, h2, scenario.downlink_power, ch.noise_density)
    return LinkBudget(h2, rate, direction, g)


@dataclass(frozen=True)
class LinkTable:
    """Per-task rates and full-model transfer delays, shape ``[devices x G]``."""

    uplink_rate: np.ndarray
    downlink_rate: np.ndarray
    uplink_delay: np.ndarray
    downlink_delay: np.ndarray


def link_table(scenario, task_index: int) -> LinkTable:
    task = scenario.tasks[task_index]
    I, G = scenario.num_devices, task.num_aggregations
    ru = np.empty((I, G))
    rd = np.empty((I, G))
    for i in range(I):
        for g in range(G):
            ru[i, g] = link_budget(scenario, i, g, UPLINK).rate
            rd[i, g] = link_budget(scenario, i, g, DOWNLINK).rate
    bits = float(task.bits_per_param) * float(task.model_dim)
    with np.errstate(divide="ignore"):
        tu = np.where(ru > 0, bits / np.where(ru > 0, ru, 1.0), np.inf)
        td = np.where(rd > 0, bits / np.where(rd > 0, rd, 1.0), np.inf)
    return LinkTable(ru, rd, tu, td)


@dataclass(frozen=True)
class PeriodBreakdown:
    """Per-round times and energies of one task, arrays shaped ``[devices x G]``."""

    idle: np.ndarray
    downlink: np.ndarray
    compute: np.ndarray
    uplink: np.ndarray
    total: np.ndarray
    compute_energy: np.ndarray
    uplink_energy: np.ndarray
    downlink_energy: np.ndarray
    final_idle: np.ndarray

    @property
    def energies(self):
        return self.compute_energy, self.uplink_energy, self.downlink_energy

    def device_energy(self) -> float:
        return float(self.compute_energy.sum() + self.uplink_energy.sum())

    def bs_energy(self) -> float:
        return float(self.downlink_energy.sum())


def period_breakdown(scenario, task_index: int, R, U, plan, links: LinkTable | None = None) -> PeriodBreakdown:
    """Assemble every local period of one task from a schedule and a resource plan."""
    task = scenario.tasks[task_index]
    R = np.asarray(R)
    U = np.asarray(U)
    I, G = R.shape
    links = links if links is not None else link_table(scenario, task_index)
    idle = np.zeros((I, G))
    dl = np.zeros((I, G))
    cp = np.zeros((I, G))
    ul = np.zeros((I, G))
    tot = np.zeros((I, G))
    ec = np.zeros((I, G))
    eu = np.zeros((I, G))
    ed = np.zeros((I, G))
    bits = task.bits_per_param
    for i, dev in enumerate(scenario.devices):
        a = dev.cycles_per_sample[task_index]
        for g in range(G):
            r, u = int(R[i, g]), int(U[i, g])
            f = float(plan.cpu_freq[i, g])
            e = float(plan.sgd_iters[i, g])
            B = float(plan.batch_size[i, g])
            cp[i, g] = compute_time(r, a, e, B, f)
            ec[i, g] = compute_energy(r, dev.chipset_capacitance, e, a, B, f)
            ul[i, g], eu[i, g] = transfer_cost(u, bits, task.model_dim, links.uplink_rate[i, g], dev.uplink_power)
            dl[i, g], ed[i, g] = transfer_cost(r, bits, task.model_dim, links.downlink_rate[i, g],
                                               scenario.downlink_power)
            idle[i, g] = float(plan.idle[i, g]) if r else 0.0
            tot[i, g] = local_period(idle[i, g], r, cp[i, g], ul[i, g], dl[i, g])
    return PeriodBreakdown(idle, dl, cp, ul, tot, ec, eu, ed, np.asarray(plan.final_idle, dtype=float))
