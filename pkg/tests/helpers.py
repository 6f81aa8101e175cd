"""Shared builders for the test modules."""

import numpy as np

from mafl.bound import BoundConstants
from mafl.sca import ResourcePlan


def unit_constants(I, G=None):
    return BoundConstants(1.0, 1.0, np.linspace(0.5, 1.5, I), np.ones(I), 2.0, 5.0, 1.0, 2.0)


def flat_plan(scenario, j, f_frac=0.5, e=2, B=3, idle=0.0):
    I = scenario.num_devices
    G = scenario.tasks[j].num_aggregations
    J = scenario.num_tasks
    fmax = np.array([d.cpu_freq_bounds[1] for d in scenario.devices]) / J
    D = np.array([d.dataset_sizes[j] for d in scenario.devices], dtype=float)
    e_lo, e_hi = scenario.sgd_count_bounds[j]
    return ResourcePlan(scenario.tasks[j].task_id, np.repeat((f_frac * fmax)[:, None], G, 1),
                        np.repeat(np.minimum(B, D)[:, None], G, 1), np.full((I, G), float(e)),
                        np.full((I, G), float(idle)), np.zeros(I), float(e_lo), float(e_hi), D)
