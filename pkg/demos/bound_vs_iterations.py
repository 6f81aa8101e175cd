"""Bound terms on the tiny scenario as every round runs more local SGD iterations.

The term that does not depend on the iteration count stays put while the
others grow, so the optimizer has no bound-side reason to favour long rounds.
Run with ``python3 demos/bound_vs_iterations.py``.
"""

import dataclasses
from pathlib import Path

import numpy as np

from mafl import cli, sca
from mafl import simulator as sim
from mafl.bound import eval_bound
from mafl.core import load_scenario
from mafl.scheduling import ScheduleLimits, pair_rounds, round_robin

SCENARIO = Path(__file__).resolve().parents[1] / "scenarios" / "tiny.toml"

sc = load_scenario(SCENARIO)
data = sim.prepare_data(sc, 0, SCENARIO.parent)
constants = cli.estimate(data, 0)
task = sc.tasks[0]
R, U = round_robin(sc.num_devices, task.num_aggregations)
schedule = pair_rounds(R, U, ScheduleLimits(task.staleness_limit, task.num_aggregations))
plan = sca.default_plan(sc, 0, "mid")

print(f"{'iterations':>10} {'term a':>10} {'term b':>10} {'term c':>10} {'term d':>10} {'total':>10}")
e_min, e_max = sc.sgd_count_bounds[0]
for e in range(int(e_min), int(e_max) + 1):
    p = dataclasses.replace(plan, sgd_iters=np.full_like(plan.sgd_iters, e))
    r = eval_bound(schedule, p, constants[0], task)
    print(f"{e:>10} {r.term_a:>10.4g} {r.term_b:>10.4g} {r.term_c:>10.4g} {r.term_d:>10.4g} {r.total:>10.4g}")
