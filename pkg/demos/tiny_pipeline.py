"""Walk the full pipeline on the tiny scenario and compare against the random-idle baseline.

Run with ``python3 demos/tiny_pipeline.py``.
"""

from pathlib import Path

import numpy as np

from mafl import cli
from mafl import simulator as sim
from mafl.core import load_scenario

SCENARIO = Path(__file__).resolve().parents[1] / "scenarios" / "tiny.toml"
SEED = 0

sc = load_scenario(SCENARIO)
data = sim.prepare_data(sc, SEED, SCENARIO.parent)
print(f"{sc.num_devices} devices, {sc.num_tasks} tasks")

# smoothness, dissimilarity and variance constants feeding the bound
constants = cli.estimate(data, SEED)
for j, c in enumerate(constants):
    print(f"task {j}: smoothness {c.smoothness:.3g}")

# joint schedule and resource plan, then the event-driven run
tensors, plans, history = cli.optimize_stage(data, constants)
print(f"optimizer: {len(history)} iterations, final objective {history[-1]['objective']:.4g}")
for j in range(sc.num_tasks):
    print(f"task {j}: {len(tensors[j].triples)} (device, download, upload) triples, "
          f"SGD iterations per round {np.unique(plans[j].sgd_iters)}")

_, ours, _ = cli.simulate_stage(data, tensors, plans, SEED)
_, base, _ = sim.run_baseline(data.scenario, "async_random_idle", data.losses, data.partitions, SEED,
                              data.heldout, constants)

print(f"{'task':>4} {'method':>18} {'final loss':>11} {'accuracy':>9} {'energy [J]':>11}")
for j in range(sc.num_tasks):
    for name, m in (("optimized", ours), ("random idle", base)):
        t = m.tasks[j]
        print(f"{j:>4} {name:>18} {t.loss[-1]:>11.4f} {t.accuracy[-1]:>9.3f} {t.energy[-1]:>11.4g}")
