"""How download and upload indicators turn into stale model pairs, and what the bound makes of them.

Run with ``python3 demos/staleness_tensor.py``.
"""

import numpy as np

from mafl.scheduling import ScheduleLimits, build_tensor, check_schedule, pair_rounds, staleness

# two devices, five aggregations; rows are devices, columns aggregations
receive = np.array([[1, 0, 1, 0, 0],
                    [1, 1, 0, 1, 0]])
upload = np.array([[0, 1, 0, 0, 1],
                   [1, 0, 1, 1, 0]])
limits = ScheduleLimits(staleness_limit=3, num_aggregations=5)

tensor = build_tensor(receive, upload, limits)
print("closed-form indicator triples (device, g, g'):")
for t in tensor.triples:
    print("  ", t)

paired = pair_rounds(receive, upload, limits)
print("rounds as the simulator pairs them:")
for i, g, gp in paired.triples:
    print(f"   device {i} trains on model {g}, its update is applied at aggregation {gp}")
print("largest staleness:", staleness(paired))

print("constraint report:", check_schedule(receive, upload, None, limits) or "feasible")
