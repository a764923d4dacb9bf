"""
Grouped versus global all-to-all
================================

If each domain's experts live on a fixed group of devices, tokens only need
to be exchanged within that group. Fewer devices per group means fewer
cross-device hops.
"""
from rremoe.sim import ClusterSpec, all_to_all_volume, expected_grouped_ratio, place_experts, round_robin_upload

for groups in (1, 2, 4, 8):
    cl = ClusterSpec(devices=8, groups=groups, hidden=1024, element_bytes=2)
    placement = place_experts(cl, groups, 8 // groups)
    hist = [100_000 // groups] * groups
    ana = all_to_all_volume(cl, placement, hist)
    sim = all_to_all_volume(cl, placement, hist, method="simulate", seed=0)
    print(f"G={groups}: grouped/global analytic {ana.ratio:.4f} simulated {sim.ratio:.4f} "
          f"closed form {expected_grouped_ratio(8, groups):.4f}")

# at a larger layout each device ends up with ten experts from ten domains
big = place_experts(ClusterSpec(64, 4), 40, 16)
print("experts per device:", set(big.load().tolist()))

# checkpoint shards uploaded with at most two streams at a time
plan = round_robin_upload([3, 1, 1, 1], max_concurrent=2)
for u in plan.uploads:
    print(f"shard {u.shard} on slot {u.slot}: {u.start} -> {u.end}")
print("makespan", plan.makespan)
