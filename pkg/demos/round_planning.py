"""
Planning one round: ratios and batch sizes
==========================================

Stale devices get a more precise model, important devices upload more of
their update, and slow devices train on smaller batches so nobody waits long.
"""

import numpy as np

from caesar_sim import policy
from caesar_sim.policy import DeviceProfile

H = 10
rng = np.random.default_rng(1)


def device(i, mu, bw, labels, volume):
    dist = np.bincount(labels, minlength=H) / len(labels)
    return DeviceProfile(i, volume, dist, bw, bw, mu)


# %%
# Four devices: different speeds, links, data volumes and label skew.
devices = [
    device(0, 5e-4, 3e7, rng.integers(0, H, 400), 400),  # fast, balanced
    device(1, 5e-3, 1e6, rng.integers(0, 2, 400), 400),  # slow, two labels
    device(2, 1e-3, 5e6, rng.integers(0, H, 100), 100),  # small shard
    device(3, 2e-3, 2e6, rng.integers(0, 5, 250), 250),
]
a_max = max(d.sample_volume for d in devices)
scores = {
    d.id: policy.importance(d.sample_volume, a_max, policy.kl_divergence(d.label_distribution, policy.uniform_distribution(H)))
    for d in devices
}
upload = policy.upload_ratios(scores, 0.1, 0.6)
for d in devices:
    print(f"device {d.id}: importance {scores[d.id]:.3f}  upload ratio {upload[d.id]:.3f}")

# %%
# Round 12. Device 2 has never taken part, so it gets the full model.
staleness = {0: 1, 1: 4, 2: 12, 3: 9}
plan = policy.caesar_plan(
    [(d, staleness[d.id]) for d in devices], 12, upload, theta_d_max=0.6, clusters=2, b_max=32, tau=10, n=1386
)
print("\n id  stale  down   up     batch  seconds")
for i in plan:
    e = plan[i]
    print(f" {i}   {staleness[i]:>3}    {e.download_ratio:.3f}  {e.upload_ratio:.3f}  {e.batch_size:>4}   {e.total_time:.3f}")
print("slowest", max(plan[i].total_time for i in plan), "s")
