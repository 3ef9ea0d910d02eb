"""
How the heterogeneity knob shapes the shards
============================================

``p = 0`` splits the data evenly at random. Larger ``p`` lowers the Dirichlet
concentration, so each device sees fewer labels and shard sizes spread out.
"""

import numpy as np

from caesar_sim import datagen, policy
from caesar_sim.datagen import PartitionSpec, SynthSpec

train, test = datagen.synth_dataset(SynthSpec(classes=10, dim=32, per_class=1000, class_sep=3.0))
print(f"{len(train)} training and {len(test)} test samples")

uniform = policy.uniform_distribution(10)
print("\n  p    sizes (min / median / max)   mean KL to uniform   labels per device")
for p in (0, 0.5, 1, 5, 10):
    shards = datagen.dirichlet_partition(train, PartitionSpec(50, p=p, min_per_device=64, seed=0))
    sizes = [len(s) for s in shards]
    dists = [datagen.label_distribution(s, 10) for s in shards]
    kl = np.mean([policy.kl_divergence(d, uniform) for d in dists])
    labels = np.mean([(d > 0.05).sum() for d in dists])
    print(f"{p:>4}   {min(sizes):>5} / {int(np.median(sizes)):>5} / {max(sizes):>5}        {kl:.3f}               {labels:.1f}")
