"""
Random weight-level splits and mask drift
=========================================

WELS draws a random bitset per layer with exactly round(s_r * |W|) ones.
Resampling it every generation (WELS-Rand) is tracked with the normalized
Hamming distance to the previous mask (S-H2D) and to the first one (C-H2D).
"""

import numpy as np

from kevo import graph as G
from kevo.data import split_dataset, synthetic_blobs
from kevo.engine import SeededRng
from kevo.evolve import TrainConfig, run_knowledge_evolution
from kevo.metrics import h2d_metrics
from kevo.splitting import wels_split

net = G.build_architecture("small-vgg-bn", 10, (3, 16, 16), width=8)

a = wels_split(net, 0.5, SeededRng(1)).param_masks(net)
b = wels_split(net, 0.5, SeededRng(2)).param_masks(net)
bits_a = np.concatenate([m.ravel() for m in a.values()])
bits_b = np.concatenate([m.ravel() for m in b.values()])

# two independent masks share about s_r^2 of the weights
print("overlap of two masks:", round(float(np.mean(bits_a & bits_b)), 4))

# distances: identical masks 0, complementary masks 1, independent masks about 0.5
print("H2D same / complement / independent:",
      h2d_metrics([bits_a, bits_a])[0], h2d_metrics([bits_a, ~bits_a])[0],
      [round(v, 3) for v in h2d_metrics([bits_a, bits_b])[0]])

data = synthetic_blobs(10, 30, (3, 16, 16), seed=1, noise=2.0)
train, evaluation = split_dataset(data, 0.5, 1)
cfg = TrainConfig(epochs=5, generations=3, seed=1, technique="wels", mask_policy="resample")
for entry in run_knowledge_evolution(net, cfg, train, evaluation):
    print(entry.generation, entry.dense_metric, "S-H2D", entry.s_h2d, "C-H2D", entry.c_h2d)
