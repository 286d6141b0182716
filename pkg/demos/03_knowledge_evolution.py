"""
Knowledge evolution on a small CNN
==================================

Train, re-initialize the reset-hypothesis, train again. The dense network
improves slowly across generations, while the slim fit-hypothesis goes from
chance to useful because later generations learn to pack knowledge into it.
"""

from kevo import graph as G
from kevo.data import split_dataset, synthetic_blobs
from kevo.evolve import TrainConfig, run_knowledge_evolution

# 10 noisy classes, 300 training images of 3x16x16
data = synthetic_blobs(10, 60, (3, 16, 16), seed=0, noise=4.0)
train, evaluation = split_dataset(data, eval_fraction=0.5, seed=0)

net = G.build_architecture("small-vgg-bn", 10, (3, 16, 16), width=8)
cfg = TrainConfig(epochs=20, batch_size=32, lr=0.256, generations=3, seed=0,
                  technique="kels", split_rate=0.5)

logs = run_knowledge_evolution(net, cfg, train, evaluation)

for entry in logs:
    print(f"generation {entry.generation}: dense top-1 {entry.dense_metric['top1']:.3f}, "
          f"slim top-1 {entry.slim_metric['top1']:.3f}, final loss {entry.epoch_losses[-1]:.3f}")

# the reset-hypothesis shrinks across generations (mean |w| of the M=0 entries)
first, last = logs[0].hypothesis_stats, logs[-1].hypothesis_stats
for layer in list(first)[:4]:
    print(f"{layer:<22} reset mean |w|: {first[layer][1]:.4f} -> {last[layer][1]:.4f}")

# KE+DSD variant: reset entries are zeroed instead of re-drawn
zeros = TrainConfig(epochs=5, generations=2, seed=0, reset_mode="zeros")
print("zeros reset, dense top-1:", [l.dense_metric["top1"] for l in run_knowledge_evolution(net, zeros, train, evaluation)])
