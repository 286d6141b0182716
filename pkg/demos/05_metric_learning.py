"""
Triplet loss with semi-hard mining
==================================

For each anchor/positive pair the miner picks negatives that are farther than
the positive but still inside the margin. Retrieval quality is measured with
Recall@K on unit-normalized embeddings and with NMI of a k-means clustering.
"""

import numpy as np

from kevo import graph as G
from kevo.data import split_dataset, synthetic_blobs
from kevo.evolve import TrainConfig, run_knowledge_evolution
from kevo.losses import l2_normalize, mine_semi_hard, triplet_loss
from kevo.metrics import nmi_score, recall_at_k

# a hand-made batch: anchor 0, positive 1 at distance 0.5, negative 2 at 0.7
emb = np.array([[0.0, 0.0], [0.5, 0.0], [0.0, 0.7], [5.0, 5.0]])
labels = np.array([0, 0, 1, 1])
mined = mine_semi_hard(emb, labels, margin=0.4)
print("semi-hard triplets:", mined.triplets.tolist())
print("loss:", triplet_loss(emb, mined)[0])

# retrieval metrics on well separated clusters
rng = np.random.default_rng(0)
centers = rng.normal(size=(4, 8)) * 5
y = np.repeat(np.arange(4), 10)
points, _ = l2_normalize(centers[y] + rng.normal(size=(40, 8)))
print("Recall@1", recall_at_k(points, y, 1), "Recall@4", recall_at_k(points, y, 4), "NMI", round(nmi_score(points, y), 3))

# knowledge evolution with an embedding head instead of a classifier
data = synthetic_blobs(8, 30, (3, 8, 8), seed=0, noise=1.0)
train, evaluation = split_dataset(data, 0.5, 0)
net = G.build_architecture("toy-resnet", 8, (3, 8, 8), width=8, embedding_dim=16)
# the learning rate defaults to 0.0256 for the triplet loss
cfg = TrainConfig(epochs=10, loss="triplet", classes_per_batch=4, samples_per_class=5, generations=3, seed=0)
for entry in run_knowledge_evolution(net, cfg, train, evaluation):
    dense = {k: round(v, 3) for k, v in entry.dense_metric.items()}
    print(entry.generation, "dense", dense, "slim recall@1", round(entry.slim_metric["recall@1"], 3))
