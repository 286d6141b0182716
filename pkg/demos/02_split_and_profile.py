"""
Splitting ResNet18 into fit and reset hypotheses
================================================

KELS keeps the first ceil(s_r * C) kernels of the first ceil(s_r * C) filters in
every layer. At s_r = 0.5 the fit-hypothesis of ResNet18 is a slim network
with roughly a quarter of the parameters and operations.
"""

import numpy as np

from kevo import graph as G
from kevo.splitting import compute_sparsity, extract_slim, kels_split, profile_network

net = G.build_architecture("resnet18", num_classes=102, input_shape=(3, 224, 224))
mask = kels_split(net, 0.5)

# extraction only needs shapes here, so zero weights will do
params = {k: np.zeros(s, np.float32) for k, s in net.param_shapes().items()}
slim, slim_params = extract_slim(net, params, mask)

dense_shapes, slim_shapes = net.param_shapes(), slim.param_shapes()
for node in net.nodes[:8]:
    key = f"{node.name}.weight"
    if key in dense_shapes:
        print(f"{node.name:<16} {str(dense_shapes[key]):<20} -> {slim_shapes[key]}")

# operation and parameter counts
dense_report, slim_report = profile_network(net), profile_network(slim)
print(f"dense: {dense_report.total_ops / 1e9:.3f} G-ops, {dense_report.total_params / 1e6:.3f} M params")
print(f"slim:  {slim_report.total_ops / 1e9:.3f} G-ops, {slim_report.total_params / 1e6:.3f} M params")

# sparsity of the reset-hypothesis: interior layers lose 1 - s_r^2 of their weights
for rate in (0.5, 0.8):
    print(f"s_r={rate}: network sparsity {compute_sparsity(kels_split(net, rate), net):.3f}")

# the per-layer breakdown is available as CSV
print(slim_report.to_csv().splitlines()[0])
