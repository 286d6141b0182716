"""
Convolution, batch norm and SGD from scratch
============================================

Every layer is a plain numpy forward/backward pair. This walk-through runs a
convolution, checks its gradient numerically and takes a few optimizer steps.
"""

import numpy as np

from kevo import engine

rng = np.random.default_rng(0)

# a 3x3 all-ones filter over an all-ones image sums the 9 pixels at the centre
x = np.ones((1, 1, 3, 3))
w = np.ones((1, 3, 3, 1))             # weights are stored as (out, k, k, in)
out, _ = engine.conv2d_forward(x, w, None, stride=1, padding=1)
print("centre of all-ones conv:", out[0, 0, 1, 1])

# output size follows floor((H + 2p - k) / s) + 1
print("224 -> conv 7x7/2 ->", engine.conv_output_size(224, 7, 2, 3))

# finite differences against the analytic backward pass, in float64
x = rng.normal(size=(2, 3, 6, 6))
w = rng.normal(size=(4, 3, 3, 3))
b = rng.normal(size=4)
out, cache = engine.conv2d_forward(x, w, b, 1, 1)
r = rng.normal(size=out.shape)
dx, dw, db = engine.conv2d_backward(r, cache)
loss = lambda: float(np.sum(engine.conv2d_forward(x, w, b, 1, 1)[0] * r))
err = engine.finite_diff_check(loss, {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db})
print(f"conv gradient relative error: {err:.2e}")

# batch norm in train mode normalizes per channel and updates running stats in place
gamma, beta = np.ones(3), np.zeros(3)
rm, rv = np.zeros(3), np.ones(3)
y, _ = engine.batchnorm_forward(rng.normal(2.0, 3.0, (8, 3, 4, 4)), gamma, beta, rm, rv, train=True)
print("bn output mean/std:", y.mean().round(6), y.std().round(3), "running mean:", rm.round(3))

# SGD with momentum: two steps on a constant gradient
params = {"w": np.array([1.0])}
state = engine.OptimizerState(momentum=0.9, weight_decay=0.0)
for _ in range(2):
    engine.sgd_momentum_step(params, {"w": np.array([1.0])}, state, lr=0.1)
print("w after two steps:", params["w"])    # 1 - 0.1 - 0.19 = 0.71

# cosine schedule restarted at lr0 every generation
print("lr by epoch:", [round(engine.cosine_lr(e, 4, 0.256), 4) for e in range(4)])
