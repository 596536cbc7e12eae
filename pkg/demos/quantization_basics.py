"""
Quantization basics
===================

Walks through the signed cast, fake quantization onto a b-bit grid, the
straight-through gradient gate, EMA bound calibration with freezing, and
per-channel weight bounds.
"""

import numpy as np

from pokebnn import quant

# The signed 4-bit grid ends at C_4 = 7.5; values land on k * B / C_4.
xs = np.array([-1.4, -0.51, -0.2, 0.0, 0.2, 0.5, 0.97, 1.4])
q = quant.fake_quant(xs, 1.0, 4)
print("input :", xs)
print("4-bit :", np.round(q, 4))
print("grid k:", q * 7.5)

# Quantizing twice changes nothing; the projection is idempotent.
print("idempotent:", np.array_equal(q, quant.fake_quant(q, 1.0, 4)))

# The gradient of the quantizer is the indicator of the open interval
# (-B, B); rounding is ignored (straight-through estimator).
print("STE gate  :", quant.ste_mask(xs, 1.0))

# Binarization is a plain sign: the forward never depends on the bound,
# only the gradient gate does. A larger bound keeps more neurons alive.
acts = np.random.default_rng(0).normal(0, 1.5, size=10_000)
signs = quant.binarize(acts)
print("binary values:", sorted(set(signs)))
for bound in (1.0, 3.0):
    alive = quant.ste_mask(acts, bound).mean()
    print(f"  bound {bound}: {alive:.1%} of activations receive gradient")

# Activation bounds track the batch peak with an exponential moving
# average, then freeze when activation quantization turns on.
state = quant.BoundState(bound=np.float64(1.0), ema_alpha=0.9)
for step in range(5):
    batch = np.random.default_rng(step).normal(0, 2.0, size=256)
    state = quant.update_ema_bound(state, batch)
    print(f"step {step}: bound {float(state.bound):.4f}")
state = state.freeze()
state = quant.update_ema_bound(state, np.full(8, 100.0))
print(f"frozen bound stays {float(state.bound):.4f}")

# Weights use per-output-channel bounds, recomputed from the tensor itself.
w = np.random.default_rng(1).normal(size=(3, 3, 8, 4))
print("per-channel weight bounds:", np.round(quant.weight_channel_bounds(w), 3))
