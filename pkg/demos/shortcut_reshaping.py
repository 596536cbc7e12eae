"""
Shortcut reshaping
==================

The residual adapters that let every convolution carry a shortcut without
1x1 projection layers: zero padding and tiling for channel expansion,
neighbor averaging for contraction, and a 3x3 stride-2 average pool for
spatial downsampling. Ends with a full PokeConv block forward.
"""

import numpy as np

from pokebnn.nn import autodiff as ad
from pokebnn.nn import blocks
from pokebnn.nn.autodiff import Tensor

vec = Tensor(np.array([[[[1.0, 2.0]]]]))
print("pad  [1,2] -> 4ch:", ad.pad_channels(vec, 4).data.ravel())
print("tile [1,2] -> 4ch:", ad.tile_channels(vec, 4).data.ravel())
quad = Tensor(np.array([[[[1.0, 3.0, 5.0, 7.0]]]]))
print("avg  [1,3,5,7] -> 2ch:", ad.avg_channels(quad, 2).data.ravel())

# Local shortcuts zero-pad (identity on the existing channels), block
# shortcuts tile; mixing the two conventions is the point.
rng = np.random.default_rng(0)
x = Tensor(np.zeros((1, 4, 4, 8)))
r = Tensor(rng.normal(size=(1, 8, 8, 4)))
out = blocks.reshape_add(x, r, expand_mode="tile")
print(f"shortcut {r.data.shape} added into {x.data.shape}: out {out.data.shape}")

# One PokeConv: binarized conv, BN, both shortcut adds, DPReLU, the 4-bit
# SE gate computed from the block input, and a trailing BN.
params = blocks.PokeConvParams.create(in_channels=16, out_channels=32,
                                      kernel=3, rng=rng)
ctx = blocks.QuantContext(training=True, phase=2)
xin = Tensor(rng.normal(size=(2, 8, 8, 16)), requires_grad=True)
y = blocks.pokeconv(xin, None, params, stride=2, ctx=ctx)
print(f"pokeconv {xin.data.shape} -> {y.data.shape}")

# a constant upstream would vanish through the trailing BatchNorm, so use
# a random one to exercise every gradient path
y.backward(rng.normal(size=y.data.shape))
grads = {
    "conv weight": params.w.grad,
    "dprelu slope": params.act.gamma.grad,
    "se hidden weight": params.se.w1.grad,
}
for name, g in grads.items():
    print(f"  {name:18} grad norm {np.linalg.norm(g):.4f}")
