"""Finite-difference gradient oracles for every smooth op.

The check builds a scalar objective sum(op(inputs) * projection), runs the
analytic backward pass, then compares each input gradient against central
differences in double precision. Quantizer ops run in surrogate mode (the
rounding/sign removed), where the straight-through gradient is the true
gradient away from the clip boundaries.
"""

from __future__ import annotations

import numpy as np

from .nn import autodiff as ad
from .nn import blocks
from .nn.autodiff import Tensor

FD_STEP = 1e-6


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm((a - b).ravel())
    den = np.linalg.norm(a.ravel()) + np.linalg.norm(b.ravel())
    if den == 0:
        return 0.0
    return float(num / den)


def check_gradients(fn, tensors: dict[str, Tensor], seed: int = 0,
                    step: float = FD_STEP) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps the named tensors to an output Tensor; every named tensor is
    perturbed elementwise.
    """
    rng = np.random.default_rng(seed)
    out = fn()
    proj = rng.normal(size=out.data.shape)

    def objective():
        return float((fn().data * proj).sum())

    for t in tensors.values():
        t.grad = None
    out = fn()
    out.backward(proj)

    worst = 0.0
    for name, t in tensors.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        fd = np.zeros_like(t.data)
        flat = t.data.ravel()
        fd_flat = fd.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = objective()
            flat[i] = orig - step
            down = objective()
            flat[i] = orig
            fd_flat[i] = (up - down) / (2 * step)
        worst = max(worst, relative_error(np.asarray(analytic), fd))
    return worst


def _away_from(x, centers, margin=5e-3):
    """Nudges values off kink points so central differences stay two-sided."""
    for c in centers:
        near = np.abs(x - c) < margin
        x = np.where(near, c + np.sign(x - c + 1e-12) * margin * 2, x)
    return x


def run_gradcheck(seed: int = 0, instances: int = 20) -> dict[str, float]:
    """Finite-difference error per op over random toy instances."""
    rng = np.random.default_rng(seed)
    results = {}

    def record(name, build):
        worst = 0.0
        for k in range(instances):
            worst = max(worst, build(rng, seed * 1000 + k))
        results[name] = worst

    def t(shape, rng, scale=1.0):
        return Tensor(scale * rng.normal(size=shape), requires_grad=True)

    def conv_case(rng, s):
        x = t((2, 5, 5, 3), rng)
        w = t((3, 3, 3, 4), rng)
        stride = int(rng.choice([1, 2]))
        return check_gradients(
            lambda: ad.conv2d(x, w, stride=stride, padding="same"),
            {"x": x, "w": w}, seed=s)
    record("conv2d", conv_case)

    def depthwise_case(rng, s):
        x = t((2, 5, 5, 3), rng)
        w = t((3, 3, 3, 2), rng)
        return check_gradients(lambda: ad.depthwise_conv2d(x, w),
                               {"x": x, "w": w}, seed=s)
    record("depthwise_conv2d", depthwise_case)

    def dense_case(rng, s):
        x = t((4, 1, 1, 6), rng)
        w = t((6, 3), rng)
        b = t((3,), rng)
        return check_gradients(lambda: ad.dense(x, w, b),
                               {"x": x, "w": w, "b": b}, seed=s)
    record("dense", dense_case)

    def bn_case(rng, s):
        x = t((4, 3, 3, 2), rng)
        scale = t((2,), rng)
        bias = t((2,), rng)
        return check_gradients(
            lambda: ad.batchnorm_train(x, scale, bias)[0],
            {"x": x, "scale": scale, "bias": bias}, seed=s)
    record("batchnorm", bn_case)

    def dprelu_case(rng, s):
        xd = rng.normal(size=(2, 4, 4, 3))
        alpha = rng.normal(size=3) * 0.3
        xd = _away_from(xd, alpha.reshape(1, 1, 1, 3), margin=0.02)
        x = Tensor(xd, requires_grad=True)
        pa = Tensor(alpha, requires_grad=True)
        pb = t((3,), rng)
        pg = Tensor(np.full(3, 0.25) + 0.1 * rng.normal(size=3), requires_grad=True)
        pe = Tensor(np.ones(3) + 0.1 * rng.normal(size=3), requires_grad=True)
        return check_gradients(
            lambda: ad.dprelu(x, pa, pb, pg, pe),
            {"x": x, "alpha": pa, "beta": pb, "gamma": pg, "eta": pe}, seed=s)
    record("dprelu", dprelu_case)

    def se_case(rng, s):
        x = Tensor(_away_from(rng.normal(size=(2, 4, 4, 8)), [0.0]),
                   requires_grad=True)
        params = blocks.SEParams.create(8, 8, rng)
        ctx = blocks.QuantContext(training=False, phase=1)
        tensors = {"x": x, **params.tensors()}
        return check_gradients(lambda: blocks.se_4b(x, 8, params, ctx),
                               tensors, seed=s)
    record("se_path", se_case)

    def avg_pool_case(rng, s):
        x = t((2, 6, 6, 2), rng)
        return check_gradients(lambda: ad.avg_pool(x, 3, 2, "same"),
                               {"x": x}, seed=s)
    record("avg_pool", avg_pool_case)

    def spatial_mean_case(rng, s):
        x = t((3, 5, 5, 4), rng)
        return check_gradients(lambda: ad.spatial_mean(x), {"x": x}, seed=s)
    record("spatial_mean", spatial_mean_case)

    def reshape_add_case(rng, s):
        x = t((2, 3, 3, 8), rng)
        r = t((2, 6, 6, 4), rng)
        mode = "pad" if s % 2 else "tile"
        return check_gradients(lambda: blocks.reshape_add(x, r, mode),
                               {"x": x, "r": r}, seed=s)
    record("reshape_add", reshape_add_case)

    def avg_channels_case(rng, s):
        x = t((2, 3, 3, 8), rng)
        return check_gradients(lambda: ad.avg_channels(x, 2), {"x": x}, seed=s)
    record("avg_channels", avg_channels_case)

    def quant_surrogate_case(rng, s):
        # away from +-B by a clear margin; surrogate fake-quant is smooth there
        xd = rng.normal(size=(3, 2, 2, 4))
        xd = np.clip(xd, -2.5, 2.5)
        xd = _away_from(xd, [-1.0, 1.0], margin=1e-2)
        x = Tensor(xd, requires_grad=True)
        return check_gradients(
            lambda: ad.fake_quant(x, 1.0, 8, surrogate=True), {"x": x}, seed=s)
    record("fake_quant_surrogate", quant_surrogate_case)

    def softmax_case(rng, s):
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        labels = rng.integers(0, 6, size=4)
        return check_gradients(lambda: ad.cross_entropy(x, labels),
                               {"x": x}, seed=s)
    record("cross_entropy", softmax_case)

    return results
