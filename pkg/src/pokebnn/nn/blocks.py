"""Differentiable composite blocks: DPReLU, the 4-bit SE gate, shortcut
reshaping, PokeConv, and the PokeInit stem.

Each block is a pure function of (input tensors, parameter struct, context).
The context selects train/eval batch-norm behavior, the quantization phase
(phase 1 binarizes activations only; phase 2 additionally quantizes weights
and the 4/8-bit activations), and the smooth-surrogate mode used by
finite-difference gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import quant
from . import autodiff as ad
from .autodiff import Tensor

BINARY_BOUND_DEFAULT = 3.0


@dataclass
class QuantContext:
    training: bool = True
    phase: int = 1
    binary_bound: float = BINARY_BOUND_DEFAULT
    surrogate: bool = False
    # override for the binary-weight gradient bound; None = per-channel max
    binary_weight_bound: float | None = None

    @property
    def weights_quantized(self) -> bool:
        return self.phase >= 2


@dataclass
class DPReLUParams:
    alpha: Tensor
    beta: Tensor
    gamma: Tensor
    eta: Tensor

    @classmethod
    def create(cls, channels: int, dtype=np.float64) -> "DPReLUParams":
        def p(v):
            return Tensor(np.full(channels, v, dtype=dtype), requires_grad=True)
        return cls(alpha=p(0.0), beta=p(0.0), gamma=p(0.25), eta=p(1.0))

    def tensors(self):
        return {"alpha": self.alpha, "beta": self.beta,
                "gamma": self.gamma, "eta": self.eta}


def dprelu(x: Tensor, params: DPReLUParams) -> Tensor:
    return ad.dprelu(x, params.alpha, params.beta, params.gamma, params.eta)


@dataclass
class BatchNormState:
    scale: Tensor
    bias: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9

    @classmethod
    def create(cls, channels: int, momentum: float = 0.9,
               dtype=np.float64) -> "BatchNormState":
        return cls(scale=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
                   bias=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
                   running_mean=np.zeros(channels, dtype=dtype),
                   running_var=np.ones(channels, dtype=dtype),
                   momentum=momentum)

    def tensors(self):
        return {"scale": self.scale, "bias": self.bias}


def batchnorm(x: Tensor, bn: BatchNormState, ctx: QuantContext) -> Tensor:
    if ctx.training:
        out, batch_mean, batch_var = ad.batchnorm_train(x, bn.scale, bn.bias)
        m = bn.momentum
        bn.running_mean = m * bn.running_mean + (1 - m) * batch_mean
        bn.running_var = m * bn.running_var + (1 - m) * batch_var
        return out
    return ad.batchnorm_eval(x, bn.scale, bn.bias, bn.running_mean, bn.running_var)


# ---------------------------------------------------------------------------
# Quantizer application
# ---------------------------------------------------------------------------

def binarize_act(x: Tensor, ctx: QuantContext) -> Tensor:
    """1-bit activations are always active, in every phase."""
    return ad.binarize(x, ctx.binary_bound, surrogate=ctx.surrogate)


def quantize_act(x: Tensor, bound_state: quant.BoundState, bits: int,
                 ctx: QuantContext) -> Tensor:
    """EMA-calibrated activation fake-quant; identity until phase 2.

    In training the bound keeps calibrating from batch peaks until frozen.
    """
    if ctx.training and not bound_state.frozen:
        updated = quant.update_ema_bound(bound_state, x.data)
        bound_state.bound = updated.bound
    if ctx.phase < 2:
        return x
    return ad.fake_quant(x, bound_state.bound, bits, surrogate=ctx.surrogate)


def quantize_weight(w: Tensor, bits: int, ctx: QuantContext) -> Tensor:
    """Per-output-channel weight quantization; raw weights until phase 2."""
    if not ctx.weights_quantized:
        return w
    bounds = quant.weight_channel_bounds(w.data)
    if bits == 1:
        grad_bound = (bounds if ctx.binary_weight_bound is None
                      else ctx.binary_weight_bound)
        return ad.binarize(w, grad_bound, surrogate=ctx.surrogate)
    return ad.fake_quant(w, bounds, bits, surrogate=ctx.surrogate)


# ---------------------------------------------------------------------------
# Shortcut reshaping
# ---------------------------------------------------------------------------

def reshape_add(x: Tensor, r: Tensor | None, expand_mode: str = "pad") -> Tensor:
    """Adds a shortcut, adapting channels then spatial size.

    Channel expansion zero-pads (local shortcuts) or tiles (block shortcuts);
    contraction averages runs of K channels. A spatial mismatch is closed
    with a 3x3 stride-2 average pool. Order matches the channel-first rule.
    """
    if r is None:
        return x
    xc, rc = x.data.shape[-1], r.data.shape[-1]
    if rc < xc:
        if expand_mode == "pad":
            r = ad.pad_channels(r, xc)
        elif expand_mode == "tile":
            r = ad.tile_channels(r, xc)
        else:
            raise ValueError(f"unknown expand_mode {expand_mode!r}")
    elif rc > xc:
        r = ad.avg_channels(r, xc)
    if r.data.shape[1:3] != x.data.shape[1:3]:
        r = ad.avg_pool(r, kernel=3, stride=2, padding="same")
        if r.data.shape[1:3] != x.data.shape[1:3]:
            raise ValueError(
                f"irreconcilable spatial shapes {r.data.shape} vs {x.data.shape}")
    return ad.add(x, r)


# ---------------------------------------------------------------------------
# SE gate (4-bit squeeze-and-excitation)
# ---------------------------------------------------------------------------

@dataclass
class SEParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    in1_bound: quant.BoundState = field(default_factory=quant.BoundState)
    in2_bound: quant.BoundState = field(default_factory=quant.BoundState)

    @classmethod
    def create(cls, in_channels: int, out_channels: int, rng,
               dtype=np.float64) -> "SEParams":
        hidden = max(1, in_channels // 8)
        def dense_init(fan_in, fan_out):
            std = (1.0 / fan_in) ** 0.5
            return Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)).astype(dtype),
                          requires_grad=True)
        return cls(
            w1=dense_init(in_channels, hidden),
            b1=Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
            w2=dense_init(hidden, out_channels),
            b2=Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True),
        )

    def tensors(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def se_4b(r: Tensor, out_channels: int, params: SEParams,
          ctx: QuantContext) -> Tensor:
    """Per-channel gate in [0, 1]: spatial mean, two 4-bit dense layers,
    hard sigmoid. The mean input and the gate output stay real-valued."""
    in_ch = r.data.shape[-1]
    if in_ch % 8:
        raise ValueError(f"SE input channels must be divisible by 8, got {in_ch}")
    s = ad.spatial_mean(r)
    s = quantize_act(s, params.in1_bound, 4, ctx)
    s = ad.dense(s, quantize_weight(params.w1, 4, ctx), params.b1)
    s = ad.relu(s)
    s = quantize_act(s, params.in2_bound, 4, ctx)
    s = ad.dense(s, quantize_weight(params.w2, 4, ctx), params.b2)
    return ad.hardsigmoid(s)


# ---------------------------------------------------------------------------
# PokeConv and PokeInit
# ---------------------------------------------------------------------------

@dataclass
class PokeConvParams:
    w: Tensor
    bn1: BatchNormState
    bn2: BatchNormState
    act: DPReLUParams
    se: SEParams

    @classmethod
    def create(cls, in_channels: int, out_channels: int, kernel: int, rng,
               dtype=np.float64) -> "PokeConvParams":
        fan_in = kernel * kernel * in_channels
        w = Tensor(rng.normal(0.0, (2.0 / fan_in) ** 0.5,
                              size=(kernel, kernel, in_channels, out_channels)
                              ).astype(dtype), requires_grad=True)
        return cls(w=w,
                   bn1=BatchNormState.create(out_channels, dtype=dtype),
                   bn2=BatchNormState.create(out_channels, dtype=dtype),
                   act=DPReLUParams.create(out_channels, dtype=dtype),
                   se=SEParams.create(in_channels, out_channels, rng, dtype=dtype))


def pokeconv(x: Tensor, r1: Tensor | None, params: PokeConvParams,
             stride: int = 1, ctx: QuantContext = QuantContext()) -> Tensor:
    """Binary convolution block.

    Binarized conv -> BN -> zero-pad local shortcut -> tiled block shortcut
    (only when r1 is given) -> DPReLU -> 4-bit SE gate on the block input ->
    BN.
    """
    r = x
    q = binarize_act(x, ctx)
    w = quantize_weight(params.w, 1, ctx)
    y = ad.conv2d(q, w, stride=stride, padding="same")
    y = batchnorm(y, params.bn1, ctx)
    y = reshape_add(y, r, expand_mode="pad")
    y = reshape_add(y, r1, expand_mode="tile")
    y = dprelu(y, params.act)
    gate = se_4b(r, y.data.shape[-1], params.se, ctx)
    y = ad.mul(y, gate)
    return batchnorm(y, params.bn2, ctx)


@dataclass
class PokeInitParams:
    w1: Tensor
    bn1: BatchNormState
    act1: DPReLUParams
    w2: Tensor
    bn2: BatchNormState
    act2: DPReLUParams
    in1_bound: quant.BoundState = field(default_factory=quant.BoundState)
    in2_bound: quant.BoundState = field(default_factory=quant.BoundState)

    @classmethod
    def create(cls, rng, in_channels: int = 3, mid: int = 32, out: int = 64,
               dtype=np.float64) -> "PokeInitParams":
        w1 = Tensor(rng.normal(0.0, (2.0 / (16 * in_channels)) ** 0.5,
                               size=(4, 4, in_channels, mid)).astype(dtype),
                    requires_grad=True)
        mult = out // mid
        w2 = Tensor(rng.normal(0.0, (2.0 / 9) ** 0.5,
                               size=(3, 3, mid, mult)).astype(dtype),
                    requires_grad=True)
        return cls(w1=w1, bn1=BatchNormState.create(mid, dtype=dtype),
                   act1=DPReLUParams.create(mid, dtype=dtype),
                   w2=w2, bn2=BatchNormState.create(out, dtype=dtype),
                   act2=DPReLUParams.create(out, dtype=dtype))


def pokeinit(x: Tensor, params: PokeInitParams,
             ctx: QuantContext = QuantContext()) -> Tensor:
    """8-bit stem: 4x4 stride-4 conv then 3x3 depthwise, each BN + DPReLU."""
    x = quantize_act(x, params.in1_bound, 8, ctx)
    x = ad.conv2d(x, quantize_weight(params.w1, 8, ctx), stride=4, padding="same")
    x = batchnorm(x, params.bn1, ctx)
    x = dprelu(x, params.act1)
    x = quantize_act(x, params.in2_bound, 8, ctx)
    x = ad.depthwise_conv2d(x, quantize_weight(params.w2, 8, ctx),
                            stride=1, padding="same")
    x = batchnorm(x, params.bn2, ctx)
    return dprelu(x, params.act2)
