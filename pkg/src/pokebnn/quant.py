"""Casting, fake quantization, and binarization with straight-through gradients.

All forward functions here are pure numpy; the autodiff wrappers in
``pokebnn.nn`` reuse them and attach the gradient rules:

- rounding is treated as identity (straight-through estimator),
- clipping gates the gradient to the open interval (-B, B).

Rounding is half-away-from-zero so integer kernels can reproduce the grids
bit-exactly. Signed b-bit grids end at C_b = 2^(b-1) - 0.5 and a small
epsilon keeps round/floor from overflowing the representable range.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_EPSILON = 2.0 ** -10


def grid_endpoint(bits: int) -> float:
    """End point C_b of the signed quantization grid."""
    return 2.0 ** (bits - 1) - 0.5


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def clip(x, lo, hi):
    """min(hi, max(lo, x)); gradient is 1 inside (lo, hi) and 0 outside."""
    if np.any(lo > hi):
        raise ValueError("clip lower bound exceeds upper bound")
    return np.minimum(hi, np.maximum(lo, x))


def int_cast(x, bits: int, epsilon: float = DEFAULT_EPSILON):
    """Signed cast: round(clip(x, -C_b + eps, C_b - eps)).

    Output is integer-valued (as float), in [-(2^(b-1)-1), 2^(b-1)-1].
    """
    c = grid_endpoint(bits)
    return round_half_away(clip(x, -c + epsilon, c - epsilon))


def uint_cast(x, bits: int, epsilon: float = DEFAULT_EPSILON):
    """Unsigned cast: floor(clip(x, 0, 2^b - eps)), in [0, 2^b - 1]."""
    return np.floor(clip(x, 0.0, 2.0 ** bits - epsilon))


def fake_quant(x, bound, bits: int, epsilon: float = DEFAULT_EPSILON):
    """Scale to the signed b-bit grid and back: int_b(x * C_b / B) * B / C_b.

    ``bound`` may be a scalar or broadcast per-channel along the last axis.
    The associated gradient is the indicator of (-B, B).
    """
    bound = np.asarray(bound)
    if np.any(bound <= 0):
        raise ValueError("quantization bound must be positive")
    if bits < 2:
        raise ValueError("fake_quant needs bits >= 2; use binarize for 1 bit")
    c = grid_endpoint(bits)
    return int_cast(x * (c / bound), bits, epsilon) * (bound / c)


def binarize(x):
    """sign(x) in {-1, +1} with sign(0) := +1.

    The forward pass never depends on the clipping bound; only the
    straight-through gradient does (see ``ste_mask``).
    """
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


def ste_mask(x, bound):
    """Straight-through gradient gate: 1 where x is inside (-B, B)."""
    x = np.asarray(x)
    return (np.abs(x) < bound).astype(x.dtype)


def fake_quant_surrogate(x, bound, bits: int, epsilon: float = DEFAULT_EPSILON):
    """The quantizer with rounding removed: a pure clip, smooth inside (-B, B).

    Used by finite-difference oracles; shares the STE gradient gate.
    """
    bound = np.asarray(bound)
    c = grid_endpoint(bits)
    return clip(x * (c / bound), -c + epsilon, c - epsilon) * (bound / c)


# ---------------------------------------------------------------------------
# Bound calibration
# ---------------------------------------------------------------------------

@dataclass
class QuantConfig:
    bits: int
    signed: bool = True
    bound_mode: str = "ema"  # fixed | ema | weight_per_channel
    fixed_bound: float = 1.0
    ema_alpha: float = 0.9
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.bits < 1:
            raise ValueError("bits must be >= 1")
        if not 0 < self.ema_alpha < 1:
            raise ValueError("ema_alpha must be in (0, 1)")
        if not 0 < self.epsilon < 0.5:
            raise ValueError("epsilon must be in (0, 0.5)")
        if self.bound_mode not in ("fixed", "ema", "weight_per_channel"):
            raise ValueError(f"unknown bound_mode {self.bound_mode!r}")


@dataclass
class BoundState:
    """Clipping bound for one quantizer; scalar for activations.

    Once frozen the bound never changes (updates become no-ops).
    """

    bound: np.ndarray = field(default_factory=lambda: np.float64(1.0))
    frozen: bool = False
    ema_alpha: float = 0.9

    def freeze(self) -> "BoundState":
        return replace(self, frozen=True)


def update_ema_bound(state: BoundState, batch) -> BoundState:
    """B <- alpha * B + (1 - alpha) * max|batch|; frozen states pass through."""
    if state.frozen:
        return state
    batch = np.asarray(batch)
    if batch.size == 0:
        raise ValueError("cannot calibrate a bound from an empty batch")
    peak = np.max(np.abs(batch))
    a = state.ema_alpha
    return replace(state, bound=a * state.bound + (1.0 - a) * peak)


def weight_channel_bounds(w, out_channel_axis: int = -1,
                          epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Per-output-channel bound B_o = max |w| over all other axes.

    Recomputed every step, never frozen. An all-zero channel would give a
    zero bound (division by zero downstream), so those are clamped to eps;
    this cannot happen after any nonzero initialization.
    """
    w = np.asarray(w)
    if w.size == 0:
        raise ValueError("empty weight tensor")
    axes = tuple(i for i in range(w.ndim)
                 if i != (out_channel_axis % w.ndim))
    bounds = np.max(np.abs(w), axis=axes)
    return np.maximum(bounds, epsilon)
