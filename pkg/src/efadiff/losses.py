"""Training objectives: masked L1 attention regularizers and the
mask-restricted noise-reconstruction loss.

Norms are raw sums, not means; the default loss weights are calibrated for
that convention. Masks are strictly binary; the feature-resolution mask is
produced from the pixel mask by block averaging with a 0.5 threshold (ties
count as subject).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import AttentionTrace, extract_attribute_weights
from .errors import ShapeError, ValidationError
from .tensor import Tensor, absolute, square


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1  # weight of the target-scenario regularizer
    lambda2: float = 0.1  # weight of the counterfactual-scenario regularizer

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValidationError(f"{name} must be finite and >= 0, got {v}")


def _require_binary(arr: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.isin(arr, (0, 1)).all():
        raise ValidationError(f"{what} must be strictly binary")
    return arr.astype(np.float64)


def downsample_mask(pixel_mask: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Block-average then threshold at 0.5 (ties -> 1); strictly binary output."""
    pm = _require_binary(pixel_mask, "pixel mask")
    h, w = pm.shape
    hf, wf = target
    if h % hf or w % wf:
        raise ShapeError(f"mask {h}x{w} not divisible into {hf}x{wf} blocks")
    blocks = pm.reshape(hf, h // hf, wf, w // wf).mean(axis=(1, 3))
    return (blocks >= 0.5).astype(np.float64)


@dataclass
class SpatialMask:
    """Pixel-resolution subject mask plus its feature-resolution downsampling."""

    pixel_mask: np.ndarray  # [h_img, w_img] in {0, 1}
    feature_mask: np.ndarray  # [h_f, w_f] in {0, 1}

    def __post_init__(self):
        self.pixel_mask = _require_binary(self.pixel_mask, "pixel mask")
        self.feature_mask = _require_binary(self.feature_mask, "feature mask")

    @classmethod
    def from_pixel(cls, pixel_mask: np.ndarray, feature_resolution: tuple[int, int]) -> "SpatialMask":
        return cls(pixel_mask=np.asarray(pixel_mask), feature_mask=downsample_mask(pixel_mask, feature_resolution))


def reg_loss(attr_weights: Tensor, w) -> Tensor:
    """L1 of spatially masked post-softmax attribute weights.

    ``attr_weights`` is [heads, S, T_a]; ``w`` is a binary [S] vector
    broadcast over heads and tokens. Weights are nonnegative, so this equals
    the masked sum.
    """
    wv = _require_binary(w.data if isinstance(w, Tensor) else w, "spatial mask")
    if wv.shape != (attr_weights.shape[1],):
        raise ShapeError(f"mask shape {wv.shape} != (S,) = ({attr_weights.shape[1]},)")
    return (absolute(attr_weights) * Tensor(wv.reshape(1, -1, 1))).sum()


def reg_trg(trace: AttentionTrace) -> Tensor:
    """Target-scenario regularizer: the all-ones mask, every spatial position."""
    weights = extract_attribute_weights(trace)
    return reg_loss(weights, np.ones(weights.shape[1]))


def reg_cf(trace: AttentionTrace, mask: SpatialMask) -> Tensor:
    """Counterfactual-scenario regularizer: positions outside the subject only."""
    weights = extract_attribute_weights(trace)
    s = weights.shape[1]
    if mask.feature_mask.size != s:
        raise ShapeError(f"feature mask size {mask.feature_mask.size} != attention positions {s}")
    return reg_loss(weights, 1.0 - mask.feature_mask.reshape(-1))


def recon_loss(noise: Tensor, prediction: Tensor, mask: SpatialMask) -> Tensor:
    """Squared error between true and predicted noise inside the subject mask."""
    if noise.shape != prediction.shape:
        raise ShapeError(f"noise {noise.shape} vs prediction {prediction.shape}")
    pm = mask.pixel_mask
    if noise.shape[-2:] != pm.shape:
        raise ShapeError(f"mask {pm.shape} does not match spatial dims of {noise.shape}")
    m = pm if noise.ndim == 2 else np.broadcast_to(pm, noise.shape)
    return square((noise - prediction) * Tensor(np.ascontiguousarray(m))).sum()


def total_loss(recon, rtrg, rcf, w: LossWeights):
    """recon + lambda1 * rtrg + lambda2 * rcf; accepts scalars or Tensors."""
    for v in (recon, rtrg, rcf):
        val = float(v.data) if isinstance(v, Tensor) else float(v)
        if not math.isfinite(val):
            raise ValidationError("loss terms must be finite")
    return recon + rtrg * w.lambda1 + rcf * w.lambda2
