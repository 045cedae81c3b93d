"""Attribute value predictor: a three-conv network over the spatial feature.

One backbone (two same-padded 3x3 convs, SiLU after each) is shared by all
attributes of a bias; each attribute owns a final 3x3 conv emitting
``heads * token_count`` logit channels. The final conv starts at zero weights
with bias -8 so an untrained predictor leaves the base attention essentially
untouched (attribute mass ~ e^-8 per row).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bias import BiasSpec, attribute_label
from .errors import DomainError, ShapeError
from .tensor import Tensor, concat, conv2d, silu, stack

INIT_HEAD_BIAS = -8.0


@dataclass
class AttributePredictor:
    """Shared-backbone logit predictor for every attribute of one bias."""

    name: str
    bias: BiasSpec
    heads: int
    token_count: int
    input_resolution: tuple[int, int]
    feat_dim: int
    backbone: dict = field(default_factory=dict)  # c1.w c1.b c2.w c2.b
    head_convs: dict = field(default_factory=dict)  # attribute-id -> {"w": ..., "b": ...}

    def __post_init__(self):
        missing = [a for a in self.bias.attributes if a not in self.head_convs]
        extra = [a for a in self.head_convs if a not in self.bias.attributes]
        if missing or extra:
            raise DomainError(f"head/attribute mismatch: missing {missing}, orphaned {extra}")

    @property
    def spatial_size(self) -> int:
        return self.input_resolution[0] * self.input_resolution[1]

    def parameters(self) -> dict[str, Tensor]:
        out = {f"{self.name}.backbone.{k}": v for k, v in self.backbone.items()}
        for attr, conv in self.head_convs.items():
            label = attribute_label(attr)
            out[f"{self.name}.head.{label}.w"] = conv["w"]
            out[f"{self.name}.head.{label}.b"] = conv["b"]
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.parameters().values():
            t.requires_grad = flag


def init_attribute_predictor(
    name: str,
    bias: BiasSpec,
    feat_dim: int,
    heads: int,
    token_count: int,
    input_resolution: tuple[int, int],
    hidden: int = 32,
    rng: np.random.Generator | None = None,
    dtype=np.float64,
) -> AttributePredictor:
    rng = rng or np.random.default_rng(0)

    def conv_init(c_out, c_in, gain=1.0):
        w = rng.standard_normal((c_out, c_in, 3, 3)) * gain / np.sqrt(c_in * 9)
        return Tensor(w.astype(dtype), requires_grad=True), Tensor(
            np.zeros(c_out, dtype=dtype), requires_grad=True
        )

    c1w, c1b = conv_init(hidden, feat_dim)
    c2w, c2b = conv_init(hidden, hidden)
    heads_convs = {}
    for attr in bias.attributes:
        w = Tensor(np.zeros((heads * token_count, hidden, 3, 3), dtype=dtype), requires_grad=True)
        b = Tensor(np.full(heads * token_count, INIT_HEAD_BIAS, dtype=dtype), requires_grad=True)
        heads_convs[attr] = {"w": w, "b": b}
    return AttributePredictor(
        name=name,
        bias=bias,
        heads=heads,
        token_count=token_count,
        input_resolution=input_resolution,
        feat_dim=feat_dim,
        backbone={"c1.w": c1w, "c1.b": c1b, "c2.w": c2w, "c2.b": c2b},
        head_convs=heads_convs,
    )


def _backbone_forward(ap: AttributePredictor, x: Tensor) -> Tensor:
    h = silu(conv2d(x, ap.backbone["c1.w"], ap.backbone["c1.b"]))
    return silu(conv2d(h, ap.backbone["c2.w"], ap.backbone["c2.b"]))


def _logits_from_channels(ap: AttributePredictor, out: Tensor) -> Tensor:
    # [heads*T_a, h, w] -> [heads, S, T_a]
    return out.reshape(ap.heads, ap.token_count, ap.spatial_size).transpose(0, 2, 1)


def predict(ap: AttributePredictor, attribute, z_t: Tensor) -> Tensor:
    """Per-head attribute-token logits for one spatial feature map [S, feat_dim]."""
    if attribute not in ap.head_convs:
        raise DomainError(f"unknown attribute {attribute!r} for predictor {ap.name}")
    h, w = ap.input_resolution
    if z_t.ndim != 2 or z_t.shape != (h * w, ap.feat_dim):
        raise ShapeError(f"z_t shape {z_t.shape} not reshapeable to {h}x{w} x {ap.feat_dim}")
    x = z_t.transpose(1, 0).reshape(ap.feat_dim, h, w)
    feats = _backbone_forward(ap, x)
    head = ap.head_convs[attribute]
    return _logits_from_channels(ap, conv2d(feats, head["w"], head["b"]))


def predict_batch(ap: AttributePredictor, attributes, z: Tensor) -> Tensor:
    """Batched ``predict``: z is [B, S, feat_dim], attributes one id per sample.

    The backbone runs once over the whole batch; head convs run per distinct
    attribute group, so a mixed-attribute batch still trains every involved
    head in one step.
    """
    b = z.shape[0]
    if len(attributes) != b:
        raise ShapeError(f"{len(attributes)} attributes for batch of {b}")
    h, w = ap.input_resolution
    x = z.transpose(0, 2, 1).reshape(b, ap.feat_dim, h, w)
    feats = _backbone_forward(ap, x)
    groups: dict = {}
    for i, attr in enumerate(attributes):
        if attr not in ap.head_convs:
            raise DomainError(f"unknown attribute {attr!r} for predictor {ap.name}")
        groups.setdefault(attr, []).append(i)
    slots: list = [None] * b
    for attr, idxs in groups.items():
        head = ap.head_convs[attr]
        sub = concat([feats[i : i + 1] for i in idxs], axis=0) if len(idxs) > 1 else feats[idxs[0] : idxs[0] + 1]
        out = conv2d(sub, head["w"], head["b"])
        for j, i in enumerate(idxs):
            slots[i] = _logits_from_channels(ap, out[j])
    return stack(slots, axis=0)


def trainable_parameters(ap: AttributePredictor, attribute) -> dict[str, Tensor]:
    """Backbone plus the selected attribute's head; nothing from the base model."""
    if attribute not in ap.head_convs:
        raise DomainError(f"unknown attribute {attribute!r} for predictor {ap.name}")
    out = {f"{ap.name}.backbone.{k}": v for k, v in ap.backbone.items()}
    label = attribute_label(attribute)
    out[f"{ap.name}.head.{label}.w"] = ap.head_convs[attribute]["w"]
    out[f"{ap.name}.head.{label}.b"] = ap.head_convs[attribute]["b"]
    return out
