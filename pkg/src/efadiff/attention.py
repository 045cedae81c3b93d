"""Multi-head cross-attention and its attribute-injecting augmentation.

The augmented forward concatenates predictor-supplied logits to the scaled
query-key logits along the key axis, applies one softmax over all keys, and
concatenates the attribute value rows to the prompt value rows. Input and
output shapes are identical with and without the augmentation, and driving the
extra logits to -30 recovers the plain layer to within accumulation noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .bias import BiasSpec
from .errors import DomainError, ShapeError, ValidationError
from .tensor import Tensor, concat, matmul, softmax_lastdim

# Logit level at which injected keys carry negligible softmax mass; used by
# the equivalence oracle and the adapter-off code paths.
SUPPRESSED_LOGIT = -30.0


@dataclass
class CrossAttentionLayer:
    """Projection weights for one cross-attention site."""

    w_q: Tensor  # [feat_dim, heads*d]
    w_k: Tensor  # [embed_dim, heads*d]
    w_v: Tensor  # [embed_dim, heads*d]
    w_out: Tensor  # [heads*d, feat_dim]
    heads: int
    d: int

    def __post_init__(self):
        hd = self.heads * self.d
        if self.w_q.shape[1] != hd or self.w_k.shape[1] != hd or self.w_v.shape[1] != hd:
            raise ShapeError(
                f"projection columns must equal heads*d={hd}: "
                f"w_q {self.w_q.shape}, w_k {self.w_k.shape}, w_v {self.w_v.shape}"
            )
        if self.w_out.shape[0] != hd:
            raise ShapeError(f"w_out rows {self.w_out.shape[0]} != heads*d {hd}")
        if self.w_k.shape[0] != self.w_v.shape[0]:
            raise ShapeError("w_k and w_v must share the embedding dimension")

    @property
    def feat_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.w_k.shape[0]

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w_q": self.w_q,
            f"{prefix}.w_k": self.w_k,
            f"{prefix}.w_v": self.w_v,
            f"{prefix}.w_out": self.w_out,
        }


@dataclass
class AttentionTrace:
    """Pre- and post-softmax attention for one forward pass of one site."""

    logits: Tensor  # [heads, S, L + T_a]
    weights: Tensor  # same shape, rows sum to 1
    attribute_index_set: range  # [L, L + T_a)

    @property
    def attribute_token_count(self) -> int:
        return len(self.attribute_index_set)


@dataclass
class AttributeValueBank:
    """Frozen per-attribute value rows for one layer and one bias."""

    values: dict  # attribute-id -> Tensor [T_a, heads*d]
    token_count: int

    def entry(self, attribute) -> Tensor:
        try:
            return self.values[attribute]
        except KeyError:
            raise DomainError(f"no value bank entry for attribute {attribute!r}") from None


def build_value_bank(layer: CrossAttentionLayer, vocab, bias: BiasSpec) -> AttributeValueBank:
    """Compute V_a for every attribute of ``bias`` from the frozen encoder and W_v."""
    from .text import attribute_prompt, encode  # local import avoids a cycle

    values = {}
    count = None
    for attr in bias.attributes:
        emb = encode(attribute_prompt(bias, attr), vocab).embeddings
        v = matmul(emb.detach(), layer.w_v.detach())
        if count is None:
            count = v.shape[0]
        elif v.shape[0] != count:
            raise ValidationError(
                f"attribute prompts of bias {bias.name!r} produce unequal token counts"
            )
        values[attr] = v
    return AttributeValueBank(values=values, token_count=count)


def _project_heads(x: Tensor, w: Tensor, heads: int, d: int) -> Tensor:
    """[N, in] @ [in, heads*d] -> [heads, N, d]."""
    return matmul(x, w).reshape(x.shape[0], heads, d).transpose(1, 0, 2)


def _prompt_embeddings(prompt) -> Tensor:
    return prompt.embeddings if hasattr(prompt, "embeddings") else prompt


def _attend(layer: CrossAttentionLayer, z_t: Tensor, emb: Tensor, ap_logits, bank_entry):
    if z_t.ndim != 2 or z_t.shape[1] != layer.feat_dim:
        raise ShapeError(f"z_t shape {z_t.shape} incompatible with feat_dim {layer.feat_dim}")
    s = z_t.shape[0]
    l = emb.shape[0]
    q = _project_heads(z_t, layer.w_q, layer.heads, layer.d)  # [H, S, d]
    k = _project_heads(emb, layer.w_k, layer.heads, layer.d)  # [H, L, d]
    v = _project_heads(emb, layer.w_v, layer.heads, layer.d)  # [H, L, d]
    logits = matmul(q, k.transpose(0, 2, 1)) * (1.0 / math.sqrt(layer.d))  # [H, S, L]
    t_a = 0
    if ap_logits is not None:
        if ap_logits.shape[0] != layer.heads or ap_logits.shape[1] != s:
            raise ShapeError(f"ap_logits shape {ap_logits.shape} != ({layer.heads}, {s}, T_a)")
        t_a = ap_logits.shape[2]
        if bank_entry.shape != (t_a, layer.heads * layer.d):
            raise ShapeError(
                f"value bank entry shape {bank_entry.shape} != ({t_a}, {layer.heads * layer.d})"
            )
        v_a = bank_entry.reshape(t_a, layer.heads, layer.d).transpose(1, 0, 2)  # [H, T_a, d]
        logits = concat([logits, ap_logits], axis=2)  # [H, S, L+T_a]
        v = concat([v, v_a], axis=1)  # [H, L+T_a, d]
    weights = softmax_lastdim(logits)
    attended = matmul(weights, v)  # [H, S, d]
    merged = attended.transpose(1, 0, 2).reshape(s, layer.heads * layer.d)
    out = matmul(merged, layer.w_out)
    trace = AttentionTrace(logits=logits, weights=weights, attribute_index_set=range(l, l + t_a))
    return out, trace


def cross_attention(layer: CrossAttentionLayer, z_t: Tensor, prompt):
    """Scaled dot-product attention over prompt tokens; trace carries T_a = 0."""
    emb = _prompt_embeddings(prompt)
    if z_t.shape[0] < 1:
        raise ValidationError("z_t must contain at least one position")
    if emb.shape[0] < 2:
        raise ValidationError(f"prompt must have at least 2 tokens, got {emb.shape[0]}")
    return _attend(layer, z_t, emb, None, None)


def efa_attention(layer: CrossAttentionLayer, z_t: Tensor, prompt, ap_logits: Tensor, bank_entry: Tensor):
    """Cross-attention with predictor logits and attribute values joined in.

    One softmax runs over the L + T_a concatenated keys, so prompt and
    attribute attention compete for the same mass; output shape matches
    ``cross_attention`` exactly.
    """
    emb = _prompt_embeddings(prompt)
    return _attend(layer, z_t, emb, ap_logits, bank_entry)


def extract_attribute_weights(trace: AttentionTrace) -> Tensor:
    """Post-softmax columns belonging to the injected attribute tokens."""
    if trace.attribute_token_count == 0:
        raise DomainError("trace has no attribute tokens (T_a = 0)")
    lo, hi = trace.attribute_index_set.start, trace.attribute_index_set.stop
    return trace.weights[:, :, lo:hi]
