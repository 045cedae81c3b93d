"""Small U-shaped noise predictor with two cross-attention sites.

The encoder is prompt-free; prompts enter only through the attention sites on
the up path, one at 8x8 (32 features, 2 heads; the attribute-injection site)
and one at 16x16 (16 features, 1 head). The model operates on images rescaled
to [-1, 1] and predicts the added noise.

Checkpoints store a flat name -> tensor map plus structural metadata; the
architecture hash covers names, shapes, and head geometry so adapters can
refuse incompatible bases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .attention import SUPPRESSED_LOGIT, CrossAttentionLayer, cross_attention, efa_attention
from .bias import BiasSpec, parse_attribute_label
from .errors import CompatibilityError, ShapeError, ValidationError
from .predictor import AttributePredictor, init_attribute_predictor, predict_batch
from .serialize import architecture_hash, load_checkpoint, save_checkpoint
from .tensor import Tensor, avgpool2d, concat, conv2d, silu, stack, upsample_nearest
from .text import Vocabulary, encode


@dataclass(frozen=True)
class ModelDims:
    image_size: int = 32
    channels: tuple[int, int, int] = (8, 16, 32)  # at 32x32, 16x16, 8x8
    embed_dim: int = 32
    time_dim: int = 32
    heads8: int = 2
    d8: int = 16
    heads16: int = 1
    d16: int = 16

    def as_meta(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            out[f"dims.{k}"] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        return out

    @staticmethod
    def from_meta(meta: dict[str, str]) -> "ModelDims":
        def get(k, cast=int):
            return cast(meta[f"dims.{k}"])

        return ModelDims(
            image_size=get("image_size"),
            channels=tuple(int(x) for x in meta["dims.channels"].split(",")),
            embed_dim=get("embed_dim"),
            time_dim=get("time_dim"),
            heads8=get("heads8"),
            d8=get("d8"),
            heads16=get("heads16"),
            d16=get("d16"),
        )


def _timestep_features(t: np.ndarray, dim: int, dtype) -> np.ndarray:
    """Sinusoidal features of integer timesteps, [B, dim]."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


class Denoiser:
    """Epsilon-prediction model; parameters live in a flat name -> Tensor dict."""

    def __init__(self, vocab: Vocabulary, dims: ModelDims = ModelDims(), rng=None, dtype=np.float32):
        self.vocab = vocab
        self.dims = dims
        self.dtype = np.dtype(dtype)
        rng = rng or np.random.default_rng(0)
        c0, c1, c2 = dims.channels
        e, td = dims.embed_dim, dims.time_dim
        if vocab.embed_dim != e:
            raise ShapeError(f"vocabulary embed_dim {vocab.embed_dim} != model embed_dim {e}")
        p: dict[str, Tensor] = {"embed.table": vocab.embedding_table}

        def conv_p(name, c_out, c_in, zero=False):
            if zero:
                w = np.zeros((c_out, c_in, 3, 3))
            else:
                w = rng.standard_normal((c_out, c_in, 3, 3)) / math.sqrt(c_in * 9)
            p[f"{name}.w"] = Tensor(w.astype(self.dtype), True)
            p[f"{name}.b"] = Tensor(np.zeros(c_out, dtype=self.dtype), True)

        def lin_p(name, n_out, n_in, gain=1.0):
            p[f"{name}.w"] = Tensor((rng.standard_normal((n_in, n_out)) * gain / math.sqrt(n_in)).astype(self.dtype), True)
            p[f"{name}.b"] = Tensor(np.zeros(n_out, dtype=self.dtype), True)

        conv_p("stem", c0, 3)
        lin_p("temb.base", td, td)
        conv_p("down1.c1", c1, c0)
        lin_p("down1.temb", c1, td)
        conv_p("down1.c2", c1, c1)
        conv_p("down2.c1", c2, c1)
        lin_p("down2.temb", c2, td)
        conv_p("down2.c2", c2, c2)
        conv_p("mid.c1", c2, c2)
        lin_p("mid.temb", c2, td)
        for name, feat, heads, d in (("site8", c2, dims.heads8, dims.d8), ("site16", c1, dims.heads16, dims.d16)):
            hd = heads * d
            lin_p(f"{name}.w_q", hd, feat, gain=0.5)
            lin_p(f"{name}.w_k", hd, e, gain=0.5)
            lin_p(f"{name}.w_v", hd, e, gain=0.5)
            lin_p(f"{name}.w_out", feat, hd, gain=0.2)
            del p[f"{name}.w_q.b"], p[f"{name}.w_k.b"], p[f"{name}.w_v.b"], p[f"{name}.w_out.b"]
        conv_p("up8.c1", c2, c2)
        conv_p("up16.c1", c1, c2 + c1)
        lin_p("up16.temb", c1, td)
        conv_p("up16.c2", c1, c1)
        conv_p("up32.c1", c0, c1 + c0)
        conv_p("out", 3, c0, zero=True)
        self.params = p
        self.sites = {
            8: CrossAttentionLayer(
                w_q=p["site8.w_q.w"], w_k=p["site8.w_k.w"], w_v=p["site8.w_v.w"],
                w_out=p["site8.w_out.w"], heads=dims.heads8, d=dims.d8,
            ),
            16: CrossAttentionLayer(
                w_q=p["site16.w_q.w"], w_k=p["site16.w_k.w"], w_v=p["site16.w_v.w"],
                w_out=p["site16.w_out.w"], heads=dims.heads16, d=dims.d16,
            ),
        }

    # the site the adapter augments by default: lowest resolution on the up path
    @property
    def efa_site(self) -> int:
        return 8

    @property
    def site_resolutions(self) -> tuple[int, ...]:
        return (8, 16)

    def site_feat_dim(self, res: int) -> int:
        return self.sites[res].feat_dim

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def arch_hash(self) -> str:
        return architecture_hash(self.params, extra=self.dims.as_meta())

    # -- forward -----------------------------------------------------------

    def _conv(self, name, x):
        return conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _temb(self, name, base):
        t = base @ self.params[f"{name}.w"] + self.params[f"{name}.b"]
        return t.reshape(t.shape[0], t.shape[1], 1, 1)

    def _attend_site(self, res, h, prompts, efa, traces, features):
        layer = self.sites[res]
        b, c, hh, ww = h.shape
        z = h.reshape(b, c, hh * ww).transpose(0, 2, 1)  # [B, S, C]
        if features is not None:
            features[res] = z
        site_efa = (efa or {}).get(res)
        ap_logits = None
        if site_efa is not None:
            ap, attrs, bank, suppressed = site_efa
            if suppressed:
                shape = (b, layer.heads, hh * ww, bank.token_count)
                ap_logits = Tensor(np.full(shape, SUPPRESSED_LOGIT, dtype=self.dtype))
            else:
                ap_logits = predict_batch(ap, attrs, z)
        outs = []
        for i in range(b):
            if site_efa is not None:
                out_i, trace = efa_attention(layer, z[i], prompts[i], ap_logits[i], bank.entry(attrs[i]))
            else:
                out_i, trace = cross_attention(layer, z[i], prompts[i])
            outs.append(out_i)
            if traces is not None:
                traces.setdefault(res, []).append(trace)
        att = stack(outs).transpose(0, 2, 1).reshape(b, c, hh, ww)
        return h + att

    def forward(
        self,
        x: Tensor,
        t,
        prompts,
        efa: dict | None = None,
        collect_traces: bool = False,
        collect_features: bool = False,
        stop_after_site: int | None = None,
    ):
        """Predict noise for a batch.

        ``x`` is [B, 3, H, W] in model scale, ``t`` an int array [B],
        ``prompts`` one EncodedPrompt per sample. ``efa`` maps a site
        resolution to (predictor, per-sample attributes, value bank,
        suppressed). Returns (eps, traces, features); ``eps`` is None when
        ``stop_after_site`` cuts the pass short.
        """
        b = x.shape[0]
        if len(prompts) != b:
            raise ShapeError(f"{len(prompts)} prompts for batch of {b}")
        traces: dict | None = {} if collect_traces else None
        features: dict | None = {} if collect_features else None
        tfeat = Tensor(_timestep_features(t, self.dims.time_dim, self.dtype))
        temb = silu(tfeat @ self.params["temb.base.w"] + self.params["temb.base.b"])

        h0 = silu(self._conv("stem", x))
        h = avgpool2d(h0, 2)
        h = self._conv("down1.c1", h) + self._temb("down1.temb", temb)
        h1 = silu(self._conv("down1.c2", silu(h)))
        h = avgpool2d(h1, 2)
        h = self._conv("down2.c1", h) + self._temb("down2.temb", temb)
        h2 = silu(self._conv("down2.c2", silu(h)))
        m = silu(self._conv("mid.c1", h2) + self._temb("mid.temb", temb))
        m = self._attend_site(8, m, prompts, efa, traces, features)
        if stop_after_site == 8:
            return None, traces, features
        u = silu(self._conv("up8.c1", m))
        u = concat([upsample_nearest(u, 2), h1], axis=1)
        u = silu(self._conv("up16.c1", u) + self._temb("up16.temb", temb))
        u = self._attend_site(16, u, prompts, efa, traces, features)
        if stop_after_site == 16:
            return None, traces, features
        u = silu(self._conv("up16.c2", u))
        u = concat([upsample_nearest(u, 2), h0], axis=1)
        u = silu(self._conv("up32.c1", u))
        eps = self._conv("out", u)
        return eps, traces, features

    def site_features(self, x, t, prompts, efa=None) -> dict:
        """The feature entering each attention site for this input."""
        _, _, feats = self.forward(x, t, prompts, efa=efa, collect_features=True)
        return feats

    def encode_prompt(self, prompt: str):
        return encode(prompt, self.vocab)


def save_base_checkpoint(path, model: Denoiser, meta: dict[str, str] | None = None) -> None:
    """Base checkpoint plus the vocabulary token file next to it."""
    full_meta = {"kind": "base", "arch_hash": model.arch_hash(), "dtype": model.dtype.name}
    full_meta.update(model.dims.as_meta())
    full_meta.update(meta or {})
    save_checkpoint(path, model.params, full_meta)
    model.vocab.save_tokens(str(path) + ".vocab")


def load_base_checkpoint(path) -> tuple[Denoiser, dict[str, str]]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "base":
        raise ValidationError(f"{path} is not a base checkpoint")
    dims = ModelDims.from_meta(meta)
    tokens = Vocabulary.load_tokens(str(path) + ".vocab")
    table = Tensor(tensors["embed.table"], requires_grad=False)
    vocab = Vocabulary(tokens=tokens, embedding_table=table)
    model = Denoiser(vocab, dims, dtype=np.dtype(meta["dtype"]))
    for name, arr in tensors.items():
        if name not in model.params:
            raise CompatibilityError(f"checkpoint tensor {name!r} has no slot in the architecture")
        if model.params[name].shape != arr.shape:
            raise CompatibilityError(f"tensor {name!r} shape {arr.shape} != {model.params[name].shape}")
        model.params[name].data = arr.astype(model.dtype, copy=True)
        model.params[name].requires_grad = False
    if model.arch_hash() != meta["arch_hash"]:
        raise CompatibilityError(
            f"architecture hash mismatch: checkpoint {meta['arch_hash']}, rebuilt {model.arch_hash()}"
        )
    return model, meta


@dataclass
class EfaAdapter:
    """Per-bias attribute predictors for one or more attention sites, plus the
    frozen value banks they inject."""

    bias: BiasSpec
    predictors: dict  # site res -> AttributePredictor
    banks: dict = field(default_factory=dict)  # site res -> AttributeValueBank
    base_arch_hash: str = ""

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for ap in self.predictors.values():
            out.update(ap.parameters())
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.parameters().values():
            t.requires_grad = flag

    def attach(self, model: Denoiser) -> None:
        """Build value banks from the (frozen) base model; verifies the hash."""
        from .attention import build_value_bank

        if self.base_arch_hash and self.base_arch_hash != model.arch_hash():
            raise CompatibilityError(
                f"adapter was trained against base {self.base_arch_hash}, "
                f"got {model.arch_hash()}"
            )
        self.base_arch_hash = model.arch_hash()
        for res in self.predictors:
            self.banks[res] = build_value_bank(model.sites[res], model.vocab, self.bias)

    def forward_spec(self, attributes, suppressed: bool = False) -> dict:
        """The ``efa`` argument for ``Denoiser.forward`` for a batch."""
        if not self.banks:
            raise ValidationError("adapter not attached to a base model")
        return {
            res: (ap, list(attributes), self.banks[res], suppressed)
            for res, ap in self.predictors.items()
        }


def init_adapter(
    model: Denoiser, bias: BiasSpec, sites=(8,), hidden: int = 32, rng=None, seed: int = 0
) -> EfaAdapter:
    """Fresh adapter for ``bias`` over the given attention sites of ``model``."""
    from .attention import build_value_bank

    rng = rng or np.random.default_rng(seed)
    predictors = {}
    token_count = None
    for res in sites:
        if res not in model.sites:
            raise ValidationError(f"model has no attention site at {res}x{res}")
        bank = build_value_bank(model.sites[res], model.vocab, bias)
        token_count = bank.token_count
        predictors[res] = init_attribute_predictor(
            name=f"ap{res}",
            bias=bias,
            feat_dim=model.site_feat_dim(res),
            heads=model.sites[res].heads,
            token_count=token_count,
            input_resolution=(res, res),
            hidden=hidden,
            rng=rng,
            dtype=model.dtype,
        )
    adapter = EfaAdapter(bias=bias, predictors=predictors)
    adapter.attach(model)
    return adapter


def save_adapter_checkpoint(path, adapter: EfaAdapter, meta: dict[str, str] | None = None) -> None:
    full_meta = {
        "kind": "adapter",
        "base_arch_hash": adapter.base_arch_hash,
        "bias.name": adapter.bias.name,
        "bias.attributes": ";".join(
            "+".join(a) if isinstance(a, tuple) else a for a in adapter.bias.attributes
        ),
        "bias.template": adapter.bias.prompt_template.replace(" ", "_"),
        "sites": ",".join(str(r) for r in sorted(adapter.predictors)),
    }
    for res, ap in adapter.predictors.items():
        full_meta[f"ap{res}.heads"] = str(ap.heads)
        full_meta[f"ap{res}.tokens"] = str(ap.token_count)
        full_meta[f"ap{res}.feat"] = str(ap.feat_dim)
        full_meta[f"ap{res}.hidden"] = str(ap.backbone["c1.w"].shape[0])
    full_meta.update(meta or {})
    save_checkpoint(path, adapter.parameters(), full_meta)


def load_adapter_checkpoint(path, model: Denoiser) -> tuple[EfaAdapter, dict[str, str]]:
    """Load adapter parameters over a frozen base; refuses hash mismatches."""
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "adapter":
        raise ValidationError(f"{path} is not an adapter checkpoint")
    if meta["base_arch_hash"] != model.arch_hash():
        raise CompatibilityError(
            f"adapter base hash {meta['base_arch_hash']} != model hash {model.arch_hash()}"
        )
    attrs = tuple(parse_attribute_label(a) for a in meta["bias.attributes"].split(";"))
    bias = BiasSpec(meta["bias.name"], attrs, meta["bias.template"].replace("_", " "))
    sites = [int(r) for r in meta["sites"].split(",")]
    adapter = init_adapter(model, bias, sites=tuple(sites), hidden=int(meta[f"ap{sites[0]}.hidden"]))
    params = adapter.parameters()
    if set(params) != set(tensors):
        raise CompatibilityError("adapter checkpoint parameter names do not match the architecture")
    for name, arr in tensors.items():
        if params[name].shape != arr.shape:
            raise CompatibilityError(f"adapter tensor {name!r} shape {arr.shape} != {params[name].shape}")
        params[name].data = arr.astype(model.dtype, copy=True)
        params[name].requires_grad = False
    adapter.base_arch_hash = meta["base_arch_hash"]
    return adapter, meta
