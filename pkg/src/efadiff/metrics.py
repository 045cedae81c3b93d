"""Evaluation: attribute classification, deviation ratio, paired preservation
metrics, and attention-map export.

The classifier is a nearest-prototype oracle over the renderer's own palette,
so it is exact on clean synthetic data; on generated images the subject region
is estimated as the pixels closer to an attribute prototype than to any
background gray. The feature-similarity score is an explicit pixel-level
proxy (block-averaged, mean-centered cosine), not a learned embedding.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .bias import BiasSpec, attribute_label, sample_target
from .denoiser import Denoiser, EfaAdapter
from .diffusion import DiffusionSchedule, GenerationRecord, generate_batch
from .errors import DomainError, EvaluationError, ShapeError, ValidationError
from .imageio import write_pgm
from .tensor import Tensor
from .scenes import BACKGROUND_PROTOTYPES, attribute_color


@dataclass
class MetricsReport:
    n: int
    counts: dict
    deviation_ratio: float
    masked_psnr_db: float | None = None
    feature_similarity: float | None = None
    config_digest: str = ""
    abstained: int = 0
    dr_prompt_avg: float | None = None

    def __post_init__(self):
        if sum(self.counts.values()) != self.n:
            raise ValidationError(f"counts sum {sum(self.counts.values())} != N {self.n}")


def subject_prototypes(bias: BiasSpec) -> list[tuple[object, np.ndarray]]:
    return [(a, attribute_color(a)) for a in bias.attributes]


def estimate_subject_mask(image: np.ndarray, bias: BiasSpec) -> np.ndarray:
    """Pixels strictly closer to an attribute prototype than to any background gray."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected [3, h, w] image, got {img.shape}")
    px = img.reshape(3, -1).T  # [P, 3]
    attr_d = np.min(
        [((px - c) ** 2).sum(axis=1) for _, c in subject_prototypes(bias)], axis=0
    )
    bg_d = np.min(
        [((px - g) ** 2).sum(axis=1) for g in BACKGROUND_PROTOTYPES], axis=0
    )
    return (attr_d < bg_d).astype(np.float64).reshape(img.shape[1:])


def classify_attribute(image, mask, bias: BiasSpec):
    """Nearest-prototype label from the mean colour of the subject region.

    ``mask`` may be None for generated images, in which case the region is
    estimated. Returns None (abstain) when the estimated region is empty;
    ties break by attribute declaration order.
    """
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    if mask is None:
        region = estimate_subject_mask(img, bias)
        if region.sum() == 0:
            return None
    else:
        region = np.asarray(mask)
        if region.sum() < 1:
            raise ValidationError("provided mask selects no pixels")
    mean = img.reshape(3, -1)[:, region.reshape(-1) == 1].mean(axis=1)
    dists = [float(((mean - c) ** 2).sum()) for _, c in subject_prototypes(bias)]
    return bias.attributes[int(np.argmin(dists))]


def deviation_ratio(counts: dict, n_attributes: int) -> float:
    """Normalized max deviation of attribute frequencies from uniform.

    max_a |N_a/N - 1/n| / (1 - 1/n): 0 when perfectly uniform, 1 when all
    mass sits on one attribute.
    """
    if n_attributes < 2:
        raise DomainError(f"need at least 2 attributes, got {n_attributes}")
    if len(counts) > n_attributes:
        raise DomainError(f"{len(counts)} count keys for {n_attributes} attributes")
    values = [int(v) for v in counts.values()]
    if any(v < 0 for v in values):
        raise DomainError("counts must be nonnegative")
    total = sum(values)
    if total < 1:
        raise DomainError("N must be >= 1")
    uniform = 1.0 / n_attributes
    devs = [abs(v / total - uniform) for v in values]
    if len(values) < n_attributes:
        devs.append(uniform)  # some attribute has zero count
    return max(devs) / (1.0 - uniform)


PSNR_CAP_DB = 99.0


def masked_psnr(reference, candidate, exclude_mask) -> float:
    """PSNR (peak 1.0) over pixels outside the mask; capped at 99 dB."""
    ref = reference.data if isinstance(reference, Tensor) else np.asarray(reference)
    cand = candidate.data if isinstance(candidate, Tensor) else np.asarray(candidate)
    if ref.shape != cand.shape:
        raise ShapeError(f"reference {ref.shape} vs candidate {cand.shape}")
    m = np.asarray(exclude_mask)
    if not np.isin(m, (0, 1)).all():
        raise ValidationError("mask must be binary")
    if ref.shape[-2:] != m.shape:
        raise ShapeError(f"mask {m.shape} does not match image spatial dims {ref.shape}")
    outside = m == 0
    if not outside.any():
        raise DomainError("mask covers the whole image; nothing to compare")
    diff = (ref - cand)[..., outside] if ref.ndim == 2 else (ref - cand)[:, outside]
    mse = float((diff**2).mean())
    if mse < 1e-10:
        return PSNR_CAP_DB
    return 10.0 * math.log10(1.0 / mse)


def feature_similarity(reference, candidate) -> float:
    """Cosine similarity of 4x4 block-averaged, mean-centered pixel features."""
    ref = np.asarray(reference.data if isinstance(reference, Tensor) else reference)
    cand = np.asarray(candidate.data if isinstance(candidate, Tensor) else candidate)
    if ref.shape != cand.shape:
        raise ShapeError(f"reference {ref.shape} vs candidate {cand.shape}")

    def features(img):
        c, h, w = img.shape
        f = img.reshape(c, h // 4, 4, w // 4, 4).mean(axis=(2, 4)).reshape(-1)
        return f - f.mean()

    a, b = features(ref), features(cand)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        warnings.warn("feature_similarity: zero-variance image, returning 0")
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class PromptResult:
    prompt: str
    n: int
    counts_base: dict
    counts_debiased: dict
    dr_base: float
    dr_debiased: float
    psnr_db: float
    feat_sim: float
    abstained: int


@dataclass
class EvaluationResult:
    base: MetricsReport
    debiased: MetricsReport
    per_prompt: list[PromptResult] = field(default_factory=list)


def evaluate_debiasing(
    model: Denoiser,
    sched: DiffusionSchedule,
    adapter: EfaAdapter,
    eval_prompts,
    n_per_prompt: int,
    seeds,
    steps: int = 40,
    config_digest: str = "",
    suppressed: bool = False,
    eval_batch: int = 24,
    reuse_base: dict | None = None,
) -> EvaluationResult:
    """Paired same-seed evaluation of the base model against the adapter.

    For every prompt and seed the base image and the attribute-injected image
    come from the same noise; attributes are drawn uniformly per (prompt,
    seed). Deviation ratios are computed per prompt and averaged, pooled
    counts fill the reports, and masked PSNR excludes the base image's
    estimated subject region. ``reuse_base`` lets several adapter variants
    share one set of base generations.
    """
    if len(seeds) != n_per_prompt:
        raise ValidationError(f"{len(seeds)} seeds for n_per_prompt={n_per_prompt}")
    bias = adapter.bias
    pooled_base: dict = {}
    pooled_deb: dict = {}
    per_prompt: list[PromptResult] = []
    psnrs: list[float] = []
    feats: list[float] = []
    abst_base = abst_deb = 0
    for pi, prompt in enumerate(eval_prompts):
        if reuse_base is not None and prompt in reuse_base:
            base_records = reuse_base[prompt]
        else:
            base_records = []
            for lo in range(0, len(seeds), eval_batch):
                base_records += generate_batch(model, sched, prompt, seeds[lo : lo + eval_batch], steps)
            if reuse_base is not None:
                reuse_base[prompt] = base_records
        attrs = [
            sample_target(bias, np.random.default_rng((int(s), pi, 0xA77))) for s in seeds
        ]
        deb_records = []
        for lo in range(0, len(seeds), eval_batch):
            deb_records += generate_batch(
                model, sched, prompt, seeds[lo : lo + eval_batch], steps,
                efa=adapter, attributes=attrs[lo : lo + eval_batch], efa_suppressed=suppressed,
            )
        counts_b: dict = {}
        counts_d: dict = {}
        p_psnrs: list[float] = []
        p_feats: list[float] = []
        p_abst = 0
        for b_rec, d_rec in zip(base_records, deb_records):
            cb = classify_attribute(b_rec.image, None, bias)
            cd = classify_attribute(d_rec.image, None, bias)
            if cb is None:
                abst_base += 1
                p_abst += 1
            else:
                counts_b[cb] = counts_b.get(cb, 0) + 1
            if cd is None:
                abst_deb += 1
                p_abst += 1
            else:
                counts_d[cd] = counts_d.get(cd, 0) + 1
            subject = estimate_subject_mask(b_rec.image, bias)
            if subject.sum() > 0 and (subject == 0).any():
                p_psnrs.append(masked_psnr(b_rec.image, d_rec.image, subject))
                p_feats.append(feature_similarity(b_rec.image, d_rec.image))
        if not counts_b or not counts_d:
            continue
        dr_b = deviation_ratio(counts_b, bias.n_attributes)
        dr_d = deviation_ratio(counts_d, bias.n_attributes)
        per_prompt.append(
            PromptResult(
                prompt=prompt,
                n=len(seeds),
                counts_base=counts_b,
                counts_debiased=counts_d,
                dr_base=dr_b,
                dr_debiased=dr_d,
                psnr_db=float(np.mean(p_psnrs)) if p_psnrs else float("nan"),
                feat_sim=float(np.mean(p_feats)) if p_feats else float("nan"),
                abstained=p_abst,
            )
        )
        psnrs += p_psnrs
        feats += p_feats
        for k, v in counts_b.items():
            pooled_base[k] = pooled_base.get(k, 0) + v
        for k, v in counts_d.items():
            pooled_deb[k] = pooled_deb.get(k, 0) + v
    if not per_prompt:
        raise EvaluationError("every generation abstained; nothing to evaluate")
    base_report = MetricsReport(
        n=sum(pooled_base.values()),
        counts=pooled_base,
        deviation_ratio=deviation_ratio(pooled_base, bias.n_attributes),
        config_digest=config_digest,
        abstained=abst_base,
        dr_prompt_avg=float(np.mean([r.dr_base for r in per_prompt])),
    )
    deb_report = MetricsReport(
        n=sum(pooled_deb.values()),
        counts=pooled_deb,
        deviation_ratio=deviation_ratio(pooled_deb, bias.n_attributes),
        masked_psnr_db=float(np.mean(psnrs)) if psnrs else None,
        feature_similarity=float(np.mean(feats)) if feats else None,
        config_digest=config_digest,
        abstained=abst_deb,
        dr_prompt_avg=float(np.mean([r.dr_debiased for r in per_prompt])),
    )
    return EvaluationResult(base=base_report, debiased=deb_report, per_prompt=per_prompt)


def render_report(result: EvaluationResult, bias: BiasSpec) -> tuple[str, str]:
    """Flat key-value report text plus the per-prompt CSV."""
    lines = []
    for name, rep in (("base", result.base), ("debiased", result.debiased)):
        lines.append(f"{name}.n = {rep.n}")
        lines.append(f"{name}.abstained = {rep.abstained}")
        for a in bias.attributes:
            lines.append(f"{name}.count.{attribute_label(a)} = {rep.counts.get(a, 0)}")
        lines.append(f"{name}.deviation_ratio = {rep.deviation_ratio:.6f}")
        lines.append(f"{name}.deviation_ratio_prompt_avg = {rep.dr_prompt_avg:.6f}")
    if result.debiased.masked_psnr_db is not None:
        lines.append(f"debiased.masked_psnr_db = {result.debiased.masked_psnr_db:.4f}")
    if result.debiased.feature_similarity is not None:
        lines.append(f"debiased.feature_similarity = {result.debiased.feature_similarity:.6f}")
    lines.append(f"config_digest = {result.base.config_digest}")
    header = ["prompt", "N"]
    header += [f"base_{attribute_label(a)}" for a in bias.attributes]
    header += [f"debiased_{attribute_label(a)}" for a in bias.attributes]
    header += ["DR_base", "DR_debiased", "psnr_db", "feat_sim"]
    rows = [",".join(header)]
    for r in result.per_prompt:
        row = [r.prompt.replace(",", ";"), str(r.n)]
        row += [str(r.counts_base.get(a, 0)) for a in bias.attributes]
        row += [str(r.counts_debiased.get(a, 0)) for a in bias.attributes]
        row += [f"{r.dr_base:.6f}", f"{r.dr_debiased:.6f}", f"{r.psnr_db:.4f}", f"{r.feat_sim:.6f}"]
        rows.append(",".join(row))
    return "\n".join(lines) + "\n", "\n".join(rows) + "\n"


@dataclass
class AttentionMapDump:
    files: list
    flat_flags: list  # True where the raw map was near-constant before scaling

    @property
    def all_flat(self) -> bool:
        return bool(self.flat_flags) and all(self.flat_flags)


def dump_attention_maps(record: GenerationRecord, out_dir) -> AttentionMapDump:
    """One min-max normalized PGM per (traced step, head, attribute token)."""
    from pathlib import Path

    if not record.traces:
        raise DomainError("generation record has no attention traces")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files, flags = [], []
    for i, trace in enumerate(record.traces):
        t_a = trace.attribute_token_count
        if t_a == 0:
            raise DomainError("trace has no attribute tokens to visualize")
        weights = trace.weights.data
        heads, s, _ = weights.shape
        res = int(round(math.sqrt(s)))
        lo = trace.attribute_index_set.start
        for h in range(heads):
            for k in range(t_a):
                m = weights[h, :, lo + k].reshape(res, res)
                span = float(m.max() - m.min())
                flat = span < 1e-9
                norm = np.zeros_like(m) if flat else (m - m.min()) / span
                path = out / f"t{i:02d}_h{h}_tok{k}.pgm"
                write_pgm(path, norm)
                files.append(path)
                flags.append(flat)
    return AttentionMapDump(files=files, flat_flags=flags)
