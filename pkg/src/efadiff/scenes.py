"""Procedural training corpus: coloured subjects on structured backgrounds.

Each sample is a 32x32 image whose subject colour encodes the target
attribute, an attribute-independent background, and the exact rasterized
subject mask. Rendering is deterministic and images are quantized to 8-bit
levels at render time so in-memory samples and their PPM files agree exactly.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bias import BiasSpec, attribute_label, attribute_words, parse_attribute_label
from .errors import DomainError, ValidationError
from .imageio import read_pgm, read_ppm, write_pgm, write_ppm
from .text import attribute_prompt

IMAGE_SIZE = 32
SUBJECT_MARGIN = 2
RADIUS_RANGE = (5.0, 9.0)
SUBJECT_SHAPES = ("disk", "square", "triangle")
BACKGROUND_KINDS = ("stripes", "checker", "gradient")

# Subject palette. Every attribute word is either a base hue or a tone
# modifier; product attributes compose them in word order.
BASE_COLORS = {
    "red": np.array([0.90, 0.10, 0.10]),
    "blue": np.array([0.10, 0.10, 0.90]),
    "green": np.array([0.10, 0.80, 0.15]),
    "yellow": np.array([0.90, 0.85, 0.10]),
}
TONE_MODS = {
    "bright": lambda c: c + 0.35 * (1.0 - c),
    "dark": lambda c: 0.45 * c,
}

# Background grays used by the classifier oracle to separate subject pixels
# from background pixels; every background generator stays near these tones.
BACKGROUND_PROTOTYPES = np.array([0.20, 0.35, 0.50, 0.65, 0.80])


def attribute_color(attribute) -> np.ndarray:
    """Prototype colour of an attribute; shared by renderer and classifier."""
    base = None
    mods = []
    for word in attribute_words(attribute):
        if word in BASE_COLORS:
            if base is not None:
                raise DomainError(f"attribute {attribute!r} names two base colours")
            base = BASE_COLORS[word]
        elif word in TONE_MODS:
            mods.append(TONE_MODS[word])
        else:
            raise DomainError(f"attribute word {word!r} has no colour assignment")
    if base is None:
        raise DomainError(f"attribute {attribute!r} names no base colour")
    out = base.copy()
    for mod in mods:
        out = mod(out)
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class SceneParams:
    attribute: object
    subject_shape: str
    subject_position: tuple[float, float]  # (cx, cy) pixels
    subject_radius: float
    background_kind: str
    background_phase: float
    seed: int

    def __post_init__(self):
        if self.subject_shape not in SUBJECT_SHAPES:
            raise ValidationError(f"unknown subject shape {self.subject_shape!r}")
        if self.background_kind not in BACKGROUND_KINDS:
            raise ValidationError(f"unknown background kind {self.background_kind!r}")
        cx, cy = self.subject_position
        r = self.subject_radius
        lim = IMAGE_SIZE - 1 - SUBJECT_MARGIN
        if cx - r < SUBJECT_MARGIN or cy - r < SUBJECT_MARGIN or cx + r > lim or cy + r > lim:
            raise ValidationError(
                f"subject (centre {self.subject_position}, radius {r}) leaves the "
                f"{SUBJECT_MARGIN}-pixel canvas margin"
            )


@dataclass
class TrainingSample:
    image: np.ndarray  # [3, 32, 32] in [0, 1], 8-bit quantized
    mask: np.ndarray  # [32, 32] in {0, 1}, exact subject rasterization
    attribute: object
    params: SceneParams

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.round(self.image * 255).astype(np.uint8).tobytes())
        h.update(self.mask.astype(np.uint8).tobytes())
        return h.hexdigest()[:12]


def _background(kind: str, phase: float) -> np.ndarray:
    ys, xs = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    if kind == "stripes":
        v = np.where(((ys + int(round(phase * 8))) // 4) % 2 == 0, 0.35, 0.65)
    elif kind == "checker":
        v = np.where((xs // 4 + ys // 4 + int(round(phase * 2))) % 2 == 0, 0.30, 0.70)
    else:  # gradient
        v = 0.5 + 0.3 * np.sin(2 * np.pi * (xs / IMAGE_SIZE + phase))
    return np.repeat(v[None], 3, axis=0).astype(np.float64)


def _subject_mask(params: SceneParams) -> np.ndarray:
    ys, xs = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    cx, cy = params.subject_position
    r = params.subject_radius
    if params.subject_shape == "disk":
        return ((xs - cx) ** 2 + (ys - cy) ** 2 <= r * r).astype(np.float64)
    if params.subject_shape == "square":
        return ((np.abs(xs - cx) <= r) & (np.abs(ys - cy) <= r)).astype(np.float64)
    # upward triangle: apex (cx, cy - r), base corners (cx +- r, cy + r)
    inside = (ys >= cy - r) & (ys <= cy + r)
    half_width = (ys - (cy - r)) / 2.0
    return (inside & (np.abs(xs - cx) <= half_width)).astype(np.float64)


def render(params: SceneParams) -> TrainingSample:
    """Deterministic rasterization; attribute determines subject colour only."""
    img = _background(params.background_kind, params.background_phase)
    mask = _subject_mask(params)
    color = attribute_color(params.attribute)
    img = img * (1.0 - mask[None]) + color[:, None, None] * mask[None]
    img = np.round(img * 255.0) / 255.0  # lock to the on-disk quantization
    return TrainingSample(image=img, mask=mask, attribute=params.attribute, params=params)


def draw_scene_params(attribute, rng: np.random.Generator, seed: int) -> SceneParams:
    r = float(rng.uniform(*RADIUS_RANGE))
    lo, hi = r + SUBJECT_MARGIN, IMAGE_SIZE - 1 - SUBJECT_MARGIN - r
    return SceneParams(
        attribute=attribute,
        subject_shape=SUBJECT_SHAPES[int(rng.integers(len(SUBJECT_SHAPES)))],
        subject_position=(float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi))),
        subject_radius=r,
        background_kind=BACKGROUND_KINDS[int(rng.integers(len(BACKGROUND_KINDS)))],
        background_phase=float(rng.random()),
        seed=seed,
    )


def sample_prompt(bias: BiasSpec, sample_or_attr, background_kind: str | None = None) -> str:
    """Training prompt: attribute template plus the background word."""
    if isinstance(sample_or_attr, TrainingSample):
        attr, kind = sample_or_attr.attribute, sample_or_attr.params.background_kind
    else:
        attr, kind = sample_or_attr, background_kind
    return f"{attribute_prompt(bias, attr)} {kind} background"


def eval_prompt(background_kind: str) -> str:
    """Attribute-free prompt used at evaluation time."""
    return f"subject {background_kind} background"


def attribute_free_prompt(bias: BiasSpec, prompt: str) -> str:
    """Strip the bias's attribute words from a training prompt."""
    drop = {w for a in bias.attributes for w in attribute_words(a)}
    return " ".join(w for w in prompt.split() if w not in drop)


class Corpus:
    """Immutable collection of rendered samples with a stable manifest digest."""

    def __init__(self, bias: BiasSpec, samples: list[TrainingSample]):
        self.bias = bias
        self.samples = samples
        self.by_attribute: dict = {}
        for i, s in enumerate(samples):
            self.by_attribute.setdefault(s.attribute, []).append(i)

    def __len__(self) -> int:
        return len(self.samples)

    def manifest_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "attribute", "shape", "cx", "cy", "radius", "background", "phase", "seed", "digest"])
        for i, s in enumerate(self.samples):
            p = s.params
            writer.writerow(
                [
                    i,
                    attribute_label(s.attribute),
                    p.subject_shape,
                    f"{p.subject_position[0]:.6f}",
                    f"{p.subject_position[1]:.6f}",
                    f"{p.subject_radius:.6f}",
                    p.background_kind,
                    f"{p.background_phase:.9f}",
                    p.seed,
                    s.digest(),
                ]
            )
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.manifest_csv().encode()).hexdigest()[:16]

    def save(self, directory, force: bool = False) -> None:
        directory = Path(directory)
        manifest = directory / "manifest.csv"
        if manifest.exists() and not force:
            raise ValidationError(f"refusing to overwrite existing corpus at {directory}")
        directory.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(self.samples):
            write_ppm(directory / f"img_{i:05d}.ppm", s.image)
            write_pgm(directory / f"msk_{i:05d}.pgm", s.mask)
        manifest.write_text(self.manifest_csv(), encoding="utf-8")

    @staticmethod
    def load(directory, bias: BiasSpec) -> "Corpus":
        directory = Path(directory)
        rows = list(csv.DictReader((directory / "manifest.csv").open()))
        samples = []
        for row in rows:
            i = int(row["id"])
            params = SceneParams(
                attribute=parse_attribute_label(row["attribute"]),
                subject_shape=row["shape"],
                subject_position=(float(row["cx"]), float(row["cy"])),
                subject_radius=float(row["radius"]),
                background_kind=row["background"],
                background_phase=float(row["phase"]),
                seed=int(row["seed"]),
            )
            sample = TrainingSample(
                image=read_ppm(directory / f"img_{i:05d}.ppm"),
                mask=read_pgm(directory / f"msk_{i:05d}.pgm"),
                attribute=params.attribute,
                params=params,
            )
            if sample.digest() != row["digest"]:
                raise ValidationError(f"corpus sample {i} does not match its manifest digest")
            samples.append(sample)
        return Corpus(bias, samples)


def build_corpus(bias: BiasSpec, per_attribute: int, bias_ratio=None, seed: int = 0) -> Corpus:
    """Render a corpus; balanced by default, or skewed by ``bias_ratio``.

    The total is ``per_attribute * n_attributes`` either way; a ratio vector
    reallocates that total across attributes (largest-remainder rounding), so
    ``[0.8, 0.2]`` yields the deliberately biased pretraining corpus.
    """
    if per_attribute < 1:
        raise ValidationError("per_attribute must be >= 1")
    n = bias.n_attributes
    total = per_attribute * n
    if bias_ratio is None:
        counts = [per_attribute] * n
    else:
        ratio = np.asarray(bias_ratio, dtype=np.float64)
        if ratio.shape != (n,) or (ratio < 0).any():
            raise ValidationError(f"bias_ratio must be {n} nonnegative reals")
        if abs(float(ratio.sum()) - 1.0) > 1e-9:
            raise ValidationError(f"bias_ratio sums to {ratio.sum()}, expected 1")
        raw = ratio * total
        counts = np.floor(raw).astype(int)
        order = np.argsort(-(raw - counts))
        for k in range(total - int(counts.sum())):
            counts[order[k]] += 1
        counts = counts.tolist()
    samples = []
    idx = 0
    for attr, count in zip(bias.attributes, counts):
        for _ in range(count):
            rng = np.random.default_rng((seed, idx))
            samples.append(render(draw_scene_params(attr, rng, seed=idx)))
            idx += 1
    return Corpus(bias, samples)
