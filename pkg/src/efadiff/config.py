"""Experiment configuration: flat ``section.key = value`` text files.

A config file overrides the defaults below; the resolved mapping (defaults
plus overrides) is what gets digested, so two runs agree on provenance iff
they agree on every effective setting. Values are typed by their default:
ints, floats, bools (true/false), strings, or comma-separated tuples.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .bias import BiasSpec, parse_attribute_label, product
from .denoiser import ModelDims
from .diffusion import TrainBaseConfig, TrainEfaConfig, make_schedule
from .errors import ValidationError
from .losses import LossWeights

DEFAULTS: dict = {
    "bias.name": "color",
    "bias.attributes": ("red", "blue"),
    "bias.template": "{} subject",
    "bias2.name": "",
    "bias2.attributes": (),
    "bias2.template": "{} subject",
    "dataset.per_attribute": 500,
    "dataset.pretrain_per_attribute": 800,
    "dataset.bias_ratio": (0.8, 0.2),
    "dataset.seed": 0,
    "model.channels": (8, 16, 32),
    "model.embed_dim": 32,
    "model.time_dim": 32,
    "model.heads8": 2,
    "model.d8": 16,
    "model.heads16": 1,
    "model.d16": 16,
    "model.dtype": "f32",
    "model.seed": 0,
    "schedule.T": 200,
    "schedule.beta_start": 1e-4,
    "schedule.beta_end": 0.02,
    "pretrain.steps": 6000,
    "pretrain.batch_size": 16,
    "pretrain.lr": 3e-4,
    "pretrain.seed": 0,
    "pretrain.attr_dropout": 0.5,
    "pretrain.uncond_dropout": 0.1,
    "efa.sites": (8,),
    "efa.hidden": 32,
    "efa_train.steps": 2000,
    "efa_train.batch_size": 16,
    "efa_train.lr": 1e-3,
    "efa_train.seed": 0,
    "efa_train.lambda1": 0.1,
    "efa_train.lambda2": 0.1,
    "efa_train.scenario_mix": 0.5,
    "ablate.no_seg_mask": False,
    "ablate.no_reg_trg": False,
    "ablate.combine_scenarios": False,
    "sample.steps": 40,
    "sample.cfg_scale": 0.0,  # 0 disables guidance
    "eval.prompts": (
        "subject stripes background",
        "subject checker background",
        "subject gradient background",
    ),
    "eval.n_per_prompt": 120,
    "eval.seed_base": 100_000,
    "eval.steps": 40,
    "eval.batch": 24,
    "eval.max_dr": 0.0,  # 0 disables the CI gate
    "eval.min_psnr": 0.0,
}


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValidationError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        if raw == "":
            return ()
        parts = [p.strip() for p in raw.split(",")]
        inner = default[0] if default else ""
        if isinstance(inner, int):
            return tuple(int(p) for p in parts)
        if isinstance(inner, float):
            return tuple(float(p) for p in parts)
        return tuple(parts)
    return raw


class ExperimentConfig:
    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for key, val in (values or {}).items():
            if key not in DEFAULTS:
                raise ValidationError(f"unknown config key {key!r}")
            self.values[key] = val

    def __getitem__(self, key):
        return self.values[key]

    @staticmethod
    def load(path) -> "ExperimentConfig":
        overrides = {}
        for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{ln}: expected 'key = value', got {line!r}")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in DEFAULTS:
                raise ValidationError(f"{path}:{ln}: unknown config key {key!r}")
            overrides[key] = _parse_value(raw, DEFAULTS[key])
        return ExperimentConfig(overrides)

    def canonical_text(self) -> str:
        lines = []
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    # -- derived objects ----------------------------------------------------

    def bias(self) -> BiasSpec:
        attrs = tuple(parse_attribute_label(a) for a in self["bias.attributes"])
        b1 = BiasSpec(self["bias.name"], attrs, self["bias.template"])
        if not self["bias2.name"]:
            return b1
        attrs2 = tuple(parse_attribute_label(a) for a in self["bias2.attributes"])
        b2 = BiasSpec(self["bias2.name"], attrs2, self["bias2.template"])
        return product(b1, b2)

    def model_dims(self) -> ModelDims:
        return ModelDims(
            image_size=32,
            channels=tuple(self["model.channels"]),
            embed_dim=self["model.embed_dim"],
            time_dim=self["model.time_dim"],
            heads8=self["model.heads8"],
            d8=self["model.d8"],
            heads16=self["model.heads16"],
            d16=self["model.d16"],
        )

    def dtype(self):
        import numpy as np

        return {"f32": np.float32, "f64": np.float64}[self["model.dtype"]]

    def schedule(self):
        return make_schedule(self["schedule.T"], self["schedule.beta_start"], self["schedule.beta_end"])

    def train_base_config(self, steps: int | None = None) -> TrainBaseConfig:
        return TrainBaseConfig(
            steps=self["pretrain.steps"] if steps is None else steps,
            batch_size=self["pretrain.batch_size"],
            lr=self["pretrain.lr"],
            seed=self["pretrain.seed"],
            attr_dropout=self["pretrain.attr_dropout"],
            uncond_dropout=self["pretrain.uncond_dropout"],
        )

    def train_efa_config(self, steps: int | None = None) -> TrainEfaConfig:
        return TrainEfaConfig(
            steps=self["efa_train.steps"] if steps is None else steps,
            batch_size=self["efa_train.batch_size"],
            lr=self["efa_train.lr"],
            seed=self["efa_train.seed"],
            weights=LossWeights(self["efa_train.lambda1"], self["efa_train.lambda2"]),
            scenario_mix=self["efa_train.scenario_mix"],
            no_seg_mask=self["ablate.no_seg_mask"],
            no_reg_trg=self["ablate.no_reg_trg"],
            combine_scenarios=self["ablate.combine_scenarios"],
        )

    def eval_seeds(self) -> list[int]:
        base = self["eval.seed_base"]
        return [base + i for i in range(self["eval.n_per_prompt"])]
