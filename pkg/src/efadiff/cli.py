"""Command-line surface: dataset generation, pretraining, adapter training,
sampling, and evaluation.

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 evaluation
thresholds violated. ``EFA_NUM_THREADS`` caps BLAS threads and must be acted
on before numpy loads, which is why the heavy imports happen inside main().
"""

from __future__ import annotations

import argparse
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _apply_thread_limit() -> None:
    limit = os.environ.get("EFA_NUM_THREADS")
    if limit:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, limit)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="efadiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="render the pretraining and adapter corpora")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("pretrain", help="train the base model on the biased corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="corpus directory from gen-dataset")
    p.add_argument("--out", required=True, help="base checkpoint path")
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("train-efa", help="train the adapter over a frozen base")
    p.add_argument("--config", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="adapter checkpoint path")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--resume", default=None, help="optimizer state file from a previous run")

    p = sub.add_parser("sample", help="generate images")
    p.add_argument("--config", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--adapter", default=None)
    p.add_argument("--prompt", required=True)
    p.add_argument("--seeds", required=True, help="comma-separated integer seeds")
    p.add_argument("--attribute", default=None, help="pin the injected attribute")
    p.add_argument("--paired", action="store_true", help="also emit base images per seed")
    p.add_argument("--dump-attn", action="store_true")
    p.add_argument("--cfg-scale", type=float, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="paired debiasing evaluation")
    p.add_argument("--config", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--out", required=True)
    return parser


def _cmd_gen_dataset(args) -> int:
    from pathlib import Path

    from .config import ExperimentConfig
    from .scenes import build_corpus

    cfg = ExperimentConfig.load(args.config)
    bias = cfg.bias()
    out = Path(args.out)
    pretrain = build_corpus(
        bias,
        per_attribute=cfg["dataset.pretrain_per_attribute"],
        bias_ratio=list(cfg["dataset.bias_ratio"]) if cfg["dataset.bias_ratio"] else None,
        seed=cfg["dataset.seed"],
    )
    balanced = build_corpus(bias, per_attribute=cfg["dataset.per_attribute"], seed=cfg["dataset.seed"] + 1)
    pretrain.save(out / "pretrain", force=args.force)
    balanced.save(out / "efa", force=args.force)
    (out / "config.digest").write_text(cfg.digest() + "\n")
    print(f"pretrain corpus: {len(pretrain)} samples, digest {pretrain.digest()}")
    print(f"efa corpus: {len(balanced)} samples, digest {balanced.digest()}")
    return 0


def _load_corpus(path, bias):
    from .scenes import Corpus

    return Corpus.load(path, bias)


def _cmd_pretrain(args) -> int:
    import numpy as np

    from .config import ExperimentConfig
    from .denoiser import Denoiser, save_base_checkpoint
    from .diffusion import train_base
    from .text import build_vocabulary

    cfg = ExperimentConfig.load(args.config)
    bias = cfg.bias()
    corpus = _load_corpus(os.path.join(args.data, "pretrain"), bias)
    vocab = build_vocabulary(
        sorted(bias.words()),
        embed_dim=cfg["model.embed_dim"],
        rng=np.random.default_rng(cfg["model.seed"]),
        dtype=cfg.dtype(),
    )
    model = Denoiser(vocab, cfg.model_dims(), rng=np.random.default_rng(cfg["model.seed"] + 1), dtype=cfg.dtype())
    sched = cfg.schedule()
    tb = cfg.train_base_config(steps=args.steps)
    if tb.steps > 0:
        train_base(model, sched, corpus, tb, log=print)
    save_base_checkpoint(
        args.out, model, {"config_digest": cfg.digest(), "corpus_digest": corpus.digest()}
    )
    print(f"saved base checkpoint {args.out} (arch {model.arch_hash()})")
    return 0


def _cmd_train_efa(args) -> int:
    from .config import ExperimentConfig
    from .denoiser import init_adapter, load_base_checkpoint, save_adapter_checkpoint
    from .diffusion import Adam, loss_csv, train_efa
    from .serialize import load_checkpoint, parameter_digest, save_checkpoint

    cfg = ExperimentConfig.load(args.config)
    model, _ = load_base_checkpoint(args.base)
    bias = cfg.bias()
    corpus = _load_corpus(os.path.join(args.data, "efa"), bias)
    sched = cfg.schedule()
    te = cfg.train_efa_config(steps=args.steps)
    adapter = init_adapter(
        model, bias, sites=tuple(cfg["efa.sites"]), hidden=cfg["efa.hidden"],
        seed=cfg["efa_train.seed"],
    )
    start_step = 0
    resume_opt = None
    if args.resume:
        tensors, meta = load_checkpoint(args.resume)
        params = adapter.parameters()
        for name in params:
            params[name].data = tensors[f"param.{name}"].astype(model.dtype, copy=True)
        resume_opt = Adam(adapter.parameters(), lr=te.lr)
        resume_opt.load_state_tensors(
            {k: v for k, v in tensors.items() if k.startswith("adam.")}, int(meta["step"])
        )
        start_step = int(meta["step"])
    base_digest = parameter_digest(model.params)
    rows, opt = train_efa(
        model, sched, adapter, corpus, te,
        log=print, resume_optimizer=resume_opt, start_step=start_step,
    )
    assert parameter_digest(model.params) == base_digest, "base parameters moved during adapter training"
    save_adapter_checkpoint(args.out, adapter, {"config_digest": cfg.digest()})
    state = {f"param.{k}": v.data for k, v in adapter.parameters().items()}
    state.update(opt.state_tensors())
    save_checkpoint(
        str(args.out) + ".state", state,
        {"kind": "optimizer-state", "step": str(opt.step_count)},
    )
    csv_path = str(args.out) + ".loss.csv"
    mode = "a" if args.resume else "w"
    with open(csv_path, mode) as f:
        text = loss_csv(rows)
        f.write(text if mode == "w" else "".join(text.splitlines(keepends=True)[1:]))
    print(f"saved adapter {args.out} (+ loss CSV, optimizer state)")
    return 0


def _parse_seeds(raw: str) -> list[int]:
    from .errors import ValidationError

    try:
        return [int(s) for s in raw.split(",") if s.strip() != ""]
    except ValueError as exc:
        raise ValidationError(f"bad seed list {raw!r}") from exc


def _cmd_sample(args) -> int:
    from pathlib import Path

    import numpy as np

    from .bias import parse_attribute_label, sample_target
    from .config import ExperimentConfig
    from .denoiser import load_adapter_checkpoint, load_base_checkpoint
    from .diffusion import generate
    from .imageio import write_ppm
    from .metrics import dump_attention_maps

    cfg = ExperimentConfig.load(args.config)
    model, _ = load_base_checkpoint(args.base)
    sched = cfg.schedule()
    adapter = None
    if args.adapter:
        adapter, _ = load_adapter_checkpoint(args.adapter, model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = _parse_seeds(args.seeds)
    steps = cfg["sample.steps"]
    cfg_scale = args.cfg_scale if args.cfg_scale is not None else (cfg["sample.cfg_scale"] or None)
    lines = [f"config_digest = {cfg.digest()}", f"prompt = {args.prompt}"]
    trace_count = 8 if args.dump_attn else 0
    for seed in seeds:
        if adapter is not None:
            if args.attribute:
                attr = parse_attribute_label(args.attribute)
                adapter.bias.index(attr)
            else:
                attr = sample_target(adapter.bias, np.random.default_rng((seed, 0xA77)))
            rec = generate(
                model, sched, args.prompt, seed, steps,
                efa=(adapter, attr), cfg_scale=cfg_scale, trace_count=trace_count,
            )
            name = f"sample_s{seed}_efa.ppm"
            lines.append(f"seed {seed} attribute = {rec.injected_attribute}")
            if args.dump_attn:
                dump = dump_attention_maps(rec, out / f"attn_s{seed}")
                lines.append(f"seed {seed} attention_maps = {len(dump.files)}")
            if args.paired:
                base_rec = generate(model, sched, args.prompt, seed, steps, cfg_scale=cfg_scale)
                write_ppm(out / f"sample_s{seed}_base.ppm", base_rec.image)
        else:
            rec = generate(model, sched, args.prompt, seed, steps, cfg_scale=cfg_scale)
            name = f"sample_s{seed}.ppm"
        write_ppm(out / name, rec.image)
    (out / "records.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(seeds)} sample(s) to {out}")
    return 0


def _cmd_eval(args) -> int:
    from pathlib import Path

    from .config import ExperimentConfig
    from .denoiser import load_adapter_checkpoint, load_base_checkpoint
    from .metrics import evaluate_debiasing, render_report

    cfg = ExperimentConfig.load(args.config)
    model, _ = load_base_checkpoint(args.base)
    adapter, _ = load_adapter_checkpoint(args.adapter, model)
    result = evaluate_debiasing(
        model,
        cfg.schedule(),
        adapter,
        list(cfg["eval.prompts"]),
        cfg["eval.n_per_prompt"],
        cfg.eval_seeds(),
        steps=cfg["eval.steps"],
        config_digest=cfg.digest(),
        eval_batch=cfg["eval.batch"],
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text, csv_text = render_report(result, adapter.bias)
    (out / "report.txt").write_text(text)
    (out / "per_prompt.csv").write_text(csv_text)
    print(text, end="")
    max_dr = cfg["eval.max_dr"]
    min_psnr = cfg["eval.min_psnr"]
    if max_dr > 0 and result.debiased.dr_prompt_avg > max_dr:
        print(f"GATE: debiased DR {result.debiased.dr_prompt_avg:.4f} > {max_dr}")
        return 4
    if min_psnr > 0 and (result.debiased.masked_psnr_db or 0.0) < min_psnr:
        print(f"GATE: masked PSNR {result.debiased.masked_psnr_db:.2f} dB < {min_psnr}")
        return 4
    return 0


_COMMANDS = {
    "gen-dataset": _cmd_gen_dataset,
    "pretrain": _cmd_pretrain,
    "train-efa": _cmd_train_efa,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    _apply_thread_limit()
    args = _build_parser().parse_args(argv)
    from .errors import (
        CompatibilityError,
        DomainError,
        EvaluationError,
        ShapeError,
        TrainingError,
        ValidationError,
        VocabularyError,
    )

    try:
        return _COMMANDS[args.command](args)
    except (ValidationError, DomainError, ShapeError, VocabularyError, CompatibilityError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, EvaluationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
