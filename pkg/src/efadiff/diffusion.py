"""Noise schedule, ancestral sampler, and the two training loops.

Training and sampling randomness is counter-based: every step derives a fresh
generator from (seed, step), so interrupted runs resume bit-exactly and the
same seed always reproduces the same artifact. Generation works in [-1, 1]
model scale and records images in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bias import sample_counterfactual
from .denoiser import Denoiser, EfaAdapter
from .errors import DomainError, ShapeError, TrainingError, ValidationError
from .losses import LossWeights, SpatialMask, downsample_mask, recon_loss, reg_cf, reg_trg
from .scenes import Corpus, attribute_free_prompt, sample_prompt
from .tensor import Tensor
from .text import attribute_prompt

# stream labels for counter-based RNG so independent draws never collide
_STREAM_BASE = 0xBA5E
_STREAM_EFA = 0xEFA


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    betas: np.ndarray
    alphas_cum: np.ndarray  # cumulative product of (1 - beta)


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear beta ramp; alphas_cum is the running product of (1 - beta)."""
    if T < 2:
        raise ValidationError(f"schedule needs T >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValidationError(f"invalid beta range [{beta_start}, {beta_end}]")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return DiffusionSchedule(T=T, betas=betas, alphas_cum=np.cumprod(1.0 - betas))


def q_sample(x0, t, eps, sched: DiffusionSchedule):
    """Closed-form forward noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` may be a scalar or a per-sample vector matching a leading batch axis.
    """
    tv = np.asarray(t)
    if (tv < 0).any() or (tv >= sched.T).any():
        raise DomainError(f"timestep {t} outside [0, {sched.T})")
    abar = sched.alphas_cum[tv]
    x0d = x0.data if isinstance(x0, Tensor) else np.asarray(x0)
    epsd = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
    if x0d.shape != epsd.shape:
        raise ShapeError(f"x0 {x0d.shape} vs eps {epsd.shape}")
    if tv.ndim > 0:
        abar = abar.reshape((-1,) + (1,) * (x0d.ndim - 1))
    out = np.sqrt(abar) * x0d + np.sqrt(1.0 - abar) * epsd
    out = out.astype(x0d.dtype, copy=False)
    return Tensor(out) if isinstance(x0, Tensor) else out


class Adam:
    """Adaptive-moment optimizer over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in self.params.items()}

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            if self.lr != 0.0:  # x - (-0.0) would flip signed zeros bitwise
                update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
                p.data = p.data - (self.lr * update).astype(p.data.dtype)
            p.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.params:
            self.m[name] = tensors[f"adam.m.{name}"].copy()
            self.v[name] = tensors[f"adam.v.{name}"].copy()
        self.step_count = step_count


@dataclass
class GenerationRecord:
    image: np.ndarray  # [3, h, w] in [0, 1]
    seed: int
    prompt: str
    injected_attribute: str | None = None
    traces: list | None = None
    traced_steps: list[int] = field(default_factory=list)


def reverse_timesteps(T: int, steps: int) -> np.ndarray:
    if steps < 1 or steps > T:
        raise ValidationError(f"steps must be in [1, {T}], got {steps}")
    ts = np.unique(np.round(np.linspace(T - 1, 0, steps)).astype(int))[::-1]
    return ts


def _ancestral_update(x, eps_hat, t_cur, t_prev, sched, noise):
    """Posterior step from timestep t_cur down to t_prev (-1 means clean)."""
    abar_cur = sched.alphas_cum[t_cur]
    abar_prev = 1.0 if t_prev < 0 else sched.alphas_cum[t_prev]
    x0_hat = (x - np.sqrt(1.0 - abar_cur) * eps_hat) / np.sqrt(abar_cur)
    x0_hat = np.clip(x0_hat, -1.0, 1.0)
    beta_eff = 1.0 - abar_cur / abar_prev
    mean = (
        np.sqrt(abar_prev) * beta_eff / (1.0 - abar_cur) * x0_hat
        + np.sqrt(abar_cur / abar_prev) * (1.0 - abar_prev) / (1.0 - abar_cur) * x
    )
    if t_prev < 0 or noise is None:
        return mean.astype(x.dtype, copy=False)
    var = beta_eff * (1.0 - abar_prev) / (1.0 - abar_cur)
    return (mean + np.sqrt(var) * noise).astype(x.dtype, copy=False)


def _predict_eps_batch(model, x, t_arr, prompts, efa, cfg_scale, collect_traces=False):
    eps, traces, _ = model.forward(Tensor(x), t_arr, prompts, efa=efa, collect_traces=collect_traces)
    eps = eps.data
    if cfg_scale is not None and cfg_scale != 1.0:
        uncond = [model.encode_prompt("")] * x.shape[0]
        eps_u, _, _ = model.forward(Tensor(x), t_arr, uncond, efa=efa)
        eps = eps_u.data + cfg_scale * (eps - eps_u.data)
    return eps, traces


def denoise_step(model, sched, x_t, t, prompt, efa=None, rng=None, cfg_scale=None):
    """One ancestral step t -> t-1 for a single image [3, h, w]."""
    if not (0 <= t < sched.T):
        raise DomainError(f"timestep {t} outside [0, {sched.T})")
    xd = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t)
    enc = model.encode_prompt(prompt) if isinstance(prompt, str) else prompt
    eps, _ = _predict_eps_batch(model, xd[None], np.array([t]), [enc], efa, cfg_scale)
    noise = None
    if t - 1 >= 0:
        rng = rng or np.random.default_rng(0)
        noise = rng.standard_normal(xd.shape).astype(xd.dtype)
    out = _ancestral_update(xd[None], eps, t, t - 1, sched, None if noise is None else noise[None])[0]
    return Tensor(out) if isinstance(x_t, Tensor) else out


def _adapter_efa_spec(model, efa, batch: int, suppressed: bool):
    if efa is None:
        return None, None
    adapter, attribute = efa
    adapter.bias.index(attribute)
    return adapter.forward_spec([attribute] * batch, suppressed=suppressed), attribute


def generate(
    model: Denoiser,
    sched: DiffusionSchedule,
    prompt: str,
    seed: int,
    steps: int,
    efa: tuple[EfaAdapter, object] | None = None,
    cfg_scale: float | None = None,
    efa_suppressed: bool = False,
    trace_count: int = 0,
) -> GenerationRecord:
    """Full reverse chain from unit Gaussian noise for one seed."""
    records = generate_batch(
        model, sched, prompt, [seed], steps,
        efa=efa, cfg_scale=cfg_scale, efa_suppressed=efa_suppressed, trace_count=trace_count,
    )
    return records[0]


def generate_batch(
    model: Denoiser,
    sched: DiffusionSchedule,
    prompt: str,
    seeds,
    steps: int,
    efa=None,
    cfg_scale: float | None = None,
    efa_suppressed: bool = False,
    trace_count: int = 0,
    attributes=None,
) -> list[GenerationRecord]:
    """Reverse chains for many seeds in one batched pass.

    Per-seed noise comes from per-seed generators, so each record depends only
    on its own seed. ``attributes`` may give one injected attribute per seed
    (overriding the single attribute in ``efa``).
    """
    n = len(seeds)
    size = model.dims.image_size
    shape = (3, size, size)
    rngs = [np.random.default_rng(s) for s in seeds]
    x = np.stack([r.standard_normal(shape) for r in rngs]).astype(model.dtype)
    if efa is not None and attributes is not None:
        adapter = efa[0] if isinstance(efa, tuple) else efa
        for a in attributes:
            adapter.bias.index(a)
        efa_spec = adapter.forward_spec(list(attributes), suppressed=efa_suppressed)
        attr_labels = list(attributes)
    else:
        efa_spec, attr = _adapter_efa_spec(model, efa, n, efa_suppressed)
        attr_labels = [attr] * n
    enc = model.encode_prompt(prompt)
    prompts = [enc] * n
    ts = reverse_timesteps(sched.T, steps)
    trace_at = set()
    if trace_count > 0:
        trace_at = {int(i) for i in np.linspace(0, len(ts) - 1, min(trace_count, len(ts))).round()}
    all_traces: list[list] = [[] for _ in range(n)]
    traced_steps: list[int] = []
    for i, t_cur in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else -1
        want_traces = i in trace_at
        eps, traces = _predict_eps_batch(
            model, x, np.full(n, t_cur), prompts, efa_spec, cfg_scale, collect_traces=want_traces
        )
        if want_traces and traces:
            site = min(traces)  # lowest-resolution site carries the injection
            for j in range(n):
                all_traces[j].append(traces[site][j])
            traced_steps.append(int(t_cur))
        noise = None
        if t_prev >= 0:
            noise = np.stack([r.standard_normal(shape) for r in rngs]).astype(model.dtype)
        x = _ancestral_update(x, eps, int(t_cur), t_prev, sched, noise)
    images = np.clip((x.astype(np.float64) + 1.0) / 2.0, 0.0, 1.0)
    return [
        GenerationRecord(
            image=images[j],
            seed=int(seeds[j]),
            prompt=prompt,
            injected_attribute=attr_labels[j] if efa is not None else None,
            traces=all_traces[j] if trace_count > 0 else None,
            traced_steps=list(traced_steps),
        )
        for j in range(n)
    ]


# -- training ------------------------------------------------------------------


@dataclass
class TrainBaseConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-4
    seed: int = 0
    attr_dropout: float = 0.5  # probability of hiding the attribute word
    uncond_dropout: float = 0.1  # probability of the empty prompt
    log_every: int = 200


def _to_model_scale(img: np.ndarray) -> np.ndarray:
    return img * 2.0 - 1.0


def train_base(model: Denoiser, sched: DiffusionSchedule, corpus: Corpus, cfg: TrainBaseConfig, log=None):
    """Epsilon-MSE pretraining on the (biased) corpus; trains all base params.

    Each view keeps its attribute word with probability 1 - attr_dropout -
    uncond_dropout, drops it (attribute-free prompt) with attr_dropout, or
    drops the whole prompt with uncond_dropout. Attribute-free and
    unconditional views draw from the full corpus, so they inherit its skewed
    attribute marginal (the bias being studied); attributed views draw from a
    balanced per-attribute pool so the rare attribute's conditioning is
    learned as well as the common one's.
    """
    if len(corpus) == 0:
        raise ValidationError("corpus is empty")
    model.set_requires_grad(True)
    opt = Adam(model.params, lr=cfg.lr)
    bias = corpus.bias
    attrs_with_samples = [a for a in bias.attributes if corpus.by_attribute.get(a)]
    history = []
    for step in range(cfg.steps):
        rng = np.random.default_rng((cfg.seed, step, _STREAM_BASE))
        x0, prompts = [], []
        for _ in range(cfg.batch_size):
            u = rng.random()
            if u >= cfg.uncond_dropout + cfg.attr_dropout:
                a = attrs_with_samples[int(rng.integers(len(attrs_with_samples)))]
                pool = corpus.by_attribute[a]
                s = corpus.samples[pool[int(rng.integers(len(pool)))]]
                prompts.append(model.encode_prompt(sample_prompt(bias, s)))
            else:
                s = corpus.samples[int(rng.integers(len(corpus)))]
                full = sample_prompt(bias, s)
                if u < cfg.uncond_dropout:
                    prompts.append(model.encode_prompt(""))
                else:
                    prompts.append(model.encode_prompt(attribute_free_prompt(bias, full)))
            x0.append(_to_model_scale(s.image))
        x0 = np.stack(x0).astype(model.dtype)
        t = rng.integers(sched.T, size=cfg.batch_size)
        eps = rng.standard_normal(x0.shape).astype(model.dtype)
        x_t = q_sample(x0, t, eps, sched)
        pred, _, _ = model.forward(Tensor(x_t), t, prompts)
        resid = pred - Tensor(eps)
        loss = (resid * resid).mean()
        val = float(loss.data)
        if not np.isfinite(val):
            raise TrainingError(f"base training diverged at step {step} (loss={val})")
        loss.backward()
        opt.step()
        history.append(val)
        if log and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log(f"base step {step}: eps-mse {val:.4f}")
    return history


@dataclass
class TrainEfaConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    scenario_mix: float = 0.5  # probability of scenario 1 (target prompt)
    no_seg_mask: bool = False  # ablation: drop reg_cf, unmask recon
    no_reg_trg: bool = False  # ablation: drop the target-scenario regularizer
    combine_scenarios: bool = False  # run both scenarios every step
    log_every: int = 200


def _scenario_one(model, adapter, batch, update_sites):
    """Target prompt on a target image: only the attention regularizer."""
    x_t, attrs, prompts, _, _ = batch
    efa = adapter.forward_spec(attrs)
    last = max(update_sites)
    _, traces, _ = model.forward(
        Tensor(x_t), batch.t, prompts, efa=efa, collect_traces=True, stop_after_site=last
    )
    total = None
    for res in update_sites:
        for trace in traces[res]:
            term = reg_trg(trace)
            total = term if total is None else total + term
    return total * (1.0 / len(attrs))


class _EfaBatch:
    def __init__(self, x_t, attrs, prompts, masks, eps, t):
        self.x_t, self.attrs, self.prompts, self.masks, self.eps, self.t = x_t, attrs, prompts, masks, eps, t

    def __iter__(self):
        return iter((self.x_t, self.attrs, self.prompts, self.masks, self.eps))


def _scenario_two(model, adapter, batch, update_sites, weights, no_seg_mask):
    """Counterfactual prompt on a target image: masked recon plus reg_cf."""
    x_t, attrs, prompts, masks, eps = batch
    efa = adapter.forward_spec(attrs)
    pred, traces, _ = model.forward(Tensor(x_t), batch.t, prompts, efa=efa, collect_traces=True)
    n = len(attrs)
    total = None
    recon_sum = 0.0
    rcf_sum = 0.0
    for j in range(n):
        mask = masks[j]
        term = recon_loss(Tensor(eps[j]), pred[j], mask["recon"])
        recon_sum += float(term.data)
        if not no_seg_mask and weights.lambda2 > 0:
            for res in update_sites:
                rc = reg_cf(traces[res][j], mask[res])
                rcf_sum += float(rc.data)
                term = term + rc * weights.lambda2
        total = term if total is None else total + term
    return total * (1.0 / n), recon_sum / n, rcf_sum / n


def train_efa(
    model: Denoiser,
    sched: DiffusionSchedule,
    adapter: EfaAdapter,
    corpus: Corpus,
    cfg: TrainEfaConfig,
    log=None,
    resume_optimizer: Adam | None = None,
    start_step: int = 0,
):
    """Adapter training; the base model stays frozen throughout.

    Each step draws per-sample attributes and target images, then runs either
    scenario 1 (prompt names the attribute; push injected attention toward
    zero everywhere) or scenario 2 (counterfactual prompt; reconstruct the
    target inside the subject mask, regularize injected attention outside it).
    Returns (rows, optimizer) where rows are loss-CSV tuples.
    """
    if not set(adapter.banks):
        adapter.attach(model)
    model.set_requires_grad(False)
    adapter.set_requires_grad(True)
    bias = adapter.bias
    for a in bias.attributes:
        if a not in corpus.by_attribute or not corpus.by_attribute[a]:
            raise ValidationError(f"corpus has no samples for attribute {a!r}")
    update_sites = sorted(adapter.predictors)
    feature_resolutions = {res: (res, res) for res in update_sites}
    opt = resume_optimizer or Adam(adapter.parameters(), lr=cfg.lr)
    weights = cfg.weights
    size = model.dims.image_size
    scenario_one_enabled = not cfg.no_reg_trg and weights.lambda1 > 0
    rows = []
    for step in range(start_step, cfg.steps):
        rng = np.random.default_rng((cfg.seed, step, _STREAM_EFA))
        n = cfg.batch_size
        attrs = [bias.attributes[int(k)] for k in rng.integers(bias.n_attributes, size=n)]
        picks = [corpus.samples[corpus.by_attribute[a][int(rng.integers(len(corpus.by_attribute[a])))]] for a in attrs]
        t = rng.integers(sched.T, size=n)
        x0 = np.stack([_to_model_scale(s.image) for s in picks]).astype(model.dtype)
        eps = rng.standard_normal(x0.shape).astype(model.dtype)
        x_t = q_sample(x0, t, eps, sched)
        masks = []
        ones = np.ones((size, size))
        for s in picks:
            pm = ones if cfg.no_seg_mask else s.mask
            entry = {"recon": SpatialMask(pm, downsample_mask(pm, feature_resolutions[update_sites[0]]))}
            for res in update_sites:
                entry[res] = SpatialMask(s.mask, downsample_mask(s.mask, feature_resolutions[res]))
            masks.append(entry)
        if cfg.combine_scenarios:
            scenario = 0
        elif scenario_one_enabled:
            scenario = 1 if rng.random() < cfg.scenario_mix else 2
        else:
            scenario = 2
        recon_v = rtrg_v = rcf_v = 0.0
        prompts_target = [model.encode_prompt(attribute_prompt(bias, a)) for a in attrs]
        cf = [sample_counterfactual(bias, a, rng).counterfactual for a in attrs]
        prompts_cf = [model.encode_prompt(attribute_prompt(bias, c)) for c in cf]
        batch_t = _EfaBatch(x_t.data, attrs, prompts_target, masks, eps, t)
        batch_c = _EfaBatch(x_t.data, attrs, prompts_cf, masks, eps, t)
        if scenario == 1:
            term = _scenario_one(model, adapter, batch_t, update_sites)
            rtrg_v = float(term.data)
            loss = term * weights.lambda1
        elif scenario == 2:
            loss, recon_v, rcf_v = _scenario_two(
                model, adapter, batch_c, update_sites, weights, cfg.no_seg_mask
            )
        else:  # combined
            t1 = _scenario_one(model, adapter, batch_t, update_sites) if scenario_one_enabled else None
            l2, recon_v, rcf_v = _scenario_two(
                model, adapter, batch_c, update_sites, weights, cfg.no_seg_mask
            )
            loss = l2 if t1 is None else l2 + t1 * weights.lambda1
            rtrg_v = 0.0 if t1 is None else float(t1.data)
        val = float(loss.data)
        if not np.isfinite(val):
            raise TrainingError(f"adapter training diverged at step {step} (loss={val})")
        loss.backward()
        opt.step()
        rows.append((step, scenario, recon_v, rtrg_v, rcf_v, val))
        if log and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log(f"efa step {step}: scenario {scenario} recon {recon_v:.3f} rtrg {rtrg_v:.3f} rcf {rcf_v:.3f}")
    return rows, opt


def loss_csv(rows) -> str:
    lines = ["step,scenario,recon,reg_trg,reg_cf,total"]
    for step, scenario, recon, rtrg, rcf, total in rows:
        lines.append(f"{step},{scenario},{recon:.8f},{rtrg:.8f},{rcf:.8f},{total:.8f}")
    return "\n".join(lines) + "\n"
