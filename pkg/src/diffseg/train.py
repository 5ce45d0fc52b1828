"""Training strategies, segmentation loss and the AdamW optimiser."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from . import tensor as tn
from .data import SynthTask, augment, encode_mask, stack
from .diffusion import posterior_mean, posterior_variance, probs_to_x0, q_sample
from .model import UNetConfig, forward, init
from .schedule import ImportanceState, NoiseSchedule, linear_schedule
from .tensor import Tensor

logger = logging.getLogger(__name__)


class Strategy(str, Enum):
    STANDARD = "standard"
    SELF_COND_SAME_T = "self_cond_same_t"
    SELF_COND_NEXT_T = "self_cond_next_t"
    RECYCLE_NEXT_T = "recycle_next_t"
    RECYCLE_MAX_T = "recycle_max_t"
    # the non-diffusion baseline shares the loop but not the noising
    NO_DIFFUSION = "no_diffusion"

    @property
    def self_conditioning(self) -> bool:
        return self in (Strategy.SELF_COND_SAME_T, Strategy.SELF_COND_NEXT_T)

    @property
    def needs_next_step(self) -> bool:
        return self in (Strategy.RECYCLE_NEXT_T, Strategy.RECYCLE_MAX_T, Strategy.SELF_COND_NEXT_T)

    @property
    def diffusion(self) -> bool:
        return self is not Strategy.NO_DIFFUSION


DIFFUSION_STRATEGIES = [s for s in Strategy if s.diffusion]


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient is not finite."""


@dataclass
class TrainConfig:
    strategy: Strategy = Strategy.RECYCLE_MAX_T
    ce_weight: float = 20.0
    dice_weight: float = 1.0
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-8
    lr_init: float = 1e-5
    lr_peak: float = 8e-4
    lr_end: float = 5e-5
    warmup_steps: int = 100
    decay_steps: int = 10_000
    batch_size: int = 8
    total_steps: int = 12_500
    seed: int = 0
    T_train: int = 1001
    beta_min: float = 1e-4
    beta_max: float = 0.02
    importance_sampling: bool = True
    importance_buckets: int = 100
    importance_history: int = 10
    self_cond_dropout: float = 0.5
    augment: bool = True
    checkpoint_interval: int = 500
    val_sampler: str = "ddpm"
    val_steps: int = 5

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)

    def validate(self) -> None:
        rates = [self.lr_init, self.lr_peak, self.lr_end, self.ce_weight + self.dice_weight]
        if any(r <= 0 for r in rates):
            raise ValueError("learning rates and loss weights must be positive")
        if not 0 <= self.warmup_steps <= self.decay_steps:
            raise ValueError("warmup_steps must not exceed decay_steps")
        if self.batch_size < 1 or self.total_steps < 1 or self.checkpoint_interval < 1:
            raise ValueError("batch_size, total_steps and checkpoint_interval must be positive")
        if not 0.0 <= self.self_cond_dropout <= 1.0:
            raise ValueError("self_cond_dropout must lie in [0, 1]")

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.T_train, self.beta_min, self.beta_max)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["strategy"] = self.strategy.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


PRESETS = {
    # full-length schedule and a shorter one sized for a single CPU core
    "full": dict(batch_size=8, total_steps=12_500, warmup_steps=100, decay_steps=10_000),
    "desk": dict(batch_size=4, total_steps=3000, warmup_steps=100, decay_steps=3000, checkpoint_interval=500),
}


def check_compatible(strategy: Strategy, model_cfg: UNetConfig) -> None:
    if strategy.self_conditioning != model_cfg.with_self_cond_input:
        raise ValueError(f"strategy {strategy.value} and with_self_cond_input={model_cfg.with_self_cond_input} disagree")
    if strategy.diffusion != model_cfg.diffusion:
        raise ValueError(f"strategy {strategy.value} needs diffusion={strategy.diffusion} in the model config")


# ---------------------------------------------------------------------- loss


def seg_loss_terms(logits: Tensor, labels: np.ndarray, ce_weight: float = 20.0, dice_weight: float = 1.0, smooth: float = 1e-6):
    """Per-sample ``(total, ce, dice_loss)`` tensors of shape ``[N]``.

    Cross entropy is averaged over pixels; the Dice loss averages
    ``1 - soft Dice`` over foreground classes only.
    """
    n, classes = logits.shape[:2]
    labels = np.asarray(labels)
    if labels.shape != (n,) + logits.shape[2:]:
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    onehot = (labels[:, None] == np.arange(classes).reshape(1, classes, 1, 1)).astype(logits.dtype)
    spatial = tuple(range(2, logits.ndim))
    logp = tn.log_softmax(logits, axis=1)
    ce = tn.scale(tn.mean(tn.sum_(logp * onehot, axis=1), axis=tuple(a - 1 for a in spatial)), -1.0)
    probs = tn.softmax(logits, axis=1)
    inter = tn.sum_(probs * onehot, axis=spatial)
    denom = tn.sum_(probs, axis=spatial) + onehot.sum(axis=spatial)
    dice = (tn.scale(inter, 2.0) + smooth) / (denom + smooth)
    fg = np.zeros((1, classes), dtype=logits.dtype)
    fg[0, 1:] = 1.0 / (classes - 1)
    dice_loss = tn.sum_((1.0 - dice) * fg, axis=1)
    total = tn.scale(ce, ce_weight) + tn.scale(dice_loss, dice_weight)
    return total, ce, dice_loss


def seg_loss(logits: Tensor, labels: np.ndarray, ce_weight: float = 20.0, dice_weight: float = 1.0) -> Tensor:
    """Batch-mean of ``ce_weight * CE + dice_weight * foreground Dice loss``."""
    total, _, _ = seg_loss_terms(logits, labels, ce_weight, dice_weight)
    return tn.mean(total)


# ----------------------------------------------------------------- optimiser


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to the peak, cosine decay to the end value, then flat."""
    if step < cfg.warmup_steps:
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * step / cfg.warmup_steps
    if step >= cfg.decay_steps:
        return cfg.lr_end
    span = cfg.decay_steps - cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / span
    return cfg.lr_end + (cfg.lr_peak - cfg.lr_end) * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam moments with bias correction and decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor]):
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.count = 0

    def update(self, params: dict[str, Tensor], grads: dict[str, np.ndarray], step: int, cfg: TrainConfig) -> dict[str, Tensor]:
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        if bad:
            raise NonFiniteError(f"non-finite gradients in {bad[:5]}; step {step} rejected")
        self.count += 1
        lr = learning_rate(step, cfg)
        c1 = 1.0 - cfg.b1**self.count
        c2 = 1.0 - cfg.b2**self.count
        new = {}
        for k, p in params.items():
            g = grads[k]
            m = self.m[k] = cfg.b1 * self.m[k] + (1.0 - cfg.b1) * g
            v = self.v[k] = cfg.b2 * self.v[k] + (1.0 - cfg.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + cfg.eps) + cfg.weight_decay * p.data
            new[k] = Tensor((p.data - lr * upd).astype(p.dtype), requires_grad=True, name=k)
        return new


def optimizer_update(params, grads, step: int, cfg: TrainConfig, state: AdamW | None = None):
    """Functional wrapper around :class:`AdamW` (state created on first use)."""
    state = state or AdamW(params)
    return state.update(params, grads, step, cfg), state


# ---------------------------------------------------------------- train step


@dataclass
class StepResult:
    loss: float
    ce: float
    dice_loss: float
    grads: dict[str, np.ndarray]
    t: np.ndarray
    per_sample_loss: np.ndarray
    info: dict = field(default_factory=dict)


@dataclass
class StepHooks:
    """Test hooks for the two-pass strategies.

    ``step1_override`` replaces the rescaled step-1 prediction (gets ``x0``,
    returns an array). ``inspect`` runs the first pass on separate leaf
    copies of the parameters and its noisy input so the stop-gradient can be
    checked by reading their (zero) gradients. ``posterior_from_prediction``
    builds the next-step self-conditioning posterior mean from the step-1
    prediction instead of the ground truth. ``fixed_t`` pins the sampled
    step for every sample.
    """

    step1_override: Callable[[np.ndarray], np.ndarray] | None = None
    inspect: bool = False
    posterior_from_prediction: bool = False
    fixed_t: int | None = None


def _first_pass(params, model_cfg, images, t1, x1, self_cond, hooks: StepHooks, info: dict) -> np.ndarray:
    if hooks.inspect:
        shadow = {k: Tensor(v.data, requires_grad=True) for k, v in params.items()}
        x1_leaf = Tensor(x1, requires_grad=True)
        logits = forward(shadow, model_cfg, images, t1, x1_leaf, self_cond)
        x0hat = tn.stop_gradient(probs_to_x0(tn.softmax(logits, axis=1)))
        info["step1_params"] = shadow
        info["step1_input"] = x1_leaf
        return x0hat.data
    with tn.no_grad():
        logits = forward(params, model_cfg, images, t1, x1, self_cond)
        return tn.stop_gradient(probs_to_x0(tn.softmax(logits, axis=1))).data


def train_step(
    strategy: Strategy,
    params: dict[str, Tensor],
    model_cfg: UNetConfig,
    images: np.ndarray,
    labels: np.ndarray,
    s: NoiseSchedule,
    imp: ImportanceState | None,
    rng: np.random.Generator,
    cfg: TrainConfig | None = None,
    hooks: StepHooks | None = None,
) -> StepResult:
    """Loss and parameter gradients for one batch under ``strategy``."""
    strategy = Strategy(strategy)
    cfg = cfg or TrainConfig(strategy=strategy)
    hooks = hooks or StepHooks()
    check_compatible(strategy, model_cfg)
    n = len(images)
    dtype = params["out.w"].dtype
    images = np.asarray(images, dtype=dtype)
    info: dict = {}
    T = s.T

    if not strategy.diffusion:
        t = np.zeros(n, dtype=np.int64)
        logits = forward(params, model_cfg, images)
    else:
        x0 = encode_mask(labels, model_cfg.classes, dtype)
        t_max = T - 1 if strategy.needs_next_step else T
        if hooks.fixed_t is not None:
            if not 1 <= hooks.fixed_t <= t_max:
                raise ValueError(f"fixed_t must lie in [1, {t_max}] for {strategy.value}")
            t = np.full(n, hooks.fixed_t, dtype=np.int64)
        elif imp is not None:
            t = imp.sample_timestep(rng, t_max=t_max, size=n)
        else:
            t = rng.integers(1, t_max + 1, size=n)
        eps = rng.standard_normal(x0.shape).astype(dtype)

        if strategy is Strategy.STANDARD:
            x_t = q_sample(x0, t, eps, s)
            logits = forward(params, model_cfg, images, t, x_t)

        elif strategy in (Strategy.RECYCLE_MAX_T, Strategy.RECYCLE_NEXT_T):
            t1 = np.full(n, T) if strategy is Strategy.RECYCLE_MAX_T else t + 1
            x1 = q_sample(x0, t1, eps, s)
            x0hat = _first_pass(params, model_cfg, images, t1, x1, None, hooks, info)
            if hooks.step1_override is not None:
                x0hat = np.asarray(hooks.step1_override(x0), dtype=dtype)
            eps2 = rng.standard_normal(x0.shape).astype(dtype)
            x_t = q_sample(x0hat, t, eps2, s)
            info["x0hat"] = x0hat
            logits = forward(params, model_cfg, images, t, x_t)

        else:  # self-conditioning
            t1 = t if strategy is Strategy.SELF_COND_SAME_T else t + 1
            x1 = q_sample(x0, t1, eps, s)
            keep = rng.random(n) >= cfg.self_cond_dropout
            x0hat = np.zeros_like(x0)
            if keep.any() or hooks.inspect:
                sel = keep if not hooks.inspect else np.ones(n, dtype=bool)
                pred = _first_pass(params, model_cfg, images[sel], t1[sel], x1[sel], np.zeros_like(x1[sel]), hooks, info)
                x0hat[sel] = pred
                x0hat[~keep] = 0.0
            info["dropped"] = ~keep
            if strategy is Strategy.SELF_COND_SAME_T:
                x_t = x1
            else:
                anchor = x0hat if hooks.posterior_from_prediction else x0
                mu = posterior_mean(anchor, x1, t1, s)
                z = rng.standard_normal(x0.shape).astype(dtype)
                x_t = mu + np.sqrt(posterior_variance(t1, s, like=x1)) * z
            info["x0hat"] = x0hat
            logits = forward(params, model_cfg, images, t, x_t, x0hat)
        info["x_t"] = x_t

    info["logits"] = logits.data
    total, ce, dice_loss = seg_loss_terms(logits, labels, cfg.ce_weight, cfg.dice_weight)
    loss = tn.mean(total)
    wrt = list(params.values())
    extra = []
    if hooks.inspect and "step1_params" in info:
        extra = list(info["step1_params"].values()) + [info["step1_input"]]
    grads = tn.backward(loss, wrt=wrt + extra)
    if hooks.inspect and "step1_params" in info:
        info["step1_grads"] = {k: grads[v] for k, v in info["step1_params"].items()}
        info["step1_input_grad"] = grads[info["step1_input"]]
    per_sample = total.data.astype(np.float64)
    if not np.isfinite(loss.data):
        raise NonFiniteError(f"non-finite loss {loss.data}")
    if imp is not None and strategy.diffusion:
        for ti, li in zip(t, per_sample):
            imp.record_loss(int(ti), float(li))
    return StepResult(
        loss=float(loss.data),
        ce=float(ce.data.mean()),
        dice_loss=float(dice_loss.data.mean()),
        grads={k: grads[v] for k, v in params.items()},
        t=np.asarray(t),
        per_sample_loss=per_sample,
        info=info,
    )


# --------------------------------------------------------------- train loop


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    best_params: dict[str, Tensor]
    best_step: int
    log: list[dict]
    val_log: list[dict]
    checkpoints: dict[int, dict[str, Tensor]]


def _batches(rng: np.random.Generator, n: int, batch: int):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch + 1, batch):
            yield order[i : i + batch]
        if n < batch:
            yield rng.choice(n, size=batch, replace=True)


def fit(
    model_cfg: UNetConfig,
    cfg: TrainConfig,
    train_tasks: list[SynthTask],
    val_tasks: list[SynthTask] | None = None,
    on_checkpoint: Callable[[int, dict[str, Tensor]], None] | None = None,
    on_log: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train one model; validate and checkpoint every ``checkpoint_interval`` steps."""
    from .infer import validation_dice

    cfg.validate()
    model_cfg.validate()
    check_compatible(cfg.strategy, model_cfg)
    s = cfg.schedule()
    params = init(model_cfg, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    aug_rng = np.random.default_rng([cfg.seed, 1])
    imp = ImportanceState(s.T, cfg.importance_buckets, cfg.importance_history) if cfg.importance_sampling else None
    opt = AdamW(params)
    log, val_log, checkpoints = [], [], {}
    best, best_step, best_dice = params, -1, -np.inf
    batches = _batches(rng, len(train_tasks), cfg.batch_size)

    for step in range(cfg.total_steps):
        started = time.perf_counter()
        picked = [train_tasks[i] for i in next(batches)]
        if cfg.augment:
            picked = [augment(task, aug_rng) for task in picked]
        images, labels = stack(picked)
        result = train_step(cfg.strategy, params, model_cfg, images, labels, s, imp, rng, cfg)
        lr = learning_rate(step, cfg)
        params = opt.update(params, result.grads, step, cfg)
        done = step + 1
        row = {
            "step": done,
            "sampled_t": " ".join(str(int(t)) for t in result.t) if cfg.strategy.diffusion else "",
            "loss": result.loss,
            "ce": result.ce,
            "dice_loss": result.dice_loss,
            "lr": lr,
            "wall_ms": (time.perf_counter() - started) * 1e3,
        }
        log.append(row)
        if on_log:
            on_log(row)
        if done % cfg.checkpoint_interval == 0 or done == cfg.total_steps:
            dice = validation_dice(params, model_cfg, val_tasks, s, cfg) if val_tasks else float("nan")
            val_log.append({"step": done, "val_dice": dice})
            checkpoints[done] = params
            if on_checkpoint:
                on_checkpoint(done, params)
            if val_tasks and dice > best_dice:
                best, best_step, best_dice = params, done, dice
            logger.info("step %d loss %.4f val dice %.4f", done, result.loss, dice)
    if best_step < 0:
        best, best_step = params, cfg.total_steps
    return TrainResult(params, best, best_step, log, val_log, checkpoints)
