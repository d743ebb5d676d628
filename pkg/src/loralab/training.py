"""Optimization loops: skill adapters, few-shot gates, static weights, baselines.

Every loop is a pure function of its inputs and seed: shuffling and
initialization draw from one ``numpy`` generator seeded from the config,
batches accumulate into a single scalar graph, and Adam updates only the
tensors marked trainable. The loss everywhere is the masked mean negative
log-likelihood of completion tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .adapters import ALL_SITES, LoraAdapter, SiteType, init_adapter
from .errors import ConfigurationError, ContractError, TrainingError
from .fusion import FusionGate, Granularity, StaticWeights, TrainableMerged, init_gate
from .model import Model, forward
from .tasks import Example
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-3
    epochs: int = 3
    batch_size: int = 8
    warmup_ratio: float = 0.04
    seed: int = 0
    max_grad_norm: float | None = None

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ConfigurationError(f"peak_lr must be positive, got {self.peak_lr}")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ConfigurationError(f"warmup_ratio must lie in [0, 1], got {self.warmup_ratio}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class FewShotSet:
    """The N training examples for one new task (N defaults to 200 upstream)."""

    examples: tuple[Example, ...]

    def __post_init__(self):
        if len(self.examples) == 0:
            raise ContractError("a few-shot set needs at least one example")

    @property
    def n(self) -> int:
        return len(self.examples)


def lr_at(step: int, total_steps: int, peak_lr: float, warmup_ratio: float) -> float:
    """Linear warmup to the peak, then a half cosine down to zero."""
    if total_steps <= 0:
        return 0.0
    warmup = int(round(warmup_ratio * total_steps))
    if step < warmup:
        return peak_lr * step / warmup
    if total_steps == warmup:
        return 0.0
    progress = (step - warmup) / (total_steps - warmup)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


class Adam:
    def __init__(self, params: list[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def batch_loss(model: Model, batch: list[Example], adapters=None, mixer=None) -> Tensor:
    """Masked mean NLL of a batch: summed token NLL over summed mask counts."""
    total = None
    count = 0
    for ex in batch:
        tokens, mask = ex.tokens_and_mask()
        logits, _, _ = forward(model, tokens[:-1], adapters=adapters, mixer=mixer, build_trace=False)
        nll = T.masked_nll(logits, tokens[1:], mask[1:])
        count += sum(mask[1:])
        total = nll if total is None else T.add(total, nll)
    return T.scale(total, 1.0 / count)


def _optimize(
    model: Model,
    examples: list[Example],
    params: list[Tensor],
    cfg: TrainConfig,
    adapters=None,
    mixer=None,
    log: list[str] | None = None,
    rng: np.random.Generator | None = None,
) -> float | None:
    """Shared loop: shuffled epochs, warmup-cosine schedule, Adam. Returns last loss."""
    for p in params:
        p.requires_grad = True
    opt = Adam(params)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(examples) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    last = None
    for _ in range(cfg.epochs):
        order = rng.permutation(len(examples))
        for start in range(0, len(examples), cfg.batch_size):
            batch = [examples[i] for i in order[start : start + cfg.batch_size]]
            lr = lr_at(step, total_steps, cfg.peak_lr, cfg.warmup_ratio)
            loss = batch_loss(model, batch, adapters=adapters, mixer=mixer)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError("training loss is not finite", step=step)
            opt.zero_grad()
            loss.backward()
            if cfg.max_grad_norm is not None:
                clip_grad_norm(params, cfg.max_grad_norm)
            opt.step(lr)
            if log is not None:
                log.append(f"{step}\t{lr!r}\t{value!r}")
            step += 1
            last = value
    opt.zero_grad()
    return last


def train_lora(
    model: Model,
    corpus: list[Example],
    sites: tuple[SiteType, ...],
    rank: int,
    alpha: float,
    cfg: TrainConfig,
    log: list[str] | None = None,
    name: str = "adapter",
) -> LoraAdapter:
    """Fit one skill adapter against a frozen backbone."""
    model.set_trainable(False)
    rng = np.random.default_rng(cfg.seed)
    c = model.config
    adapter = init_adapter(name, c.n_layers, c.d_model, c.d_ff, rank, alpha, rng, sites)
    _optimize(model, corpus, adapter.parameters(), cfg, adapters=[adapter], rng=rng, log=log)
    adapter.set_trainable(False)
    return adapter


def train_gate(
    model: Model,
    adapters: list[LoraAdapter],
    fewshot: FewShotSet,
    granularity: Granularity,
    cfg: TrainConfig,
    log: list[str] | None = None,
) -> FusionGate:
    """Fit the fusion gate only; backbone and adapters stay frozen."""
    if len(adapters) < 1:
        raise ContractError("gate training needs at least one adapter")
    model.set_trainable(False)
    for a in adapters:
        a.set_trainable(False)
    c = model.config
    gate = init_gate(granularity, [a.name for a in adapters], c.n_layers, c.d_model, c.d_ff)
    _optimize(
        model, list(fewshot.examples), gate.parameters(), cfg, adapters=adapters, mixer=gate, log=log
    )
    gate.set_trainable(False)
    return gate


def train_static_weights(
    model: Model,
    adapters: list[LoraAdapter],
    fewshot: FewShotSet,
    cfg: TrainConfig,
    log: list[str] | None = None,
) -> StaticWeights:
    """Fit k task-level scalars of the merged fusion form on the same loss."""
    ranks = {a.rank for a in adapters}
    if len(ranks) != 1:
        raise ConfigurationError(f"static merged fusion requires one shared rank, got {sorted(ranks)}")
    model.set_trainable(False)
    for a in adapters:
        a.set_trainable(False)
    mixer = TrainableMerged(len(adapters))
    _optimize(
        model, list(fewshot.examples), mixer.parameters(), cfg, adapters=adapters, mixer=mixer, log=log
    )
    mixer.set_trainable(False)
    return mixer.frozen()


FEWSHOT_VARIANTS = ("new-lora", "ft-lang-lora", "ft-task-lora")


def clone_adapter(adapter: LoraAdapter, name: str | None = None) -> LoraAdapter:
    copy = LoraAdapter(name or adapter.name, adapter.rank, adapter.alpha)
    for key, (a, b) in adapter.sites.items():
        copy.sites[key] = (Tensor(a.data.copy()), Tensor(b.data.copy()))
    return copy


def train_fewshot_baselines(
    model: Model,
    fewshot: FewShotSet,
    cfg: TrainConfig,
    variant: str,
    base_adapter: LoraAdapter | None = None,
    sites: tuple[SiteType, ...] = ALL_SITES,
    rank: int = 8,
    alpha: float = 16.0,
    log: list[str] | None = None,
) -> LoraAdapter:
    """Few-shot fine-tuning baselines: a brand-new adapter, or continued
    training of an existing language/task adapter (on a copy)."""
    if variant not in FEWSHOT_VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}; expected one of {FEWSHOT_VARIANTS}")
    model.set_trainable(False)
    if variant == "new-lora":
        return train_lora(
            model, list(fewshot.examples), sites, rank, alpha, cfg, log=log, name="fewshot-new"
        )
    if base_adapter is None:
        raise ConfigurationError(f"variant {variant!r} continues an existing adapter; none given")
    adapter = clone_adapter(base_adapter, f"fewshot-{base_adapter.name}")
    _optimize(model, list(fewshot.examples), adapter.parameters(), cfg, adapters=[adapter], log=log)
    adapter.set_trainable(False)
    return adapter


DEFAULT_LR_SPACE = (1e-3, 1e-4)
DEFAULT_BATCH_SPACE = (2, 4, 8)


def default_search_space(base: TrainConfig) -> list[TrainConfig]:
    return [
        replace(base, peak_lr=lr, batch_size=bs)
        for lr in DEFAULT_LR_SPACE
        for bs in DEFAULT_BATCH_SPACE
    ]


def hyperparam_search(space: list[TrainConfig], eval_fn) -> TrainConfig:
    """Exhaustively evaluate every config; ties go to lower lr, then smaller batch."""
    if not space:
        raise ContractError("hyperparameter search over an empty space")
    scored = [(eval_fn(cfg), cfg) for cfg in space]
    best_score = max(s for s, _ in scored)
    winners = [cfg for s, cfg in scored if s == best_score]
    winners.sort(key=lambda cfg: (cfg.peak_lr, cfg.batch_size))
    return winners[0]


def trainable_census(*param_owners) -> int:
    """Total scalar count of requires_grad tensors across the given owners."""
    total = 0
    for owner in param_owners:
        for p in owner.parameters():
            if p.requires_grad:
                total += p.data.size
    return total
