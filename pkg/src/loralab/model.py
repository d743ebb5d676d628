"""Minimal decoder-only transformer with adapter sites and gated fusion.

Pre-norm residual blocks with RMS normalization and a gated feedforward,
so each layer carries exactly the seven adapter-attachable projections.
Position information comes from learned absolute embeddings. The output
head starts at zero, which makes a freshly constructed model emit exactly
uniform next-token distributions.

Conventions: projection matrices are stored (d_in, d_out) and applied as
``x @ W`` with one row per position. A layer's conditioning state for
layer-level gates is its residual-stream input before the first norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .adapters import LoraAdapter, SiteType, lora_delta, site_dims
from .checkpoint import load_tensors, save_tensors
from .errors import ConfigurationError, ContractError, InputError
from .fusion import (
    STEP_UNIT,
    FusionGate,
    Granularity,
    StaticWeights,
    TrainableMerged,
    fuse_outputs,
    gate_weights,
    layer_unit,
    lorahub_merged_delta,
    module_unit,
)
from .tensor import Tensor, no_grad
from .traces import WeightTrace

EOS_ID = 1  # matches the tokenizer's end-of-sequence slot


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 172
    max_seq_len: int = 128

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigurationError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]

    def weight(self, name: str) -> Tensor:
        return self.params[name]

    def site_weight(self, layer: int, site: SiteType) -> Tensor:
        return self.params[f"model/layer{layer}/{site.value}"]

    def parameters(self) -> list[Tensor]:
        return [self.params[name] for name in sorted(self.params)]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None


def init_model(config: ModelConfig, rng: np.random.Generator) -> Model:
    params: dict[str, Tensor] = {}
    params["model/tok_emb"] = Tensor(rng.normal(0.0, 0.08, (config.vocab_size, config.d_model)))
    params["model/pos_emb"] = Tensor(rng.normal(0.0, 0.08, (config.max_seq_len, config.d_model)))
    for layer in range(config.n_layers):
        prefix = f"model/layer{layer}"
        params[f"{prefix}/attn_norm"] = Tensor(np.ones(config.d_model))
        params[f"{prefix}/ffn_norm"] = Tensor(np.ones(config.d_model))
        for site in SiteType:
            d_in, d_out = site_dims(site, config.d_model, config.d_ff)
            std = 0.5 / np.sqrt(d_in)
            params[f"{prefix}/{site.value}"] = Tensor(rng.normal(0.0, std, (d_in, d_out)))
    params["model/final_norm"] = Tensor(np.ones(config.d_model))
    params["model/head"] = Tensor(np.zeros((config.d_model, config.vocab_size)))
    return Model(config, params)


@dataclass
class ForwardRecord:
    """Hidden states exposed for gate conditioning and analyses."""

    step_input: Tensor | None = None
    layer_inputs: list[Tensor] = field(default_factory=list)
    module_inputs: dict[tuple[int, str], Tensor] = field(default_factory=dict)
    gate_outputs: dict[str, np.ndarray] = field(default_factory=dict)
    logits: Tensor | None = None


def _validate_tokens(config: ModelConfig, tokens) -> list[int]:
    ids = [int(t) for t in tokens]
    if len(ids) > config.max_seq_len:
        raise InputError(f"sequence length {len(ids)} exceeds max_seq_len {config.max_seq_len}")
    for t in ids:
        if t < 0 or t >= config.vocab_size:
            raise InputError(f"token id {t} outside vocabulary of size {config.vocab_size}")
    return ids


class _SiteMixer:
    """Resolves how adapter deltas enter each projection for one forward pass."""

    def __init__(self, model: Model, adapters: list[LoraAdapter] | None, mixer, record: ForwardRecord):
        self.model = model
        self.adapters = adapters or []
        self.mixer = mixer
        self.record = record
        self.gate = mixer if isinstance(mixer, FusionGate) else None
        self._unit_weights: dict[str, Tensor] = {}
        k = len(self.adapters)
        if k == 0 and mixer is not None:
            raise ConfigurationError("a fusion mixer was given but no adapters")
        if k > 1 and mixer is None:
            raise ConfigurationError(f"{k} adapters require a mixer to combine them")
        if self.gate is not None and self.gate.k != k:
            raise ConfigurationError(f"gate mixes {self.gate.k} adapters, {k} supplied")
        self.static_w: np.ndarray | None = None
        self.merged_w = None
        if isinstance(mixer, StaticWeights):
            self.static_w = mixer.output_weights(k)
            if self.static_w is None:
                self.merged_w = mixer.weights
        elif isinstance(mixer, TrainableMerged):
            self.merged_w = mixer.weights

    def note_unit_input(self, unit: str, x: Tensor) -> None:
        if self.gate is not None and unit in self.gate.units:
            w = gate_weights(x, self.gate, unit)
            self._unit_weights[unit] = w
            self.record.gate_outputs[unit] = w.data

    def apply(self, x: Tensor, layer: int, site: SiteType) -> Tensor:
        self.record.module_inputs[(layer, site.value)] = x
        if self.gate is not None and self.gate.granularity is Granularity.MODULE:
            self.note_unit_input(module_unit(layer, site), x)
        base = T.matmul(x, self.model.site_weight(layer, site))
        if not self.adapters:
            return base
        if self.merged_w is not None:
            return T.add(base, lorahub_merged_delta(x, self.adapters, layer, site, self.merged_w))
        deltas = [lora_delta(x, a, layer, site) for a in self.adapters]
        if self.mixer is None:
            return T.add(base, deltas[0])
        if self.static_w is not None:
            return fuse_outputs(base, deltas, Tensor(self.static_w))
        unit = self.gate.unit_for(layer, site)
        return fuse_outputs(base, deltas, self._unit_weights[unit])


def forward(
    model: Model,
    tokens,
    adapters: list[LoraAdapter] | None = None,
    mixer=None,
    build_trace: bool = True,
    sequence_id: int = 0,
) -> tuple[Tensor, ForwardRecord, WeightTrace | None]:
    """Causal forward pass over a full token sequence.

    Returns logits (T, vocab), the hidden-state record, and, when a fusion
    gate is active, a teacher-forced weight trace (one record per position
    and gate unit, tagged with the input token at that position).
    """
    ids = _validate_tokens(model.config, tokens)
    cfg = model.config
    record = ForwardRecord()
    mix = _SiteMixer(model, adapters, mixer, record)

    tok = T.embedding(model.weight("model/tok_emb"), ids)
    pos = T.embedding(model.weight("model/pos_emb"), np.arange(len(ids)))
    x = T.add(tok, pos)
    record.step_input = x
    mix.note_unit_input(STEP_UNIT, x)

    for layer in range(cfg.n_layers):
        record.layer_inputs.append(x)
        mix.note_unit_input(layer_unit(layer), x)
        n1 = T.rmsnorm(x, model.weight(f"model/layer{layer}/attn_norm"))
        q = mix.apply(n1, layer, SiteType.Q_PROJ)
        k = mix.apply(n1, layer, SiteType.K_PROJ)
        v = mix.apply(n1, layer, SiteType.V_PROJ)
        att = T.causal_attention(q, k, v, cfg.n_heads)
        o = mix.apply(att, layer, SiteType.O_PROJ)
        x = T.add(x, o)
        n2 = T.rmsnorm(x, model.weight(f"model/layer{layer}/ffn_norm"))
        g = T.silu(mix.apply(n2, layer, SiteType.FFN_GATE))
        u = mix.apply(n2, layer, SiteType.FFN_UP)
        x = T.add(x, mix.apply(T.mul(g, u), layer, SiteType.FFN_DOWN))

    final = T.rmsnorm(x, model.weight("model/final_norm"))
    logits = T.matmul(final, model.weight("model/head"))
    record.logits = logits

    trace = None
    if mix.gate is not None and build_trace:
        trace = WeightTrace(mix.gate.k)
        for unit, w in record.gate_outputs.items():
            layer_idx, site = _parse_unit(unit)
            for t, token in enumerate(ids):
                trace.add(sequence_id, t, layer_idx, site, token, w[t])
    return logits, record, trace


def _parse_unit(unit: str) -> tuple[int, str]:
    if unit == STEP_UNIT:
        return -1, ""
    body = unit.removeprefix("layer")
    if "/" in body:
        layer, site = body.split("/", 1)
        return int(layer), site
    return int(body), ""


def log_likelihood(model: Model, tokens, loss_mask, adapters=None, mixer=None) -> Tensor:
    """Sum of log P(token_t | tokens_<t) over positions where loss_mask is 1."""
    ids = _validate_tokens(model.config, tokens)
    mask = [int(m) for m in loss_mask]
    if len(mask) != len(ids):
        raise ContractError(f"mask length {len(mask)} != sequence length {len(ids)}")
    if sum(mask) == 0:
        raise ContractError("loss mask selects no tokens")
    if mask[0]:
        raise ContractError("the first token has no prediction context and cannot be masked in")
    logits, _, _ = forward(model, ids[:-1], adapters=adapters, mixer=mixer, build_trace=False)
    nll = T.masked_nll(logits, ids[1:], mask[1:])
    return T.scale(nll, -1.0)


def generate(
    model: Model,
    prefix,
    max_new_tokens: int,
    adapters=None,
    mixer=None,
    trace: WeightTrace | None = None,
    sequence_id: int = 0,
    eos_id: int = EOS_ID,
) -> tuple[list[int], WeightTrace | None]:
    """Greedy decoding. Returns the full token list and a per-step weight trace.

    With a gate mixer, every generated step contributes one trace record
    per gate unit, tagged with the token emitted at that step.
    """
    ids = _validate_tokens(model.config, prefix)
    gate = mixer if isinstance(mixer, FusionGate) else None
    if trace is None and gate is not None:
        trace = WeightTrace(gate.k)
    tokens = list(ids)
    with no_grad():
        for step in range(max_new_tokens):
            if len(tokens) >= model.config.max_seq_len:
                break
            logits, record, _ = forward(
                model, tokens, adapters=adapters, mixer=mixer, build_trace=False
            )
            nxt = int(np.argmax(logits.data[-1]))
            if trace is not None and gate is not None:
                for unit in sorted(record.gate_outputs):
                    layer_idx, site = _parse_unit(unit)
                    trace.add(sequence_id, step, layer_idx, site, nxt, record.gate_outputs[unit][-1])
            tokens.append(nxt)
            if nxt == eos_id:
                break
    return tokens, trace


def model_tensors(model: Model) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in model.params.items()}


def save_model(model: Model, path) -> None:
    cfg = model.config
    meta = {
        "model": {
            "vocab_size": cfg.vocab_size,
            "d_model": cfg.d_model,
            "n_layers": cfg.n_layers,
            "n_heads": cfg.n_heads,
            "d_ff": cfg.d_ff,
            "max_seq_len": cfg.max_seq_len,
        }
    }
    save_tensors(path, model_tensors(model), meta)


def load_model(path) -> Model:
    tensors, meta = load_tensors(path)
    cfg = ModelConfig(**meta["model"])
    params = {name: Tensor(arr) for name, arr in tensors.items()}
    return Model(cfg, params)
