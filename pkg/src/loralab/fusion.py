"""Per-token fusion weights from gates, plus the static-weight baselines.

A gate unit maps its conditioning vector x to weights over k adapters:

    w = softmax(W x) + b

applied literally in that order: the bias is added after the softmax, so
the components always sum to 1 + sum(b) and individual weights can leave
[0, 1] (including going negative). Adapter outputs are then mixed at every
adapted site: h' = h + sum_i w_i * delta_i. Because only outputs are
mixed, adapters of different ranks compose freely; the static merged-form
baseline instead mixes A and B factors separately and therefore requires a
shared rank.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .adapters import ALL_SITES, SiteType
from .checkpoint import load_tensors, save_tensors
from .errors import ConfigurationError, ContractError
from .tensor import Tensor


class Granularity(enum.Enum):
    """Which hidden state conditions the gate, and how many gate units exist."""

    STEP = "step"      # the step input embedding; one gate for the whole model
    LAYER = "layer"    # each layer's residual-stream input; one gate per layer
    MODULE = "module"  # each adapted module's input; one gate per layer x site


STEP_UNIT = "step"


def layer_unit(layer: int) -> str:
    return f"layer{layer}"


def module_unit(layer: int, site: SiteType) -> str:
    return f"layer{layer}/{site.value}"


def gate_units(granularity: Granularity, n_layers: int) -> list[str]:
    if granularity is Granularity.STEP:
        return [STEP_UNIT]
    if granularity is Granularity.LAYER:
        return [layer_unit(l) for l in range(n_layers)]
    return [module_unit(l, s) for l in range(n_layers) for s in ALL_SITES]


def unit_input_dim(unit: str, d_model: int, d_ff: int) -> int:
    """Width of the conditioning vector a unit sees (ffn_down reads the d_ff stream)."""
    return d_ff if unit.endswith("/" + SiteType.FFN_DOWN.value) else d_model


@dataclass
class FusionGate:
    """Gate parameters for every unit of one granularity, over k adapters."""

    granularity: Granularity
    k: int
    adapter_order: list[str]
    units: dict[str, tuple[Tensor, Tensor]] = field(default_factory=dict)

    def __post_init__(self):
        if self.k < 1:
            raise ContractError(f"gate needs at least one adapter, got k={self.k}")
        if len(self.adapter_order) != self.k:
            raise ConfigurationError(
                f"adapter order lists {len(self.adapter_order)} names for k={self.k}"
            )

    def unit_for(self, layer: int, site: SiteType) -> str:
        if self.granularity is Granularity.STEP:
            return STEP_UNIT
        if self.granularity is Granularity.LAYER:
            return layer_unit(layer)
        return module_unit(layer, site)

    def parameters(self) -> list[Tensor]:
        out = []
        for unit in sorted(self.units):
            out.extend(self.units[unit])
        return out

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None


def init_gate(
    granularity: Granularity,
    adapter_names: list[str],
    n_layers: int,
    d_model: int,
    d_ff: int,
) -> FusionGate:
    """Zero-initialized gate: every unit starts at the uniform-average baseline."""
    k = len(adapter_names)
    gate = FusionGate(granularity, k, list(adapter_names))
    for unit in gate_units(granularity, n_layers):
        d_in = unit_input_dim(unit, d_model, d_ff)
        gate.units[unit] = (Tensor(np.zeros((k, d_in))), Tensor(np.zeros(k)))
    return gate


def gate_weights(x: Tensor, gate: FusionGate, unit: str) -> Tensor:
    """softmax(W x) + b for one unit; x may be one vector or a (T, d_in) batch of rows."""
    if unit not in gate.units:
        raise ConfigurationError(f"gate has no unit {unit!r}")
    w_mat, bias = gate.units[unit]
    if x.shape[-1] != w_mat.shape[1]:
        raise ConfigurationError(
            f"gate unit {unit!r} expects width {w_mat.shape[1]}, got {x.shape}"
        )
    if x.ndim == 1:
        logits = T.matmul(w_mat, x)
    else:
        logits = T.matmul(x, T.transpose(w_mat))
    return T.add(T.softmax(logits), bias)


def fuse_outputs(h: Tensor, deltas: list[Tensor], w: Tensor) -> Tensor:
    """h + sum_i w_i * delta_i, mixing adapter outputs column by column.

    h and each delta: (d,) or (T, d). w: (k,) for a shared weight vector or
    (T, k) for per-position weights.
    """
    if w.shape[-1] != len(deltas):
        raise ContractError(f"{len(deltas)} deltas but weight vector has {w.shape[-1]} entries")
    out = h
    for i, delta in enumerate(deltas):
        if delta.shape != h.shape:
            raise ContractError(f"delta {i} shape {delta.shape} does not match h {h.shape}")
        wi = T.index1d(w, i) if w.ndim == 1 else T.slice_cols(w, i, i + 1)
        out = T.add(out, T.mul(wi, delta))
    return out


def static_fuse_lambda(h: Tensor, deltas: list[Tensor], lam: float) -> Tensor:
    """Two-adapter blend h + lam * delta_1 + (1 - lam) * delta_2."""
    if len(deltas) != 2:
        raise ContractError(f"lambda blending is defined for exactly 2 adapters, got {len(deltas)}")
    return T.add(h, T.add(T.scale(deltas[0], lam), T.scale(deltas[1], 1.0 - lam)))


def lorahub_merged_delta(x: Tensor, adapters, layer: int, site: SiteType, w) -> Tensor:
    """Static merged-form delta (sum_i w_i (a_i/r) B_i)(sum_i w_i A_i) x.

    A and B factors are mixed separately, so cross terms between adapters
    appear; all adapters must share one rank. ``w`` holds k scalars, given
    either as floats or as 0-d Tensors (trainable).
    """
    ranks = {a.rank for a in adapters}
    if len(ranks) != 1:
        raise ConfigurationError(
            f"merged-form fusion requires one shared rank, got {sorted(ranks)}; "
            "use output-level fusion for mixed ranks"
        )
    a_mix = None
    b_mix = None
    for adapter, wi in zip(adapters, w):
        key = (layer, site)
        if key not in adapter.sites:
            raise ConfigurationError(
                f"adapter {adapter.name!r} has no site (layer={layer}, {site.value})"
            )
        a_i, b_i = adapter.sites[key]
        wi_t = wi if isinstance(wi, Tensor) else Tensor(float(wi))
        a_term = T.mul(wi_t, a_i)
        b_term = T.mul(wi_t, T.scale(b_i, adapter.scaling))
        a_mix = a_term if a_mix is None else T.add(a_mix, a_term)
        b_mix = b_term if b_mix is None else T.add(b_mix, b_term)
    if x.ndim == 1:
        return T.matmul(b_mix, T.matmul(a_mix, x))
    return T.matmul(T.matmul(x, T.transpose(a_mix)), T.transpose(b_mix))


def lorahub_fuse(h: Tensor, x: Tensor, adapters, layer: int, site: SiteType, w) -> Tensor:
    """h plus the merged-form delta of :func:`lorahub_merged_delta`."""
    return T.add(h, lorahub_merged_delta(x, adapters, layer, site, w))


@dataclass
class StaticWeights:
    """Task-level constant fusion: uniform averaging, a manual lambda, or learned scalars."""

    scheme: str  # "average" | "lambda" | "merged"
    lam: float | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.scheme not in ("average", "lambda", "merged"):
            raise ConfigurationError(f"unknown static scheme {self.scheme!r}")
        if self.scheme == "lambda" and self.lam is None:
            raise ConfigurationError("lambda blending needs an explicit lambda value")
        if self.scheme == "merged" and self.weights is None:
            raise ConfigurationError("merged static fusion needs a weight vector")

    def output_weights(self, k: int) -> np.ndarray | None:
        """Output-mixing weight vector, or None when the merged form applies."""
        if self.scheme == "average":
            return np.full(k, 1.0 / k)
        if self.scheme == "lambda":
            if k != 2:
                raise ContractError(f"lambda blending is defined for exactly 2 adapters, got {k}")
            return np.array([self.lam, 1.0 - self.lam])
        return None


class TrainableMerged:
    """Merged-form static fusion whose k scalar weights are trainable tensors."""

    def __init__(self, k: int, init: np.ndarray | None = None):
        vals = np.full(k, 1.0 / k) if init is None else np.asarray(init, dtype=np.float64)
        self.weights = [Tensor(v, requires_grad=True) for v in vals]

    def values(self) -> np.ndarray:
        return np.array([w.item() for w in self.weights])

    def frozen(self) -> StaticWeights:
        return StaticWeights("merged", weights=self.values())

    def parameters(self) -> list[Tensor]:
        return self.weights

    def set_trainable(self, flag: bool) -> None:
        for p in self.weights:
            p.requires_grad = flag
            if not flag:
                p.grad = None


def gate_param_count(n_layers: int, d_model: int, d_ff: int, granularity: Granularity, k: int) -> int:
    """Trainable scalars in a gate: sum over units of k * d_in + k."""
    total = 0
    for unit in gate_units(granularity, n_layers):
        total += k * unit_input_dim(unit, d_model, d_ff) + k
    return total


def save_gate(gate: FusionGate, path) -> None:
    tensors = {}
    for unit, (w_mat, bias) in gate.units.items():
        tensors[f"gate/{unit}/W"] = w_mat.data
        tensors[f"gate/{unit}/b"] = bias.data
    meta = {
        "gate": {
            "granularity": gate.granularity.value,
            "k": gate.k,
            "adapter_order": gate.adapter_order,
            "units": sorted(gate.units),
        }
    }
    save_tensors(path, tensors, meta)


def load_gate(path) -> FusionGate:
    tensors, meta = load_tensors(path)
    info = meta["gate"]
    gate = FusionGate(Granularity(info["granularity"]), info["k"], list(info["adapter_order"]))
    for unit in info["units"]:
        gate.units[unit] = (Tensor(tensors[f"gate/{unit}/W"]), Tensor(tensors[f"gate/{unit}/b"]))
    return gate
