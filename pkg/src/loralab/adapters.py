"""Low-rank adapters: definition, attachment sites, and the BA delta rule."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_tensors, save_tensors
from .errors import ConfigurationError
from .tensor import Tensor


class SiteType(enum.Enum):
    """The seven linear projections per layer that can carry an adapter."""

    Q_PROJ = "q_proj"
    K_PROJ = "k_proj"
    V_PROJ = "v_proj"
    O_PROJ = "o_proj"
    FFN_GATE = "ffn_gate"
    FFN_UP = "ffn_up"
    FFN_DOWN = "ffn_down"


ALL_SITES = tuple(SiteType)


def site_dims(site: SiteType, d_model: int, d_ff: int) -> tuple[int, int]:
    """(d_in, d_out) of the projection the site wraps."""
    if site is SiteType.FFN_GATE or site is SiteType.FFN_UP:
        return d_model, d_ff
    if site is SiteType.FFN_DOWN:
        return d_ff, d_model
    return d_model, d_model


@dataclass
class LoraAdapter:
    """One skill's low-rank pairs: per (layer, site), A (r x d_in) and B (d_out x r).

    B starts at zero so a fresh adapter is a no-op; A is small uniform noise.
    The alpha/rank scale is applied inside :func:`lora_delta`, so downstream
    fusion always mixes fully scaled outputs.
    """

    name: str
    rank: int
    alpha: float
    sites: dict[tuple[int, SiteType], tuple[Tensor, Tensor]] = field(default_factory=dict)

    def __post_init__(self):
        if self.rank <= 0:
            raise ConfigurationError(f"adapter rank must be positive, got {self.rank}")
        if self.alpha <= 0:
            raise ConfigurationError(f"adapter alpha must be positive, got {self.alpha}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def site_list(self) -> list[tuple[int, SiteType]]:
        return sorted(self.sites, key=lambda k: (k[0], k[1].value))

    def parameters(self) -> list[Tensor]:
        out = []
        for key in self.site_list():
            out.extend(self.sites[key])
        return out

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None


def init_adapter(
    name: str,
    n_layers: int,
    d_model: int,
    d_ff: int,
    rank: int,
    alpha: float,
    rng: np.random.Generator,
    sites: tuple[SiteType, ...] = ALL_SITES,
) -> LoraAdapter:
    """Fresh adapter over ``sites`` of every layer: A ~ U(-1/sqrt(d_in), 1/sqrt(d_in)), B = 0."""
    adapter = LoraAdapter(name, rank, alpha)
    for layer in range(n_layers):
        for site in sites:
            d_in, d_out = site_dims(site, d_model, d_ff)
            bound = 1.0 / np.sqrt(d_in)
            a = Tensor(rng.uniform(-bound, bound, size=(rank, d_in)))
            b = Tensor(np.zeros((d_out, rank)))
            adapter.sites[(layer, site)] = (a, b)
    return adapter


def lora_delta(x: Tensor, adapter: LoraAdapter, layer: int, site: SiteType) -> Tensor:
    """(alpha/r) * B (A x) for one site; rows of x are independent positions."""
    key = (layer, site)
    if key not in adapter.sites:
        raise ConfigurationError(
            f"adapter {adapter.name!r} has no site (layer={layer}, {site.value})"
        )
    a, b = adapter.sites[key]
    if x.shape[-1] != a.shape[1]:
        raise ConfigurationError(
            f"adapter {adapter.name!r} site {site.value}: input width {x.shape[-1]} "
            f"does not match A {a.shape}"
        )
    if x.ndim == 1:
        return T.scale(T.matmul(b, T.matmul(a, x)), adapter.scaling)
    return T.scale(T.matmul(T.matmul(x, T.transpose(a)), T.transpose(b)), adapter.scaling)


def merged_weight(adapter: LoraAdapter, layer: int, site: SiteType) -> np.ndarray:
    """(alpha/r) * B A as an explicit dense matrix; test-only oracle for lora_delta."""
    key = (layer, site)
    if key not in adapter.sites:
        raise ConfigurationError(
            f"adapter {adapter.name!r} has no site (layer={layer}, {site.value})"
        )
    a, b = adapter.sites[key]
    return adapter.scaling * (b.data @ a.data)


def param_count(adapter: LoraAdapter) -> int:
    """Sum over sites of r * (d_in + d_out)."""
    total = 0
    for a, b in adapter.sites.values():
        total += a.data.size + b.data.size
    return total


def save_adapter(adapter: LoraAdapter, path) -> None:
    tensors = {}
    for (layer, site), (a, b) in adapter.sites.items():
        tensors[f"adapter/{adapter.name}/{layer}/{site.value}/A"] = a.data
        tensors[f"adapter/{adapter.name}/{layer}/{site.value}/B"] = b.data
    meta = {
        "adapter": {
            "name": adapter.name,
            "rank": adapter.rank,
            "alpha": adapter.alpha,
            "sites": [[layer, site.value] for layer, site in adapter.site_list()],
        }
    }
    save_tensors(path, tensors, meta)


def load_adapter(path) -> LoraAdapter:
    tensors, meta = load_tensors(path)
    info = meta["adapter"]
    adapter = LoraAdapter(info["name"], info["rank"], float(info["alpha"]))
    for layer, site_name in info["sites"]:
        site = SiteType(site_name)
        a = tensors[f"adapter/{info['name']}/{layer}/{site_name}/A"]
        b = tensors[f"adapter/{info['name']}/{layer}/{site_name}/B"]
        adapter.sites[(layer, site)] = (Tensor(a), Tensor(b))
    return adapter
