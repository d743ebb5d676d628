"""Aggregations over recorded fusion-weight traces.

Every aggregate here is a finite mean over trace records, so tests pin it
against a brute-force recomputation from the raw CSV. Binning and
reduction conventions: per-step weights are averaged over gate units
(layers, and sites within a layer) before any positional binning, and
relative positions are taken over each sequence's generated length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError, TraceLookupError
from .tasks import Example, Metrics, evaluate, token_text
from .traces import WeightTrace, weights_array


def mean_weights_per_layer(trace: WeightTrace) -> np.ndarray:
    """(L, k) mean weight vector per layer over all sequences, steps, and sites."""
    if not trace.records:
        raise ContractError("cannot aggregate an empty trace")
    if any(r.layer < 0 for r in trace.records):
        raise ContractError("per-layer means need layer- or module-level traces")
    n_layers = max(r.layer for r in trace.records) + 1
    out = np.zeros((n_layers, trace.k))
    for layer in range(n_layers):
        recs = [r for r in trace.records if r.layer == layer]
        if not recs:
            raise ContractError(f"trace has no records for layer {layer}")
        out[layer] = weights_array(recs).mean(axis=0)
    return out


def _per_step_means(trace: WeightTrace) -> dict[int, dict[int, np.ndarray]]:
    """seq_id -> step -> weight vector averaged over gate units."""
    sums: dict[int, dict[int, np.ndarray]] = {}
    counts: dict[int, dict[int, int]] = {}
    for r in trace.records:
        s = sums.setdefault(r.seq_id, {})
        c = counts.setdefault(r.seq_id, {})
        w = np.asarray(r.weights)
        if r.step in s:
            s[r.step] = s[r.step] + w
            c[r.step] += 1
        else:
            s[r.step] = w
            c[r.step] = 1
    return {
        seq: {step: s[step] / counts[seq][step] for step in s}
        for seq, s in sums.items()
    }


def position_bins(trace: WeightTrace, bins: int = 10) -> np.ndarray:
    """(bins, k) mean weights by relative generation position.

    Step t of a T-step sequence lands in bin floor(bins * t / T), clamped
    to the last bin; bins that receive no steps hold NaN.
    """
    if bins < 1:
        raise ContractError(f"bins must be >= 1, got {bins}")
    if not trace.records:
        raise ContractError("cannot bin an empty trace")
    sums = np.zeros((bins, trace.k))
    counts = np.zeros(bins, dtype=np.int64)
    for seq, steps in _per_step_means(trace).items():
        total = len(steps)
        for step, w in steps.items():
            b = min(bins * step // total, bins - 1)
            sums[b] += w
            counts[b] += 1
    out = np.full((bins, trace.k), np.nan)
    filled = counts > 0
    out[filled] = sums[filled] / counts[filled, None]
    return out


@dataclass(frozen=True)
class TokenTraceRow:
    step: int
    token: str
    weights: tuple[float, ...]


def token_trace_table(trace: WeightTrace, seq_id: int, reduction: str = "mean") -> list[TokenTraceRow]:
    """One row per generated token: its text and layer-reduced weight vector."""
    if reduction != "mean":
        raise ConfigurationError(f"unsupported layer reduction {reduction!r}")
    recs = trace.for_sequence(seq_id)
    if not recs and trace.records:
        raise TraceLookupError(f"sequence {seq_id} not present in trace")
    if not recs:
        return []
    by_step: dict[int, list] = {}
    for r in recs:
        by_step.setdefault(r.step, []).append(r)
    rows = []
    for step in sorted(by_step):
        group = by_step[step]
        w = weights_array(group).mean(axis=0)
        rows.append(TokenTraceRow(step, token_text(group[0].token), tuple(float(x) for x in w)))
    return rows


@dataclass(frozen=True)
class TransferTask:
    """Everything needed to evaluate one composed task in the transfer grid."""

    name: str
    adapters: list  # fused in gate order (language adapter first)
    task_adapter_index: int
    test: list[Example]


@dataclass
class TransferMatrix:
    task_names: list[str]
    values: np.ndarray  # rows: gate-training task; cols: evaluation task

    def to_csv(self) -> str:
        lines = ["gate_task," + ",".join(self.task_names)]
        for name, row in zip(self.task_names, self.values):
            lines.append(name + "," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def transfer_matrix(gates: dict[str, object], suites: dict[str, TransferTask], model) -> TransferMatrix:
    """Score delta grid: fused-with-row-gate minus column-task-adapter-only."""
    names = sorted(suites)
    missing = [n for n in names if n not in gates]
    if missing:
        raise ConfigurationError(f"no trained gate for tasks: {missing}")
    values = np.zeros((len(names), len(names)))
    single_scores: dict[str, float] = {}
    for name in names:
        suite = suites[name]
        single = evaluate(model, [suite.adapters[suite.task_adapter_index]], None, suite.test)
        single_scores[name] = single.exact_match
    for i, row in enumerate(names):
        for j, col in enumerate(names):
            suite = suites[col]
            fused: Metrics = evaluate(model, suite.adapters, gates[row], suite.test)
            values[i, j] = fused.exact_match - single_scores[col]
    return TransferMatrix(names, values)


def aggregates_csv(trace: WeightTrace, bins: int = 10) -> dict[str, str]:
    """Render the standard aggregate tables as named CSV payloads."""
    per_layer = mean_weights_per_layer(trace)
    by_bin = position_bins(trace, bins)
    k = trace.k
    header = ",".join(f"w{i}" for i in range(k))
    layer_lines = ["layer," + header]
    for layer, row in enumerate(per_layer):
        layer_lines.append(f"{layer}," + ",".join(repr(float(v)) for v in row))
    bin_lines = ["bin," + header]
    for b, row in enumerate(by_bin):
        bin_lines.append(f"{b}," + ",".join(repr(float(v)) for v in row))
    return {
        "mean_weights_per_layer.csv": "\n".join(layer_lines) + "\n",
        "position_bins.csv": "\n".join(bin_lines) + "\n",
    }


PLOT_SCRIPT = '''"""Render weight-analysis CSVs produced alongside this script."""
import csv
import pathlib
import sys

import matplotlib.pyplot as plt

here = pathlib.Path(sys.argv[1]) if len(sys.argv) > 1 else pathlib.Path(__file__).parent


def read(name):
    with open(here / name) as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    xs = [r[0] for r in body]
    series = [[float(v) for v in r[1:]] for r in body]
    return header, xs, series


fig, axes = plt.subplots(1, 2, figsize=(10, 4))
for ax, name, xlabel in (
    (axes[0], "mean_weights_per_layer.csv", "layer"),
    (axes[1], "position_bins.csv", "relative position bin"),
):
    header, xs, series = read(name)
    for i, label in enumerate(header[1:]):
        ax.plot(xs, [row[i] for row in series], marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("fusion weight")
    ax.legend()
fig.tight_layout()
fig.savefig(here / "weights.png", dpi=150)
print(here / "weights.png")
'''
