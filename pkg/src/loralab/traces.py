"""Recorded fusion-weight vectors, keyed by (sequence, step, gate unit).

CSV layout: ``seq_id,step,layer,site,token,w0,...,w{k-1}``. The site column
is empty for step- and layer-level gates; step-level rows carry layer -1.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class TraceRecord:
    seq_id: int
    step: int
    layer: int
    site: str
    token: int
    weights: tuple[float, ...]


@dataclass
class WeightTrace:
    k: int
    records: list[TraceRecord] = field(default_factory=list)

    def add(self, seq_id: int, step: int, layer: int, site: str, token: int, weights) -> None:
        w = tuple(float(x) for x in weights)
        if len(w) != self.k:
            raise InputError(f"weight vector has {len(w)} entries, trace expects {self.k}")
        self.records.append(TraceRecord(seq_id, step, layer, site, token, w))

    def sequence_ids(self) -> list[int]:
        return sorted({r.seq_id for r in self.records})

    def for_sequence(self, seq_id: int) -> list[TraceRecord]:
        return [r for r in self.records if r.seq_id == seq_id]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            ["seq_id", "step", "layer", "site", "token"] + [f"w{i}" for i in range(self.k)]
        )
        for r in self.records:
            writer.writerow(
                [r.seq_id, r.step, r.layer, r.site, r.token]
                + [repr(w) for w in r.weights]
            )
        return buf.getvalue()


def trace_from_csv(text: str) -> WeightTrace:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if not header or header[:5] != ["seq_id", "step", "layer", "site", "token"]:
        raise InputError("not a weight-trace CSV: unexpected header")
    k = len(header) - 5
    trace = WeightTrace(k)
    for row in reader:
        if not row:
            continue
        trace.add(int(row[0]), int(row[1]), int(row[2]), row[3], int(row[4]),
                  [float(x) for x in row[5:]])
    return trace


def weights_array(records: list[TraceRecord]) -> np.ndarray:
    """(n, k) array of the weight vectors in record order."""
    return np.array([r.weights for r in records], dtype=np.float64)
