"""Per-group performance gain vectors.

Three metrics, each giving one value per group configuration ``p``:

* ``ET``, empirical time gain: baseline TTFT minus the TTFT measured with only
  group ``j`` at config ``p``. Comes from a :class:`TimingTable`.
* ``TT``, theoretical time gain: MAC count times a per-MAC time saving.
* ``M``, memory gain: weight elements times per-element byte saving.

TT and M are additive over the layers of a group by construction; ET is not,
which is why it is measured per group.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import MissingEntry, MPQError, OpaqueLayer, SchemaError
from .graphir import SCHEMA_VERSION, Bgemm, CompGraph, Group, Linear, VertexKind, config_digits
from .sensitivity import FormatRegistry, FormatSpec

log = logging.getLogger(__name__)

METRICS = ("ET", "TT", "M")


@dataclass
class CostParams:
    """Per-format unit gains relative to the baseline format.

    ``delta_t`` defaults to 1 time unit per MAC for every non-baseline format
    and ``delta_m`` to the byte-width difference from the baseline.
    """

    fmts: FormatRegistry
    n_tokens: int = 1
    delta_t: dict[str, float] = field(default_factory=dict)
    delta_m: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_tokens < 1:
            raise MPQError("n_tokens must be >= 1")
        base = self.fmts.baseline
        for f in self.fmts:
            if f.is_baseline:
                self.delta_t[f.name] = 0.0
                self.delta_m[f.name] = 0.0
            else:
                self.delta_t.setdefault(f.name, 1.0)
                self.delta_m.setdefault(f.name, float(base.byte_width - f.byte_width))


def _fmt(f: FormatSpec | int, params: CostParams) -> FormatSpec:
    return params.fmts[f] if isinstance(f, int) else f


def theoretical_layer_gain(kind: VertexKind, f: FormatSpec | int, params: CostParams) -> float:
    f = _fmt(f, params)
    dt = params.delta_t[f.name]
    if isinstance(kind, Linear):
        return params.n_tokens * kind.in_features * kind.out_features * dt
    if isinstance(kind, Bgemm):
        return params.n_tokens * kind.dim**2 * dt
    raise OpaqueLayer(f"opaque vertex {kind} has no MAC gain")


def memory_layer_gain(kind: VertexKind, f: FormatSpec | int, params: CostParams) -> float:
    f = _fmt(f, params)
    if isinstance(kind, Linear):
        return kind.in_features * kind.out_features * params.delta_m[f.name]
    if isinstance(kind, Bgemm):
        return 0.0
    raise OpaqueLayer(f"opaque vertex {kind} has no memory gain")


@dataclass
class PerfVector:
    group: int
    metric: str
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.values)


def _additive_vector(group: Group, graph: CompGraph, params: CostParams, metric: str, layer_gain) -> PerfVector:
    F = len(params.fmts)
    per_layer = [[layer_gain(graph.kind(v), f, params) for f in range(F)] for v in group.layers]
    vals = np.empty(F ** len(group))
    for p in range(len(vals)):
        total = 0.0
        for l, digit in enumerate(config_digits(p, len(group), F)):
            total += per_layer[l][digit]
        vals[p] = total
    return PerfVector(group.j, metric, vals)


def group_perf_vector_tt(group: Group, graph: CompGraph, params: CostParams) -> PerfVector:
    return _additive_vector(group, graph, params, "TT", theoretical_layer_gain)


def group_perf_vector_m(group: Group, graph: CompGraph, params: CostParams) -> PerfVector:
    return _additive_vector(group, graph, params, "M", memory_layer_gain)


@dataclass
class TimingTable:
    """Measured TTFTs (ms) with one group at a given config and the rest at baseline."""

    baseline_ttft: float
    entries: dict[tuple[int, int], list[float]]
    repeats: int = 1

    def __post_init__(self):
        if not self.baseline_ttft > 0:
            raise MPQError("baseline TTFT must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "baseline_ttft_ms": self.baseline_ttft,
            "repeats": self.repeats,
            "entries": [
                {"group": j, "config": p, "ttft_ms": list(v)} for (j, p), v in sorted(self.entries.items())
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TimingTable":
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise SchemaError(f"timing table schema_version {version} != {SCHEMA_VERSION}")
        entries: dict[tuple[int, int], list[float]] = {}
        for e in d["entries"]:
            raw = e["ttft_ms"]
            vals = [float(x) for x in (raw if isinstance(raw, list) else [raw])]
            entries.setdefault((int(e["group"]), int(e["config"])), []).extend(vals)
        return cls(float(d["baseline_ttft_ms"]), entries, int(d.get("repeats", 1)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TimingTable":
        return cls.from_dict(json.loads(Path(path).read_text()))


def empirical_gains(
    table: TimingTable, groups: Sequence[Group], n_formats: int, reduce: str = "mean", warn_rel: float = 0.01
) -> list[PerfVector]:
    """``c[j, p] = baseline - ttft(j, p)``, repeats reduced by mean (or ``min``).

    The all-baseline config is pinned to 0. Its measurement is optional and
    only checked against the baseline (a warning past ``warn_rel``).
    """
    if reduce not in ("mean", "min"):
        raise MPQError(f"reduce must be 'mean' or 'min', got {reduce!r}")
    out = []
    for grp in groups:
        vals = np.zeros(n_formats ** len(grp))
        for p in range(len(vals)):
            samples = table.entries.get((grp.j, p))
            if p == 0:
                if samples:
                    t0 = float(np.mean(samples))
                    if abs(t0 - table.baseline_ttft) > warn_rel * table.baseline_ttft:
                        log.warning(
                            "group %d all-baseline TTFT %.3f ms differs from baseline %.3f ms",
                            grp.j, t0, table.baseline_ttft,
                        )
                continue
            if not samples:
                raise MissingEntry(grp.j, p)
            t = min(samples) if reduce == "min" else math.fsum(samples) / len(samples)
            vals[p] = table.baseline_ttft - t
        out.append(PerfVector(grp.j, "ET", vals))
    return out


class SynthTiming:
    """Deterministic stand-in for a device that times group configurations.

    Each layer gets a nominal saving (its MAC count times ``ms_per_mac``) and
    each multi-layer group config a seeded interaction offset scaled by
    ``interaction_strength``, so groups are not additive over their layers.
    Groups stay exactly additive with each other: the full-model gain is the
    sum of group gains. All noiseless quantities are rounded to multiples of
    ``2**-10`` ms so every sum and difference is exact in binary floating point.
    Jitter is Gaussian with std ``jitter`` ms per repeat.
    """

    QUANTUM = 2.0**-10

    def __init__(
        self,
        groups: Sequence[Group],
        graph: CompGraph,
        params: CostParams,
        seed: int,
        interaction_strength: float = 0.0,
        jitter: float = 0.0,
        baseline_ttft: float = 1000.0,
        ms_per_mac: float = 1e-4,
        repeats: int = 5,
    ):
        if interaction_strength < 0 or jitter < 0:
            raise MPQError("interaction_strength and jitter must be >= 0")
        self.groups = list(groups)
        self.n_formats = len(params.fmts)
        self.baseline_ttft = self._q(baseline_ttft)
        self.jitter = jitter
        self.repeats = repeats
        self.seed = seed
        rng = np.random.default_rng([seed, 0])
        F = self.n_formats
        self.gain: dict[tuple[int, int], float] = {}
        self.per_layer: list[list[list[float]]] = []
        for grp in self.groups:
            per_layer = [
                [self._q(theoretical_layer_gain(graph.kind(v), f, params) * ms_per_mac) for f in range(F)]
                for v in grp.layers
            ]
            self.per_layer.append(per_layer)
            scale = max((max(row) for row in per_layer), default=0.0)
            offsets = rng.uniform(-1.0, 1.0, size=F ** len(grp))
            for p in range(F ** len(grp)):
                digits = config_digits(p, len(grp), F)
                g = sum(per_layer[l][d] for l, d in enumerate(digits))
                if len(grp) > 1 and p != 0:
                    g += self._q(interaction_strength * scale * offsets[p])
                self.gain[(grp.j, p)] = g

    @classmethod
    def _q(cls, x: float) -> float:
        return round(x / cls.QUANTUM) * cls.QUANTUM

    def additive_gain(self, j: int, p: int) -> float:
        """Sum of the nominal per-layer gains, i.e. the gain without interaction."""
        digits = config_digits(p, len(self.groups[j]), self.n_formats)
        return sum(self.per_layer[j][l][d] for l, d in enumerate(digits))

    def group_ttft(self, j: int, p: int) -> float:
        return self.baseline_ttft - self.gain[(j, p)]

    def full_model_gain(self, configs: Sequence[int]) -> float:
        """Noiseless end-to-end gain with group ``j`` at ``configs[j]``."""
        total = 0.0
        for j, p in enumerate(configs):
            total += self.gain[(j, p)]
        return self.baseline_ttft - (self.baseline_ttft - total)

    def measure_full_model(self, configs: Sequence[int], seed: int) -> float:
        """Jittered end-to-end gain, averaged over ``repeats`` runs."""
        rng = np.random.default_rng([self.seed, 2, seed])
        ttft = self.baseline_ttft - self.full_model_gain(configs)
        runs = ttft + rng.normal(0.0, self.jitter, size=self.repeats) if self.jitter else [ttft] * self.repeats
        return self.baseline_ttft - math.fsum(runs) / self.repeats

    def table(self) -> TimingTable:
        rng = np.random.default_rng([self.seed, 1])
        entries = {}
        for (j, p), _ in sorted(self.gain.items()):
            t = self.group_ttft(j, p)
            if self.jitter:
                entries[(j, p)] = [float(x) for x in t + rng.normal(0.0, self.jitter, size=self.repeats)]
            else:
                entries[(j, p)] = [t] * self.repeats
        return TimingTable(self.baseline_ttft, entries, self.repeats)


def synth_timing(
    groups: Sequence[Group],
    graph: CompGraph,
    params: CostParams,
    seed: int,
    interaction_strength: float = 0.0,
    jitter: float = 0.0,
    **kw: Any,
) -> TimingTable:
    return SynthTiming(groups, graph, params, seed, interaction_strength, jitter, **kw).table()


def fit_scale_bias(x: Iterable[float], y: Iterable[float]) -> tuple[float, float]:
    """Least-squares ``(a, b)`` minimising ``||a * x + b - y||``."""
    x = np.asarray(list(x), dtype=np.float64)
    y = np.asarray(list(y), dtype=np.float64)
    A = np.stack([x, np.ones_like(x)], axis=1)
    (a, b), *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(a), float(b)


def perf_vectors_csv(vectors: Sequence[PerfVector]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "config", "metric", "value"])
    for vec in vectors:
        for p, v in enumerate(vec.values):
            w.writerow([vec.group, p, vec.metric, repr(float(v))])
    return buf.getvalue()


def perf_vectors(
    metric: str,
    groups: Sequence[Group],
    graph: CompGraph,
    params: CostParams,
    table: TimingTable | None = None,
    reduce: str = "mean",
) -> list[PerfVector]:
    metric = metric.upper()
    if metric == "ET":
        if table is None:
            raise MPQError("metric ET needs a timing table")
        return empirical_gains(table, groups, len(params.fmts), reduce=reduce)
    if metric == "TT":
        return [group_perf_vector_tt(g, graph, params) for g in groups]
    if metric == "M":
        return [group_perf_vector_m(g, graph, params) for g in groups]
    raise MPQError(f"unknown metric {metric!r}; expected one of {METRICS}")
