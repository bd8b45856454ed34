"""Quantization-noise model, layer sensitivities and loss-MSE prediction.

Quantizing an element ``z`` to a float format with ``m`` mantissa bits is
modelled as additive noise ``|z| * 2**-m * U[-1/2, 1/2]`` with variance
``z**2 * alpha``, ``alpha = 2**(-2m) / 12``. To first order the loss moves by
``sum(noise * dg/dz)``, so with independent noise the loss MSE of a layer is
``alpha * ||z * dg/dz||**2``; that squared norm, averaged over calibration
samples, is the layer's sensitivity.

The baseline format is the reference the loss is measured against, so it
contributes no noise at all.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import CalibBatch, ExtendedInput, ToyModel, extended_inputs, sample_losses
from .errors import LengthMismatch, MissingSensitivity, MPQError, SchemaError
from .graphir import SCHEMA_VERSION, Group, config_digits, config_index


@dataclass(frozen=True)
class FormatSpec:
    name: str
    mantissa_bits: int
    byte_width: int
    is_baseline: bool = False

    def __post_init__(self):
        if self.mantissa_bits < 0:
            raise MPQError(f"format {self.name}: mantissa_bits must be >= 0")
        if self.byte_width < 1:
            raise MPQError(f"format {self.name}: byte_width must be >= 1")


class FormatRegistry(Sequence[FormatSpec]):
    """Ordered list of formats; the index of a format is its digit in config encodings."""

    def __init__(self, formats: Iterable[FormatSpec]):
        self._formats = tuple(formats)
        if len(self._formats) < 2:
            raise MPQError("a format registry needs at least two formats")
        names = [f.name for f in self._formats]
        if len(set(names)) != len(names):
            raise MPQError(f"format names must be unique: {names}")
        base = [i for i, f in enumerate(self._formats) if f.is_baseline]
        if len(base) != 1:
            raise MPQError(f"exactly one baseline format required, found {len(base)}")
        self.baseline_index = base[0]

    def __getitem__(self, i):
        return self._formats[i]

    def __len__(self) -> int:
        return len(self._formats)

    def __repr__(self) -> str:
        return f"FormatRegistry({[f.name for f in self._formats]})"

    @property
    def baseline(self) -> FormatSpec:
        return self._formats[self.baseline_index]

    def index(self, name: str) -> int:  # type: ignore[override]
        for i, f in enumerate(self._formats):
            if f.name == name:
                return i
        raise KeyError(name)

    @property
    def alphas(self) -> list[float]:
        return [alpha(f) for f in self._formats]

    def to_json(self) -> list[dict]:
        return [
            {"name": f.name, "mantissa_bits": f.mantissa_bits, "byte_width": f.byte_width, "baseline": f.is_baseline}
            for f in self._formats
        ]

    @classmethod
    def from_json(cls, items: Sequence[Mapping]) -> "FormatRegistry":
        return cls(
            FormatSpec(str(d["name"]), int(d["mantissa_bits"]), int(d["byte_width"]), bool(d.get("baseline", False)))
            for d in items
        )


BF16 = FormatSpec("bf16", 7, 2, is_baseline=True)
FP8_E4M3 = FormatSpec("fp8_e4m3", 3, 1)


def default_registry() -> FormatRegistry:
    return FormatRegistry([BF16, FP8_E4M3])


def alpha(f: FormatSpec) -> float:
    """Relative noise variance ``2**(-2m) / 12``; zero for the baseline."""
    if f.is_baseline:
        return 0.0
    return 2.0 ** (-2 * f.mantissa_bits) / 12.0


def quant_noise(values: np.ndarray, f: FormatSpec, rng: np.random.Generator, size=None) -> np.ndarray:
    """Noise array for ``values``; ``size`` may add leading axes (independent draws)."""
    values = np.asarray(values, dtype=np.float64)
    shape = values.shape if size is None else size
    if f.is_baseline:
        return np.zeros(np.broadcast_shapes(shape, values.shape))
    u = rng.random(shape) - 0.5
    return np.abs(values) * (2.0 ** -f.mantissa_bits) * u


def quant_noise_sample(value: float, f: FormatSpec, rng: np.random.Generator) -> float:
    return float(quant_noise(np.float64(value), f, rng))


def layer_sensitivity(rec: ExtendedInput | np.ndarray, grad: np.ndarray | None = None) -> float:
    """``||z * dz||**2`` for one layer and one sample."""
    if isinstance(rec, ExtendedInput):
        z, dz = rec.z, rec.grad
    else:
        z, dz = np.asarray(rec, dtype=np.float64), np.asarray(grad, dtype=np.float64)
    if z.shape != dz.shape:
        raise LengthMismatch(f"extended input has {z.size} elements but gradient has {dz.size}")
    prod = z * dz
    return float(np.dot(prod, prod))


@dataclass
class SensitivityReport:
    s: dict[int, float]
    mean_sq_loss: float
    sample_count: int
    names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.sample_count < 1:
            raise MPQError("sensitivity report needs at least one sample")
        if self.mean_sq_loss < 0 or any(v < 0 for v in self.s.values()):
            raise MPQError("sensitivities and mean-square loss must be non-negative")

    def __getitem__(self, layer: int) -> float:
        try:
            return self.s[layer]
        except KeyError:
            raise MissingSensitivity(f"no sensitivity for layer {layer}") from None

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# mean_sq_loss={self.mean_sq_loss!r} samples={self.sample_count}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer_id", "layer_name", "sensitivity"])
        for vid in sorted(self.s):
            w.writerow([vid, self.names.get(vid, f"v{vid}"), repr(self.s[vid])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SensitivityReport":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#"):
            raise SchemaError("sensitivity file must start with '# mean_sq_loss=<float> samples=<int>'")
        meta = dict(tok.split("=", 1) for tok in lines[0][1:].split())
        try:
            msl, count = float(meta["mean_sq_loss"]), int(meta["samples"])
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"bad sensitivity header: {lines[0]!r}") from exc
        rows = list(csv.DictReader(lines[1:]))
        s = {int(r["layer_id"]): float(r["sensitivity"]) for r in rows}
        names = {int(r["layer_id"]): r["layer_name"] for r in rows}
        return cls(s, msl, count, names)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path: str | Path) -> "SensitivityReport":
        return cls.from_csv(Path(path).read_text())


def calibrate(model: ToyModel, batch: CalibBatch) -> SensitivityReport:
    """Average per-sample sensitivities and the mean-square loss over the batch."""
    losses, records = extended_inputs(model, batch)
    layers = model.layers
    R = len(batch)
    s = {}
    for vid in layers:
        s[vid] = math.fsum(layer_sensitivity(rec[vid]) for rec in records) / R
    msl = math.fsum(float(g) ** 2 for g in losses) / R
    names = {vid: model.graph.name(vid) for vid in layers}
    return SensitivityReport(s, msl, R, names)


class MPAssignment:
    """Per-layer format indices (layer id -> index into the registry)."""

    def __init__(self, formats: Mapping[int, int]):
        self.formats = dict(formats)

    def __repr__(self) -> str:
        return f"MPAssignment({self.formats})"

    def __eq__(self, other) -> bool:
        return isinstance(other, MPAssignment) and self.formats == other.formats

    def __getitem__(self, layer: int) -> int:
        return self.formats[layer]

    @classmethod
    def uniform(cls, layers: Iterable[int], fmt: int) -> "MPAssignment":
        return cls({vid: fmt for vid in layers})

    @classmethod
    def from_configs(cls, groups: Sequence[Group], configs: Sequence[int], n_formats: int) -> "MPAssignment":
        if len(configs) != len(groups):
            raise MPQError(f"{len(configs)} configs for {len(groups)} groups")
        out = {}
        for grp, p in zip(groups, configs):
            for vid, digit in zip(grp.layers, config_digits(p, len(grp), n_formats)):
                out[vid] = digit
        return cls(out)

    def to_configs(self, groups: Sequence[Group], n_formats: int) -> list[int]:
        missing = [v for grp in groups for v in grp.layers if v not in self.formats]
        if missing:
            raise MPQError(f"assignment does not cover layers {missing}")
        return [config_index((self.formats[v] for v in grp.layers), n_formats) for grp in groups]

    def quantized(self, baseline: int) -> list[int]:
        return sorted(v for v, f in self.formats.items() if f != baseline)

    def restricted(self, layers: Iterable[int], baseline: int) -> "MPAssignment":
        """Copy with every layer outside ``layers`` reset to the baseline."""
        keep = set(layers)
        return MPAssignment({v: (f if v in keep else baseline) for v, f in self.formats.items()})


def predict_group_mse(group: Group, p: int, rep: SensitivityReport, fmts: FormatRegistry) -> float:
    alphas = fmts.alphas
    d = 0.0
    for vid, digit in zip(group.layers, config_digits(p, len(group), len(fmts))):
        d += rep[vid] * alphas[digit]
    return d


def group_mse_vector(group: Group, rep: SensitivityReport, fmts: FormatRegistry) -> np.ndarray:
    return np.array([predict_group_mse(group, p, rep, fmts) for p in range(len(fmts) ** len(group))])


def predict_config_mse(
    a: MPAssignment, rep: SensitivityReport, fmts: FormatRegistry, groups: Sequence[Group] | None = None
) -> float:
    """Predicted loss MSE of an assignment.

    With ``groups`` the sum runs group by group exactly as the solver totals
    it; without, it is the flat layer sum.
    """
    alphas = fmts.alphas
    if groups is None:
        d = 0.0
        for vid in sorted(a.formats):
            d += rep[vid] * alphas[a.formats[vid]]
        return d
    d = 0.0
    for grp, p in zip(groups, a.to_configs(groups, len(fmts))):
        d += predict_group_mse(grp, p, rep, fmts)
    return d


@dataclass(frozen=True)
class LossMseEstimate:
    mean: float
    stderr: float = 0.0
    trials: int = 0

    def __post_init__(self):
        if self.mean < 0 or self.stderr < 0:
            raise MPQError("loss MSE estimates are non-negative")


def _noise_perturb(qfmt: dict[int, FormatSpec], rng: np.random.Generator, b: int):
    def perturb(vid: int, k: int, value: np.ndarray) -> np.ndarray:
        f = qfmt.get(vid)
        if f is None:
            return value
        shape = value.shape if value.ndim >= 3 else (b,) + value.shape
        return value + quant_noise(value, f, rng, size=shape)

    return perturb


def mc_loss_mse(
    model: ToyModel,
    a: MPAssignment,
    batch: CalibBatch,
    trials: int,
    seed: int,
    fmts: FormatRegistry | None = None,
    chunk: int = 1000,
    threads: int = 1,
) -> LossMseEstimate:
    """Monte-Carlo estimate of ``E[(g_hat - g)**2]`` under the noise model.

    Each trial draws fresh noise for every element of every quantized
    layer's activations and weights, for every sample. Work is split into
    ``(sample, chunk)`` units, each with its own ``(seed, sample, chunk)``
    generator, so the result does not depend on ``threads``.
    """
    if trials < 1:
        raise MPQError("trials must be >= 1")
    fmts = fmts or default_registry()
    qfmt = {vid: fmts[f] for vid, f in a.formats.items() if not fmts[f].is_baseline}
    if not qfmt:
        return LossMseEstimate(0.0, 0.0, trials)
    R = len(batch)
    clean = [float(sample_losses(model, batch, r)) for r in range(R)]
    units = [(r, c) for r in range(R) for c in range(math.ceil(trials / chunk))]

    def run(unit):
        r, c = unit
        b = min(chunk, trials - c * chunk)
        rng = np.random.default_rng([seed, r, c])
        losses = sample_losses(model, batch, r, _noise_perturb(qfmt, rng, b), batch_size=b)
        return (losses - clean[r]) ** 2

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(run, units))
    else:
        parts = [run(u) for u in units]
    per_trial = np.zeros(trials)
    for (r, c), sq in zip(units, parts):
        per_trial[c * chunk : c * chunk + len(sq)] += sq
    per_trial /= R
    mean = float(per_trial.mean())
    se = float(per_trial.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return LossMseEstimate(mean, se, trials)


def registry_to_dict(fmts: FormatRegistry) -> dict:
    return {"schema_version": SCHEMA_VERSION, "formats": fmts.to_json()}


def load_registry(path: str | Path) -> FormatRegistry:
    """Read a formats file: a bare JSON list, or ``{"schema_version": 1, "formats": [...]}``."""
    d = json.loads(Path(path).read_text())
    if isinstance(d, list):
        return FormatRegistry.from_json(d)
    if not isinstance(d, Mapping) or d.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"{path}: formats file schema_version must be {SCHEMA_VERSION}")
    return FormatRegistry.from_json(d["formats"])
