"""Dataset ingestion, scaling, and synthetic regime-series generation.

Series are float64 (T, D) matrices. Unequal-length collections are
right-padded to a common length with a boolean mask; masked (padded)
steps are excluded from every loss term downstream. Scaling is per-dim
z-score fitted on the train split only, with the inverse retained so
forecasts can be reported in original units.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    """Input file violates the declared format."""


class SchemaError(ValueError):
    """Input file does not match the declared column schema."""


class ProtocolError(ValueError):
    """Series length incompatible with the requested context/horizon split."""


@dataclass
class Sample:
    """One labeled series. ``mask`` marks real steps; padding is trailing."""

    series: np.ndarray
    label: object = None          # class id (int) or (p, D) continuation target
    split: str = "train"
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=np.float64)
        if self.series.ndim != 2:
            raise ParseError(f"series must be (T, D), got {self.series.shape}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != (self.series.shape[0],):
                raise ParseError("mask length must equal series length")
            n = int(self.mask.sum())
            if not np.array_equal(self.mask, np.arange(len(self.mask)) < n):
                raise ParseError("mask must be a block of True followed by padding")

    @property
    def length(self) -> int:
        if self.mask is None:
            return self.series.shape[0]
        return int(self.mask.sum())

    def trimmed(self) -> np.ndarray:
        """The series without trailing padded steps."""
        return self.series[: self.length]


@dataclass
class Scaler:
    """Per-dimension affine transform x -> (x - mean) / std."""

    mean: np.ndarray
    std: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean

    def compose(self, inner: "Scaler") -> "Scaler":
        """Scaler equivalent to applying ``inner`` first, then self."""
        return Scaler(mean=inner.mean + self.mean * inner.std,
                      std=inner.std * self.std)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(mean=np.asarray(d["mean"], dtype=np.float64),
                   std=np.asarray(d["std"], dtype=np.float64))


class SeriesDataset:
    """A set of labeled multivariate series with split designation."""

    def __init__(self, samples: list[Sample], name: str = "",
                 task: str = "classification", num_classes: int | None = None,
                 horizon: int | None = None, scaler: Scaler | None = None):
        if not samples:
            raise ParseError("dataset has no samples")
        dims = {s.series.shape[1] for s in samples}
        if len(dims) != 1:
            raise ParseError(f"inconsistent series dimensions: {sorted(dims)}")
        self.samples = samples
        self.name = name
        self.task = task
        self.num_classes = num_classes
        self.horizon = horizon
        self.scaler = scaler
        if task == "classification" and num_classes is None:
            labels = {s.label for s in samples if s.label is not None}
            self.num_classes = len(labels)

    @property
    def input_dim(self) -> int:
        return self.samples[0].series.shape[1]

    def split(self, which: str) -> list[Sample]:
        return [s for s in self.samples if s.split == which]

    @property
    def train_samples(self) -> list[Sample]:
        return self.split("train")

    @property
    def test_samples(self) -> list[Sample]:
        return self.split("test")


# -- UEA sequence text format -------------------------------------------------

def _parse_uea_line(line: str, lineno: int, expect_dims: int | None):
    fields = line.split(":")
    if len(fields) < 2:
        raise ParseError(f"line {lineno}: expected ':'-separated dimensions "
                         "and a trailing class label")
    *dim_fields, label = fields
    if expect_dims is not None and len(dim_fields) != expect_dims:
        raise ParseError(f"line {lineno}: {len(dim_fields)} dimensions, "
                         f"expected {expect_dims}")
    label = label.strip()
    if not label:
        raise ParseError(f"line {lineno}: empty class label")
    dims = []
    for d, text in enumerate(dim_fields):
        values = []
        for v in text.split(","):
            v = v.strip()
            if not v:
                raise ParseError(f"line {lineno}: empty value field in dimension {d}")
            try:
                values.append(float(v))
            except ValueError:
                raise ParseError(f"line {lineno}: bad numeric value {v!r}") from None
        dims.append(values)
    lengths = {len(v) for v in dims}
    if len(lengths) != 1:
        raise ParseError(f"line {lineno}: dimensions have unequal lengths {sorted(lengths)}")
    return np.array(dims, dtype=np.float64).T, label  # (T, D)


def _read_uea_file(path) -> list[tuple[np.ndarray, str]]:
    rows = []
    expect_dims = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("@"):
                continue
            series, label = _parse_uea_line(line, lineno, expect_dims)
            expect_dims = series.shape[1]
            rows.append((series, label))
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return rows


def _sibling_test_file(path: Path) -> Path | None:
    name = path.name
    for marker in ("_TRAIN", "_train"):
        if marker in name:
            candidate = path.with_name(
                name.replace(marker, marker.replace("TRAIN", "TEST").replace("train", "test")))
            if candidate.exists():
                return candidate
    return None


def load_uea(path) -> SeriesDataset:
    """Load a UEA-style sequence text file.

    Header lines start with '@'; each data line holds one sample, its
    dimensions separated by ':' with comma-separated values and the class
    label last. If the filename contains _TRAIN and a matching _TEST file
    exists next to it, both are loaded with their split designations.
    Unequal-length series are right-padded with a mask.
    """
    path = Path(path)
    rows = [(s, lab, "train") for s, lab in _read_uea_file(path)]
    test_path = _sibling_test_file(path)
    if test_path is not None:
        rows += [(s, lab, "test") for s, lab in _read_uea_file(test_path)]

    dims = {s.shape[1] for s, _, _ in rows}
    if len(dims) != 1:
        raise ParseError(f"inconsistent dimension count across files: {sorted(dims)}")
    labels = sorted({lab for _, lab, _ in rows})
    label_ids = {lab: i for i, lab in enumerate(labels)}
    max_len = max(s.shape[0] for s, _, _ in rows)
    d = dims.pop()

    samples = []
    for series, lab, split in rows:
        t = series.shape[0]
        if t < max_len:
            padded = np.zeros((max_len, d))
            padded[:t] = series
            mask = np.arange(max_len) < t
            samples.append(Sample(padded, label_ids[lab], split, mask))
        else:
            samples.append(Sample(series, label_ids[lab], split))
    return SeriesDataset(samples, name=path.stem, task="classification",
                         num_classes=len(labels))


def save_uea(path, samples: list[Sample]):
    """Write samples in the UEA sequence text format (full float precision)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("@problemName generated\n@data\n")
        for s in samples:
            series = s.trimmed()
            dims = [",".join(repr(float(v)) for v in series[:, d])
                    for d in range(series.shape[1])]
            fh.write(":".join(dims) + f":{s.label}\n")


# -- CSV long format -----------------------------------------------------------

@dataclass
class CsvSchema:
    """Column layout for long-format CSV: one row per (series, time step)."""

    id_col: str = "id"
    time_col: str = "t"
    value_cols: list[str] = field(default_factory=lambda: ["value"])
    label_col: str | None = None
    split_col: str | None = None


def load_csv(path, schema: CsvSchema, task: str = "classification",
             horizon: int | None = None) -> SeriesDataset:
    """Load a long-format CSV into one series per id.

    Rows are grouped by id and sorted by time. For forecasting datasets
    (``task="forecasting"`` with a horizon), each sample's label is the
    trailing ``horizon`` steps and its series the preceding context.
    """
    path = Path(path)
    if task == "classification" and schema.label_col is None:
        raise SchemaError("classification requested but schema has no label column")
    if task == "forecasting" and (horizon is None or horizon < 1):
        raise SchemaError("forecasting requested but no positive horizon given")

    groups: dict[str, list] = {}
    labels: dict[str, str] = {}
    splits: dict[str, str] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file")
        needed = [schema.id_col, schema.time_col, *schema.value_cols]
        if schema.label_col:
            needed.append(schema.label_col)
        if schema.split_col:
            needed.append(schema.split_col)
        missing = [c for c in needed if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            sid = row[schema.id_col]
            try:
                t = float(row[schema.time_col])
                values = [float(row[c]) for c in schema.value_cols]
            except (TypeError, ValueError):
                raise ParseError(f"line {lineno}: non-numeric value") from None
            groups.setdefault(sid, []).append((t, values))
            if schema.label_col:
                labels[sid] = row[schema.label_col]
            if schema.split_col:
                splits[sid] = row[schema.split_col]

    if not groups:
        raise ParseError(f"{path}: no data rows")

    label_ids = None
    if task == "classification":
        label_ids = {lab: i for i, lab in enumerate(sorted(set(labels.values())))}

    samples = []
    for sid in sorted(groups):
        rows = sorted(groups[sid], key=lambda r: r[0])
        series = np.array([v for _, v in rows], dtype=np.float64)
        split = splits.get(sid, "train")
        if split not in ("train", "test"):
            raise SchemaError(f"unknown split {split!r} for id {sid}")
        if task == "forecasting":
            context, target = stock_protocol_split(
                series, context=series.shape[0] - horizon, horizon=horizon)
            samples.append(Sample(context, target, split))
        else:
            samples.append(Sample(series, label_ids[labels[sid]], split))

    num_classes = len(label_ids) if label_ids else None
    return SeriesDataset(samples, name=path.stem, task=task,
                         num_classes=num_classes, horizon=horizon)


def save_csv(path, dataset: SeriesDataset):
    """Write a dataset in the long CSV format understood by ``load_csv``.

    Forecasting samples are written as full series (context then target)
    so the file round-trips through ``load_csv`` with the same horizon.
    """
    d = dataset.input_dim
    value_cols = [f"v{j}" for j in range(d)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        has_label = dataset.task == "classification"
        header = ["id", "t", *value_cols] + (["label"] if has_label else []) + ["split"]
        writer.writerow(header)
        for i, s in enumerate(dataset.samples):
            rows = s.trimmed()
            if dataset.task == "forecasting" and s.label is not None:
                rows = np.concatenate([rows, np.asarray(s.label)], axis=0)
            for t in range(rows.shape[0]):
                # zero-padded ids so the loader's lexicographic grouping
                # preserves sample order
                row = [f"s{i:06d}", t, *[repr(float(v)) for v in rows[t]]]
                if has_label:
                    row.append(s.label)
                row.append(s.split)
                writer.writerow(row)


# -- scaling -------------------------------------------------------------------

def fit_apply_scaling(ds: SeriesDataset) -> SeriesDataset:
    """Z-score every dimension using statistics of the train split only.

    Dimensions with zero variance fall back to std 1. Reapplication is
    idempotent: statistics of already-scaled data are ~(0, 1), and the
    stored scaler composes so the inverse still maps to original units.
    """
    train = ds.train_samples
    if not train:
        raise SchemaError("cannot fit scaling: train split is empty")
    stacked = np.concatenate([s.trimmed() for s in train], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    new = Scaler(mean=mean, std=std)
    for s in ds.samples:
        s.series = new.transform(s.series)
        if ds.task == "forecasting" and s.label is not None:
            s.label = new.transform(s.label)
    ds.scaler = new.compose(ds.scaler) if ds.scaler is not None else new
    return ds


# -- protocol splitting ---------------------------------------------------------

def stock_protocol_split(series: np.ndarray, context: int = 160,
                         horizon: int = 40) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic context/target split of a fixed-length series."""
    series = np.asarray(series, dtype=np.float64)
    if context < 1 or horizon < 1:
        raise ProtocolError(f"context and horizon must be >= 1")
    if series.shape[0] != context + horizon:
        raise ProtocolError(
            f"series has {series.shape[0]} steps, protocol needs "
            f"{context} + {horizon}")
    return series[:context].copy(), series[context:].copy()


# -- synthetic generator ---------------------------------------------------------

@dataclass
class SynthSpec:
    """Hidden-regime series generator: regimes persist for fixed dwell
    durations, transition per a stochastic matrix, and emit Gaussian steps
    around per-regime means. With ``walk=True`` the emitted series is the
    running sum of those steps (a random walk with regime drift)."""

    regime_count: int
    regime_durations: list[int]
    emission_means: list[list[float]]     # (R, D)
    emission_stds: list[list[float]]      # (R, D)
    transition: list[list[float]]         # (R, R), rows sum to 1
    T: int
    D: int
    n_train: int
    n_test: int
    seed: int
    task: str = "classification"
    horizon: int | None = None
    walk: bool = False
    name: str = "synth"

    def __post_init__(self):
        r = self.regime_count
        if len(self.regime_durations) != r or min(self.regime_durations) < 1:
            raise ParseError("need one duration >= 1 per regime")
        means = np.asarray(self.emission_means, dtype=np.float64)
        stds = np.asarray(self.emission_stds, dtype=np.float64)
        trans = np.asarray(self.transition, dtype=np.float64)
        if means.shape != (r, self.D) or stds.shape != (r, self.D):
            raise ParseError(f"emission parameters must be ({r}, {self.D})")
        if trans.shape != (r, r) or not np.allclose(trans.sum(axis=1), 1.0, atol=1e-9):
            raise ParseError("transition matrix rows must sum to 1")
        if np.any(trans < 0):
            raise ParseError("transition probabilities must be nonnegative")
        if self.task == "forecasting" and (self.horizon is None or self.horizon < 1):
            raise ParseError("forecasting spec needs a positive horizon")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SynthSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")


def _regime_path(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    trans = np.asarray(spec.transition)
    regimes = np.empty(spec.T, dtype=np.int64)
    pos = 0
    r = int(rng.integers(spec.regime_count))
    while pos < spec.T:
        dwell = min(spec.regime_durations[r], spec.T - pos)
        regimes[pos : pos + dwell] = r
        pos += dwell
        r = int(rng.choice(spec.regime_count, p=trans[r]))
    return regimes


def generate_synth(spec: SynthSpec) -> tuple[SeriesDataset, np.ndarray]:
    """Generate a dataset plus the (n, T) ground-truth regime matrix.

    Classification labels are the dominant regime by step count (ties go
    to the final step's regime); forecasting labels are the true trailing
    continuation per the context/horizon protocol.
    """
    rng = np.random.default_rng(spec.seed)
    means = np.asarray(spec.emission_means)
    stds = np.asarray(spec.emission_stds)
    n = spec.n_train + spec.n_test
    all_regimes = np.empty((n, spec.T), dtype=np.int64)
    samples = []
    for i in range(n):
        regimes = _regime_path(spec, rng)
        all_regimes[i] = regimes
        steps = means[regimes] + stds[regimes] * rng.standard_normal((spec.T, spec.D))
        series = np.cumsum(steps, axis=0) if spec.walk else steps
        split = "train" if i < spec.n_train else "test"
        if spec.task == "classification":
            counts = np.bincount(regimes, minlength=spec.regime_count)
            top = np.flatnonzero(counts == counts.max())
            label = int(top[0]) if len(top) == 1 else int(regimes[-1])
            samples.append(Sample(series, label, split))
        else:
            context, target = stock_protocol_split(
                series, context=spec.T - spec.horizon, horizon=spec.horizon)
            samples.append(Sample(context, target, split))
    ds = SeriesDataset(samples, name=spec.name, task=spec.task,
                       num_classes=spec.regime_count if spec.task == "classification" else None,
                       horizon=spec.horizon)
    return ds, all_regimes


# -- shipped presets -------------------------------------------------------------

def planted4_spec(seed: int = 0) -> SynthSpec:
    """Two-regime classification dataset with dwell time 4.

    The label is the dominant regime over the series; per-step emissions
    overlap enough that single steps are weak evidence while a dwell-long
    window is decisive, which is the scale a k=4 pyramid matches.
    """
    return SynthSpec(
        regime_count=2,
        regime_durations=[4, 4],
        emission_means=[[0.5, -0.5, 0.25], [-0.5, 0.5, -0.25]],
        emission_stds=[[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]],
        transition=[[0.55, 0.45], [0.45, 0.55]],
        T=32, D=3, n_train=200, n_test=100, seed=seed,
        task="classification", name="planted4",
    )


def stocklike_spec(seed: int = 0) -> SynthSpec:
    """Random-walk-with-regime-drift forecasting preset (160 -> 40)."""
    return SynthSpec(
        regime_count=2,
        regime_durations=[32, 32],
        emission_means=[[0.08], [-0.08]],
        emission_stds=[[0.12], [0.12]],
        transition=[[0.35, 0.65], [0.65, 0.35]],
        T=200, D=1, n_train=400, n_test=100, seed=seed,
        task="forecasting", horizon=40, walk=True, name="stocklike",
    )


SYNTH_PRESETS = {
    "planted4": planted4_spec,
    "stocklike": stocklike_spec,
}
