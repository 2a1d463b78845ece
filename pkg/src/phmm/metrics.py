"""Evaluation metrics and nonparametric significance tests.

Leaderboard aggregates operate on a methods-by-datasets accuracy grid
(missing cells allowed). Ranking supports two tie conventions: "average"
(mid-rank; ties share the mean of the occupied ranks) and "dense" (ties
share the same rank and the next distinct value gets the next integer).
Published leaderboard aggregates for this model family follow the dense
convention, so reports carry both.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps


class MetricError(ValueError):
    """Inputs violate a metric's contract."""


class DegenerateTestError(MetricError):
    """Too little usable data for the requested significance test."""


# -- pointwise metrics ---------------------------------------------------------

def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise MetricError("accuracy needs nonempty equal-length inputs")
    return float(np.mean(preds == labels))


def mpce(error_rates, class_counts) -> float:
    """Mean per-class error: per-dataset error rate over class count,
    averaged across datasets."""
    errors = np.asarray(error_rates, dtype=np.float64)
    counts = np.asarray(class_counts, dtype=np.float64)
    if errors.shape != counts.shape or errors.size == 0:
        raise MetricError("mpce needs matching nonempty inputs")
    if np.any(counts < 2):
        raise MetricError("class counts must be >= 2")
    return float(np.mean(errors / counts))


def mean_abs_dev(values) -> float:
    """Mean absolute deviation about the mean."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise MetricError("mean_abs_dev of empty input")
    return float(np.mean(np.abs(v - v.mean())))


def rmse(pred_series, true_series) -> float:
    p = np.asarray(pred_series, dtype=np.float64)
    t = np.asarray(true_series, dtype=np.float64)
    if p.shape != t.shape:
        raise MetricError(f"rmse shapes differ: {p.shape} vs {t.shape}")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def ratio(value: float, baseline: float) -> float:
    if baseline <= 0:
        raise MetricError("ratio baseline must be positive")
    return value / baseline


# -- results grid ----------------------------------------------------------------

@dataclass
class ResultsMatrix:
    """Accuracy grid: values[d, m] for dataset d and method m; NaN = N/A."""

    methods: list[str]
    datasets: list[str]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.datasets), len(self.methods)):
            raise MetricError(
                f"grid shape {self.values.shape} != "
                f"({len(self.datasets)}, {len(self.methods)})")
        finite = self.values[np.isfinite(self.values)]
        if finite.size and (finite.min() < 0 or finite.max() > 1):
            raise MetricError("accuracy values must lie in [0, 1]")

    def column(self, method: str) -> np.ndarray:
        return self.values[:, self.methods.index(method)]

    @classmethod
    def from_csv(cls, path) -> "ResultsMatrix":
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise MetricError(f"{path}: empty grid") from None
            if len(header) < 2:
                raise MetricError(f"{path}: grid needs a dataset column "
                                  "and at least one method column")
            methods = header[1:]
            datasets, rows = [], []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise MetricError(f"{path} line {lineno}: expected "
                                      f"{len(header)} cells, got {len(row)}")
                datasets.append(row[0])
                vals = []
                for cell in row[1:]:
                    cell = cell.strip()
                    if cell in ("", "N/A", "NA", "nan"):
                        vals.append(np.nan)
                    else:
                        try:
                            vals.append(float(cell))
                        except ValueError:
                            raise MetricError(
                                f"{path} line {lineno}: bad cell {cell!r}") from None
                rows.append(vals)
        if not rows:
            raise MetricError(f"{path}: grid has no data rows")
        return cls(methods, datasets, np.array(rows))

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["dataset", *self.methods])
            for d, name in enumerate(self.datasets):
                cells = ["N/A" if not np.isfinite(v) else repr(float(v))
                         for v in self.values[d]]
                writer.writerow([name, *cells])


def _rank_row(vals: np.ndarray, tie_method: str) -> np.ndarray:
    """Rank one dataset's accuracies, higher = better; N/A ranked last."""
    n = len(vals)
    out = np.empty(n)
    valid = np.isfinite(vals)
    if not valid.any():
        raise MetricError("dataset row is entirely N/A")
    if tie_method == "average":
        out[valid] = sps.rankdata(-vals[valid], method="average")
        k = int(valid.sum())
        # all N/A cells share the mean of the unoccupied trailing ranks
        out[~valid] = (k + 1 + n) / 2.0
    elif tie_method == "dense":
        out[valid] = sps.rankdata(-vals[valid], method="dense")
        out[~valid] = (out[valid].max() if valid.any() else 0) + 1
    else:
        raise MetricError(f"unknown tie_method {tie_method!r}")
    return out


def average_rank(results: ResultsMatrix, tie_method: str = "average") -> dict[str, float]:
    """Mean rank per method across datasets (rank 1 = best accuracy)."""
    if len(results.methods) < 2:
        raise MetricError("ranking needs at least two methods")
    ranks = np.stack([_rank_row(row, tie_method) for row in results.values])
    means = ranks.mean(axis=0)
    return {m: float(v) for m, v in zip(results.methods, means)}


def wins_ties(results: ResultsMatrix) -> dict[str, int]:
    """Datasets on which each method attains the (possibly shared) best value."""
    counts = dict.fromkeys(results.methods, 0)
    for row in results.values:
        if not np.isfinite(row).any():
            raise MetricError("dataset row is entirely N/A")
        best = np.nanmax(row)
        for j, m in enumerate(results.methods):
            if np.isfinite(row[j]) and row[j] == best:
                counts[m] += 1
    return counts


# -- significance tests ------------------------------------------------------------

def friedman_test(results: ResultsMatrix) -> tuple[float, float]:
    """Friedman chi-square over within-dataset ranks, with ties correction.

    Requires a complete grid (no N/A), >= 3 methods and >= 2 datasets.
    The p-value comes from the chi-square distribution with
    (methods - 1) degrees of freedom.
    """
    vals = results.values
    if np.any(~np.isfinite(vals)):
        raise DegenerateTestError("friedman test needs a complete grid")
    n, k = vals.shape
    if k < 3 or n < 2:
        raise DegenerateTestError(f"friedman test needs >=3 methods and >=2 "
                                  f"datasets, got {k} and {n}")
    ranks = np.stack([sps.rankdata(-row, method="average") for row in vals])
    rank_sums = ranks.sum(axis=0)
    chisq = 12.0 / (n * k * (k + 1)) * float((rank_sums ** 2).sum()) - 3.0 * n * (k + 1)
    tie_term = 0.0
    for row in vals:
        _, counts = np.unique(row, return_counts=True)
        tie_term += float((counts ** 3 - counts).sum())
    correction = 1.0 - tie_term / (n * k * (k * k - 1))
    if correction <= 0:
        return 0.0, 1.0  # every dataset fully tied: no evidence of differences
    chisq /= correction
    p = float(sps.chi2.sf(chisq, k - 1))
    return float(chisq), p


def _exact_signed_rank_p(ranks: np.ndarray, w: float) -> float:
    """Two-sided exact p-value P(W <= w) * 2 under the signed-rank null.

    Enumerates the distribution of the positive-rank sum by dynamic
    programming; mid-ranks (multiples of 1/2) are doubled to land on an
    integer lattice.
    """
    doubled = np.round(ranks * 2).astype(np.int64)
    total = int(doubled.sum())
    dist = np.zeros(total + 1)
    dist[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[: total + 1 - r]
        dist = dist + shifted
    dist /= dist.sum()
    w2 = int(np.floor(round(2 * w, 6)))
    p = 2.0 * float(dist[: w2 + 1].sum())
    return min(1.0, p)


def wilcoxon_signed_rank(a, b, exact_threshold: int = 25) -> tuple[float, float]:
    """Paired signed-rank test; returns (statistic, two-sided p).

    Zero differences are dropped (>= 6 nonzero pairs required); tied
    absolute differences share mid-ranks. The statistic is
    min(W+, W-); the p-value uses the exact distribution up to
    ``exact_threshold`` pairs and a normal approximation with continuity
    and tie corrections beyond it.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricError("wilcoxon needs two equal-length vectors")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n < 6:
        raise DegenerateTestError(
            f"wilcoxon needs >= 6 nonzero differences, got {n}")
    ranks = sps.rankdata(np.abs(d), method="average")
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= exact_threshold:
        p = _exact_signed_rank_p(ranks, w)
    else:
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        _, counts = np.unique(np.abs(d), return_counts=True)
        var -= float((counts ** 3 - counts).sum()) / 48.0
        z = (w - mean + 0.5) / np.sqrt(var)
        p = min(1.0, 2.0 * float(sps.norm.cdf(z)))
    return w, p


# -- aggregate report -----------------------------------------------------------------

@dataclass
class MetricReport:
    """Everything one evaluation or stats run produces; unused fields stay None."""

    accuracy: float | None = None
    mpce: float | None = None
    rmse: float | None = None
    ratio: float | None = None
    avg_rank: dict | None = None
    avg_rank_dense: dict | None = None
    wins_ties: dict | None = None
    friedman: tuple | None = None
    wilcoxon_p: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "mpce": self.mpce,
            "rmse": self.rmse,
            "ratio": self.ratio,
            "avg_rank": self.avg_rank,
            "avg_rank_dense": self.avg_rank_dense,
            "wins_ties": self.wins_ties,
            "friedman": list(self.friedman) if self.friedman else None,
            "wilcoxon_p": self.wilcoxon_p,
        }


def leaderboard_report(results: ResultsMatrix, focus: str | None = None) -> MetricReport:
    """Rank aggregates plus significance tests for a results grid.

    Pairwise Wilcoxon tests compare ``focus`` (default: last method column)
    against every other method over the datasets both completed; degenerate
    pairs are reported as None.
    """
    focus = focus if focus is not None else results.methods[-1]
    if focus not in results.methods:
        raise MetricError(f"unknown focus method {focus!r}")
    report = MetricReport(
        avg_rank=average_rank(results, "average"),
        avg_rank_dense=average_rank(results, "dense"),
        wins_ties=wins_ties(results),
    )
    complete = ~np.any(~np.isfinite(results.values), axis=1)
    if complete.sum() >= 2 and len(results.methods) >= 3:
        sub = ResultsMatrix(results.methods,
                            [d for d, ok in zip(results.datasets, complete) if ok],
                            results.values[complete])
        report.friedman = friedman_test(sub)
    focus_col = results.column(focus)
    for m in results.methods:
        if m == focus:
            continue
        other = results.column(m)
        both = np.isfinite(focus_col) & np.isfinite(other)
        try:
            _, p = wilcoxon_signed_rank(focus_col[both], other[both])
            report.wilcoxon_p[m] = p
        except DegenerateTestError:
            report.wilcoxon_p[m] = None
    return report
