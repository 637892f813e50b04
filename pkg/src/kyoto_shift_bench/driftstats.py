"""Distribution-shift statistics between years.

Two views of drift: Jeffreys divergence between smoothed per-feature
histograms, and a debiased Sinkhorn divergence between class-conditioned
point clouds (standardized one-hot encodings). ``pca_project`` gives 2-D
coordinates for looking at the same clouds.
"""

import csv
import io
import logging
import math
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from kyoto_shift_bench.errors import (
    DegenerateCovariance,
    EmptyClassSubset,
    EmptyInput,
    NoConvergence,
    SupportMismatch,
)
from kyoto_shift_bench.schema import FEATURE_NAMES
from kyoto_shift_bench.tokenize import Vocabulary
from kyoto_shift_bench.utils import atomic_write, parallel_map, write_json_artifact

logger = logging.getLogger(__name__)

DEFAULT_SMOOTHING = 1e-6
MAX_POINTS = 10_000
_ANNEAL_FACTOR = 0.5
_ANNEAL_ITERS = 10
_CLASS_CODES = {"inlier": 0, "outlier": 1}


@dataclass(frozen=True)
class Histogram:
    """Smoothed distribution of one feature over a shared token support."""

    feature: str
    support: tuple[int, ...]
    counts: np.ndarray
    probabilities: np.ndarray
    epsilon: float

    @classmethod
    def from_counts(
        cls,
        counts: Sequence[float],
        support: Sequence[int],
        feature: str = "",
        epsilon: float = DEFAULT_SMOOTHING,
    ) -> "Histogram":
        counts = np.asarray(counts, dtype=np.float64)
        if counts.ndim != 1 or len(counts) != len(support):
            raise ValueError("counts must be one value per support element")
        if epsilon <= 0:
            raise ValueError("smoothing epsilon must be positive")
        total = counts.sum()
        if total <= 0:
            raise EmptyInput(f"histogram of {feature or 'feature'} has no mass")
        p = counts / total
        p = (p + epsilon) / (1.0 + epsilon * len(p))
        return cls(feature, tuple(int(s) for s in support), counts, p, epsilon)

    @classmethod
    def from_tokens(
        cls,
        tokens: np.ndarray,
        feature: str,
        vocab: Vocabulary,
        epsilon: float = DEFAULT_SMOOTHING,
    ) -> "Histogram":
        """Histogram of one column of a token matrix over the feature's full token space."""
        position = FEATURE_NAMES.index(feature)
        support = vocab.position_ids(position)
        column = np.asarray(tokens, dtype=np.int64)
        if column.ndim == 2:
            column = column[:, position]
        slot = {int(tok): k for k, tok in enumerate(support)}
        counts = np.zeros(len(support))
        for tok, n in zip(*np.unique(column, return_counts=True)):
            # unknown categoricals have no slot in the shared support
            k = slot.get(int(tok))
            if k is not None:
                counts[k] += n
        return cls.from_counts(counts, support, feature, epsilon)


def jeffreys(p: Histogram, q: Histogram) -> float:
    """KL(p, q) + KL(q, p) = sum((p - q) * log(p / q))."""
    if p.support != q.support:
        raise SupportMismatch(
            f"histograms of {p.feature!r} and {q.feature!r} have different supports"
        )
    a, b = p.probabilities, q.probabilities
    return float(np.sum((a - b) * (np.log(a) - np.log(b))))


@dataclass(frozen=True)
class DistanceMatrix:
    years: tuple[int, ...]
    values: np.ndarray
    metric: str
    conditioning: Optional[tuple[str, str]] = None
    meta: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["year", *self.years])
        for year, row in zip(self.years, self.values):
            writer.writerow([year, *(repr(float(v)) for v in row)])
        return buf.getvalue()

    def sidecar(self) -> dict:
        return {
            "metric": self.metric,
            "conditioning": list(self.conditioning) if self.conditioning else None,
            "years": list(self.years),
            "values": self.values.tolist(),
            **self.meta,
        }


def feature_histograms(
    tokens_by_year: Mapping[int, np.ndarray],
    feature: str,
    vocab: Vocabulary,
    epsilon: float = DEFAULT_SMOOTHING,
) -> dict[int, Histogram]:
    return {
        year: Histogram.from_tokens(tokens, feature, vocab, epsilon)
        for year, tokens in sorted(tokens_by_year.items())
    }


def divergence_matrix(
    tokens_by_year: Mapping[int, np.ndarray],
    feature: str,
    vocab: Vocabulary,
    epsilon: float = DEFAULT_SMOOTHING,
    threads: int = 1,
) -> DistanceMatrix:
    if len(tokens_by_year) < 2:
        raise EmptyInput("a divergence matrix needs at least two years")
    hists = feature_histograms(tokens_by_year, feature, vocab, epsilon)
    years = tuple(hists)
    pairs = [(i, j) for i in range(len(years)) for j in range(i + 1, len(years))]
    cells = parallel_map(
        lambda ij: jeffreys(hists[years[ij[0]]], hists[years[ij[1]]]), pairs, threads
    )
    values = np.zeros((len(years), len(years)))
    for (i, j), v in zip(pairs, cells):
        values[i, j] = values[j, i] = v
    return DistanceMatrix(
        years, values, "jeffreys", meta={"feature": feature, "smoothing": epsilon}
    )


@dataclass(frozen=True)
class SinkhornResult:
    value: float
    converged: bool
    marginal_error: float
    n_iters: int


def _anneal_schedule(cost_scale: float, epsilon: float) -> list[float]:
    schedule = []
    eps = max(cost_scale, epsilon)
    while eps > epsilon:
        schedule.append(eps)
        eps *= _ANNEAL_FACTOR
    return schedule


def _entropic_ot(
    cost: np.ndarray, epsilon: float, max_iters: int, tol: float
) -> SinkhornResult:
    """Log-domain Sinkhorn between uniform weights; returns the dual value."""
    n, m = cost.shape
    log_a = np.full(n, -math.log(n))
    log_b = np.full(m, -math.log(m))
    f, g = np.zeros(n), np.zeros(m)

    def update(eps: float) -> tuple[np.ndarray, np.ndarray]:
        f_new = -eps * logsumexp(log_b[None, :] + (g[None, :] - cost) / eps, axis=1)
        g_new = -eps * logsumexp(log_a[:, None] + (f_new[:, None] - cost) / eps, axis=0)
        return f_new, g_new

    # warm start from coarse regularisation down to epsilon
    for eps in _anneal_schedule(float(cost.max(initial=0.0)), epsilon):
        for _ in range(_ANNEAL_ITERS):
            f, g = update(eps)

    error = math.inf
    n_iters = 0
    while n_iters < max_iters:
        f, g = update(epsilon)
        n_iters += 1
        # columns match exactly after the g step; the rows carry the error
        log_plan = log_a[:, None] + log_b[None, :] + (f[:, None] + g[None, :] - cost) / epsilon
        error = float(np.abs(np.exp(logsumexp(log_plan, axis=1)) - np.exp(log_a)).sum())
        if error < tol:
            break
    value = float(np.exp(log_a) @ f + np.exp(log_b) @ g)
    return SinkhornResult(value, error < tol, error, n_iters)


def _as_points(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or len(x) == 0:
        raise EmptyInput(f"{name} must be a non-empty 2-D point set")
    if len(x) > MAX_POINTS:
        raise ValueError(f"{name} has {len(x)} points; at most {MAX_POINTS} are supported")
    return x


def sinkhorn_divergence(
    X: np.ndarray,
    Y: np.ndarray,
    epsilon: float = 0.05,
    max_iters: int = 1000,
    tol: float = 1e-6,
) -> SinkhornResult:
    """Debiased S(X, Y) = OT(X, Y) - OT(X, X) / 2 - OT(Y, Y) / 2, squared-Euclidean cost."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    X, Y = _as_points(X, "X"), _as_points(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    xy = _entropic_ot(cdist(X, Y, "sqeuclidean"), epsilon, max_iters, tol)
    xx = _entropic_ot(cdist(X, X, "sqeuclidean"), epsilon, max_iters, tol)
    yy = _entropic_ot(cdist(Y, Y, "sqeuclidean"), epsilon, max_iters, tol)
    parts = (xy, xx, yy)
    result = SinkhornResult(
        value=xy.value - 0.5 * xx.value - 0.5 * yy.value,
        converged=all(p.converged for p in parts),
        marginal_error=max(p.marginal_error for p in parts),
        n_iters=max(p.n_iters for p in parts),
    )
    if not result.converged:
        warnings.warn(
            f"Sinkhorn stopped after {max_iters} iterations with marginal error "
            f"{result.marginal_error:.3g} (tol {tol:g})",
            NoConvergence,
            stacklevel=2,
        )
    return result


@dataclass(frozen=True)
class LabelledPoints:
    """One year's encoded points and their anomaly flags."""

    points: np.ndarray
    is_anomaly: np.ndarray

    def of_class(self, name: str) -> np.ndarray:
        mask = np.asarray(self.is_anomaly, dtype=bool)
        return self.points[mask if name == "outlier" else ~mask]


def _subsample(
    points: np.ndarray, size: int, seed: int, repeat: int, year: int, cls: str
) -> np.ndarray:
    if len(points) <= size:
        return points
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, repeat, year, _CLASS_CODES[cls]])
    )
    return points[np.sort(rng.choice(len(points), size=size, replace=False))]


def dataset_distance_report(
    points_by_year: Mapping[int, LabelledPoints],
    class_pair: tuple[str, str] = ("inlier", "inlier"),
    sample_size: int = 5000,
    repeats: int = 3,
    seed: int = 0,
    epsilon: float = 0.05,
    max_iters: int = 1000,
    tol: float = 1e-6,
    threads: int = 1,
) -> DistanceMatrix:
    """Mean debiased Sinkhorn over seeded subsamples.

    Cell ``(i, j)`` compares ``class_pair[0]`` of year i against
    ``class_pair[1]`` of year j; same-class matrices are mirrored.
    """
    if sample_size > MAX_POINTS:
        raise ValueError(f"sample_size must be at most {MAX_POINTS}")
    years = tuple(sorted(points_by_year))
    row_cls, col_cls = class_pair
    for year in years:
        for cls in {row_cls, col_cls}:
            if len(points_by_year[year].of_class(cls)) == 0:
                raise EmptyClassSubset(f"year {year} has no {cls} points")

    def sample(repeat: int, year: int, cls: str) -> np.ndarray:
        points = points_by_year[year].of_class(cls)
        return _subsample(points, sample_size, seed, repeat, year, cls)

    symmetric = row_cls == col_cls
    n = len(years)
    cells = [
        (r, i, j)
        for r in range(repeats)
        for i in range(n)
        for j in range(n)
        if not symmetric or j > i
    ]

    def run(cell: tuple[int, int, int]) -> SinkhornResult:
        r, i, j = cell
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NoConvergence)
            return sinkhorn_divergence(
                sample(r, years[i], row_cls),
                sample(r, years[j], col_cls),
                epsilon,
                max_iters,
                tol,
            )

    results = parallel_map(run, cells, threads)
    values = np.zeros((n, n))
    converged = np.ones((n, n), dtype=bool)
    worst = 0.0
    for (r, i, j), res in zip(cells, results):
        values[i, j] += res.value / repeats
        converged[i, j] &= res.converged
        worst = max(worst, res.marginal_error)
        if symmetric:
            values[j, i] = values[i, j]
            converged[j, i] = converged[i, j]
    if not converged.all():
        warnings.warn(
            f"{int((~converged).sum())} Sinkhorn cells did not converge "
            f"(worst marginal error {worst:.3g})",
            NoConvergence,
            stacklevel=2,
        )
    return DistanceMatrix(
        years,
        values,
        "sinkhorn",
        conditioning=(row_cls, col_cls),
        meta={
            "epsilon": epsilon,
            "seed": seed,
            "repeats": repeats,
            "sample_size": sample_size,
            "converged": converged.tolist(),
            "max_marginal_error": worst,
        },
    )


@dataclass(frozen=True)
class PcaResult:
    coordinates: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    mean: np.ndarray
    total_variance: float

    @property
    def explained_ratio(self) -> np.ndarray:
        if self.total_variance <= 0:
            return np.zeros_like(self.explained_variance)
        return self.explained_variance / self.total_variance


def pca_project(
    X: np.ndarray, k: int = 2, max_iters: int = 10_000, tol: float = 1e-13
) -> PcaResult:
    """Top-k principal directions by power iteration with deflation."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) < k + 1:
        raise EmptyInput(f"PCA to {k} components needs at least {k + 1} points")
    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / (len(X) - 1)
    total = float(np.trace(cov))
    floor = 1e-12 * max(total, 1e-300)

    components, variances = [], []
    deflated = cov.copy()
    for c in range(k):
        # the largest column lies in the dominant subspace
        start = deflated[:, int(np.argmax(np.linalg.norm(deflated, axis=0)))]
        norm = np.linalg.norm(start)
        if norm <= floor:
            warnings.warn(
                f"covariance has rank {c}; returning {c} of {k} components",
                DegenerateCovariance,
                stacklevel=2,
            )
            break
        v = start / norm
        for _ in range(max_iters):
            w = deflated @ v
            w_norm = np.linalg.norm(w)
            if w_norm == 0:
                break
            w /= w_norm
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        lam = float(v @ cov @ v)
        if lam <= floor:
            warnings.warn(
                f"covariance has rank {c}; returning {c} of {k} components",
                DegenerateCovariance,
                stacklevel=2,
            )
            break
        if v[int(np.argmax(np.abs(v)))] < 0:
            v = -v
        components.append(v)
        variances.append(lam)
        deflated = deflated - lam * np.outer(v, v)

    comps = np.array(components).reshape(len(components), X.shape[1])
    return PcaResult(
        coordinates=centered @ comps.T,
        components=comps,
        explained_variance=np.array(variances),
        mean=mean,
        total_variance=total,
    )


def write_distance_matrix(
    matrix: DistanceMatrix,
    path: Union[str, Path],
    run_config: BaseModel,
    seed: int,
) -> tuple[Path, Path]:
    """Writes ``<path>.csv`` plus a ``<path>.json`` sidecar."""
    path = Path(path)
    csv_path = atomic_write(path.with_suffix(".csv"), matrix.to_csv())
    json_path = write_json_artifact(
        path.with_suffix(".json"), "distance_matrix", run_config, seed, matrix.sidecar()
    )
    return csv_path, json_path


def write_projection_csv(
    result: PcaResult,
    years: Sequence[int],
    is_anomaly: Sequence[bool],
    path: Union[str, Path],
) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    k = result.components.shape[0]
    writer.writerow(["year", "label", *(f"pc{c + 1}" for c in range(k))])
    for year, anomalous, row in zip(years, is_anomaly, result.coordinates):
        label = "outlier" if anomalous else "inlier"
        writer.writerow([year, label, *(repr(float(v)) for v in row)])
    return atomic_write(path, buf.getvalue())
