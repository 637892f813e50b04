"""ROC-AUC / PR-AUC metrics and the per-split benchmark report."""

import csv
import io
import logging
from collections import defaultdict
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import TYPE_CHECKING, List, Literal, Optional, Protocol, Union

import numpy as np
from pydantic import BaseModel
from scipy.stats import rankdata

from kyoto_shift_bench.errors import SingleClass
from kyoto_shift_bench.schema import RawRecord
from kyoto_shift_bench.utils import atomic_write, parallel_map

if TYPE_CHECKING:
    from kyoto_shift_bench.protocol import BenchmarkSplits

logger = logging.getLogger(__name__)

AGGREGATION_NOTE = "split value = unweighted mean over its years, then mean/std over seeds"


def _check_inputs(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{len(scores)} scores for {len(labels)} labels")
    return scores, labels


def roc_auc(scores, labels) -> float:
    """P(anomaly outscores normal) + P(tie) / 2, from average ranks.

    ``labels`` are truthy for anomalies.
    """
    scores, labels = _check_inputs(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("ROC-AUC needs both anomalies and normals")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(
    scores, labels, positive: Literal["inlier", "outlier"] = "outlier"
) -> float:
    """Average precision with every distinct score as a threshold.

    For ``positive="inlier"`` the scores are negated, so lower anomaly scores
    rank first.
    """
    scores, labels = _check_inputs(scores, labels)
    if positive == "inlier":
        scores, labels = -scores, ~labels
    elif positive != "outlier":
        raise ValueError(f"positive must be 'inlier' or 'outlier', got {positive!r}")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise SingleClass(f"PR-AUC needs at least one {positive}")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # last index of every run of equal scores
    cut = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[cut]
    fp = (cut + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


class RecordScorer(Protocol):
    def score_records(self, records: Sequence[RawRecord]) -> np.ndarray: ...


class MetricRow(BaseModel):
    detector: str
    split: str
    year: int
    seed: int
    roc_auc: Optional[float]
    pr_auc_in: Optional[float]
    pr_auc_out: Optional[float]
    n_in: int
    n_out: int


class SplitAggregate(BaseModel):
    detector: str
    split: str
    years: List[int]
    n_seeds: int
    roc_auc_mean: float
    roc_auc_std: float
    pr_auc_in_mean: float
    pr_auc_in_std: float
    pr_auc_out_mean: float
    pr_auc_out_std: float


class MonthRow(BaseModel):
    detector: str
    year_month: str
    n_in: int
    n_out: int
    roc_auc: Optional[float] = None
    pr_auc_in: Optional[float] = None
    pr_auc_out: Optional[float] = None


class EvalReport(BaseModel):
    seeds: List[int]
    config_hash: Optional[str] = None
    aggregation: str = AGGREGATION_NOTE
    rows: List[MetricRow]
    aggregates: List[SplitAggregate]
    months: List[MonthRow] = []

    def aggregate(self, detector: str, split: str) -> SplitAggregate:
        for agg in self.aggregates:
            if agg.detector == detector and agg.split == split:
                return agg
        raise KeyError((detector, split))

    def to_text(self) -> str:
        """Aligned table of split aggregates, one line per (detector, split)."""
        if not self.aggregates:
            return "No results.\n"
        width = max(len("Detector"), *(len(a.detector) for a in self.aggregates))
        header = ("Detector", "Split", "ROC-AUC", "PR-AUC in", "PR-AUC out")
        lines = [
            f"{header[0]:<{width}}  {header[1]:<5}  {header[2]:<15}  "
            f"{header[3]:<15}  {header[4]:<15}",
            f"{'=' * width}  {'=' * 5}  {'=' * 15}  {'=' * 15}  {'=' * 15}",
        ]
        for a in self.aggregates:
            cells = [
                f"{100 * m:6.2f} ± {100 * s:5.2f}"
                for m, s in (
                    (a.roc_auc_mean, a.roc_auc_std),
                    (a.pr_auc_in_mean, a.pr_auc_in_std),
                    (a.pr_auc_out_mean, a.pr_auc_out_std),
                )
            ]
            lines.append(
                f"{a.detector:<{width}}  {a.split.upper():<5}  "
                + "  ".join(f"{c:<15}" for c in cells)
            )
        lines.append(f"({len(self.seeds)} seeds; {self.aggregation})")
        return "\n".join(lines) + "\n"


def metric_triplet(
    scores, labels
) -> tuple[Optional[float], Optional[float], Optional[float]]:
    """(roc_auc, pr_auc_in, pr_auc_out), all None when a class is missing."""
    labels = np.asarray(labels, dtype=bool)
    if labels.all() or not labels.any():
        return None, None, None
    return (
        roc_auc(scores, labels),
        pr_auc(scores, labels, "inlier"),
        pr_auc(scores, labels, "outlier"),
    )


def _labels_of(records: Sequence[RawRecord]) -> np.ndarray:
    return np.array([r.label.is_anomaly for r in records], dtype=bool)


def aggregate_rows(rows: Sequence[MetricRow]) -> list[SplitAggregate]:
    """Per seed: mean over the split's years. Across seeds: mean and population std."""
    per_seed: dict[tuple[str, str], dict[int, list[MetricRow]]] = defaultdict(
        lambda: defaultdict(list)
    )
    for row in rows:
        per_seed[(row.detector, row.split)][row.seed].append(row)
    aggregates = []
    for (detector, split), by_seed in per_seed.items():
        means = {
            metric: np.array([
                np.mean([getattr(r, metric) for r in seed_rows])
                for seed_rows in by_seed.values()
            ])
            for metric in ("roc_auc", "pr_auc_in", "pr_auc_out")
        }
        years = sorted({r.year for seed_rows in by_seed.values() for r in seed_rows})
        aggregates.append(SplitAggregate(
            detector=detector,
            split=split,
            years=years,
            n_seeds=len(by_seed),
            roc_auc_mean=float(means["roc_auc"].mean()),
            roc_auc_std=float(means["roc_auc"].std()),
            pr_auc_in_mean=float(means["pr_auc_in"].mean()),
            pr_auc_in_std=float(means["pr_auc_in"].std()),
            pr_auc_out_mean=float(means["pr_auc_out"].mean()),
            pr_auc_out_std=float(means["pr_auc_out"].std()),
        ))
    return aggregates


def evaluate_benchmark(
    scorers: Mapping[str, Mapping[int, RecordScorer]],
    splits: "BenchmarkSplits",
    threads: int = 1,
    config_hash: Optional[str] = None,
) -> EvalReport:
    """Scores every test year with every fitted (detector, seed) scorer.

    ``scorers`` maps detector name to ``{seed: scorer fitted on TRAIN}``.
    """
    cells = [
        (name, seed, scorer, split, ys)
        for name, by_seed in scorers.items()
        for seed, scorer in sorted(by_seed.items())
        for split, ys in splits.test_sets()
    ]

    def run(cell) -> MetricRow:
        name, seed, scorer, split, ys = cell
        labels = _labels_of(ys.records)
        scores = scorer.score_records(ys.records)
        roc, pr_in, pr_out = metric_triplet(scores, labels)
        if roc is None:
            raise SingleClass(f"{split.upper()} {ys.year} holds a single class")
        logger.debug("%s seed %d %s %d: ROC-AUC %.4f", name, seed, split, ys.year, roc)
        return MetricRow(
            detector=name, split=split, year=ys.year, seed=seed, roc_auc=roc,
            pr_auc_in=pr_in, pr_auc_out=pr_out,
            n_in=int((~labels).sum()), n_out=int(labels.sum()),
        )

    rows = parallel_map(run, cells, threads)
    seeds = sorted({seed for by_seed in scorers.values() for seed in by_seed})
    return EvalReport(
        seeds=seeds,
        config_hash=config_hash,
        rows=rows,
        aggregates=aggregate_rows(rows),
    )


def monthly_breakdown(
    scorer: RecordScorer, records: Sequence[RawRecord], detector: str = "detector"
) -> list[MonthRow]:
    """One row per calendar month; single-class months keep null metrics."""
    if not records:
        return []
    scores = np.asarray(scorer.score_records(records), dtype=np.float64)
    labels = _labels_of(records)
    groups: dict = defaultdict(list)
    for i, r in enumerate(records):
        groups[r.year_month].append(i)
    rows = []
    for ym in sorted(groups):
        idx = np.array(groups[ym])
        roc, pr_in, pr_out = metric_triplet(scores[idx], labels[idx])
        rows.append(MonthRow(
            detector=detector,
            year_month=str(ym),
            n_in=int((~labels[idx]).sum()),
            n_out=int(labels[idx].sum()),
            roc_auc=roc,
            pr_auc_in=pr_in,
            pr_auc_out=pr_out,
        ))
    return rows


def write_monthly_csv(rows: Sequence[MonthRow], path: Union[str, Path]) -> Path:
    buf = io.StringIO()
    fields = list(MonthRow.model_fields)
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        # undefined metrics stay empty cells
        writer.writerow({k: "" if v is None else v for k, v in row.model_dump().items()})
    return atomic_write(path, buf.getvalue())
