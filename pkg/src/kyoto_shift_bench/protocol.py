"""Chronological TRAIN / IID / NEAR / FAR splits with per-month quotas.

Per year, ``months_present x quota`` normals are drawn without replacement and
anomalies are added so the year's source anomaly:normal proportion survives.
TRAIN and IID draw disjoint normals from the same years.
"""

import logging
import math
from collections import defaultdict
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel

from kyoto_shift_bench.config import SchemaDescriptor, SplitConfig
from kyoto_shift_bench.errors import InsufficientAnomalySupply, NoRecordsForYear
from kyoto_shift_bench.ingest import read_dataset, relabel, write_dataset
from kyoto_shift_bench.schema import RawRecord
from kyoto_shift_bench.utils import read_json_artifact, write_json_artifact

logger = logging.getLogger(__name__)

TEST_SPLITS = ("iid", "near", "far")
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class YearSet:
    year: int
    records: tuple[RawRecord, ...]
    # positions in the source corpus; empty once reloaded from disk
    indices: tuple[int, ...] = ()

    @property
    def n_anomaly(self) -> int:
        return sum(r.label.is_anomaly for r in self.records)

    @property
    def n_normal(self) -> int:
        return len(self.records) - self.n_anomaly


@dataclass(frozen=True)
class SplitProvenance:
    split: str
    year: int
    months: int
    normal_quota: int
    n_normal: int
    n_anomaly: int
    source_anomaly_ratio: float
    realized_anomaly_ratio: float
    shrunk: bool = False


@dataclass(frozen=True)
class Injection:
    """A TRAIN slot holding an anomaly relabelled as normal."""

    position: int
    source_index: int
    true_label_code: int


@dataclass(frozen=True)
class BenchmarkSplits:
    config: SplitConfig
    train: tuple[YearSet, ...]
    iid: tuple[YearSet, ...]
    near: tuple[YearSet, ...]
    far: tuple[YearSet, ...]
    provenance: tuple[SplitProvenance, ...] = ()
    injected: tuple[Injection, ...] = ()
    # anomalies of TRAIN years left unused by IID; in memory only
    anomaly_pool: tuple[tuple[int, RawRecord], ...] = field(default=(), repr=False)

    @property
    def train_records(self) -> list[RawRecord]:
        return [r for ys in self.train for r in ys.records]

    @property
    def train_indices(self) -> list[int]:
        return [i for ys in self.train for i in ys.indices]

    def test_sets(self) -> list[tuple[str, YearSet]]:
        return [(name, ys) for name in TEST_SPLITS for ys in getattr(self, name)]


@dataclass
class _YearSupply:
    normals: list[int] = field(default_factory=list)
    anomalies: list[int] = field(default_factory=list)
    months: set = field(default_factory=set)

    @property
    def source_ratio(self) -> float:
        total = len(self.normals) + len(self.anomalies)
        return len(self.anomalies) / total if total else 0.0


def _year_rng(seed: int, year: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, year, stream]))


def _anomalies_matching(n_normals: int, supply: _YearSupply) -> int:
    if not supply.normals:
        return 0
    return int(round(n_normals * len(supply.anomalies) / len(supply.normals)))


def _draw(
    pool: Sequence[int], n: int, rng: np.random.Generator, year: int, what: str
) -> list[int]:
    if n > len(pool):
        logger.warning(
            "Year %d: wanted %d %s but only %d exist; taking all", year, n, what, len(pool)
        )
        n = len(pool)
    picked = rng.choice(np.asarray(pool, dtype=np.int64), size=n, replace=False)
    return sorted(int(i) for i in picked)


def _year_set(year: int, idx: list[int], records: Sequence[RawRecord]) -> YearSet:
    return YearSet(year=year, records=tuple(records[i] for i in idx), indices=tuple(idx))


def _provenance(
    split: str, ys: YearSet, months: int, quota: int, supply: _YearSupply, shrunk: bool
) -> SplitProvenance:
    n = len(ys.records)
    return SplitProvenance(
        split=split,
        year=ys.year,
        months=months,
        normal_quota=quota,
        n_normal=ys.n_normal,
        n_anomaly=ys.n_anomaly,
        source_anomaly_ratio=supply.source_ratio,
        realized_anomaly_ratio=ys.n_anomaly / n if n else 0.0,
        shrunk=shrunk,
    )


def plan_splits(records: Sequence[RawRecord], config: SplitConfig) -> BenchmarkSplits:
    supply: dict[int, _YearSupply] = defaultdict(_YearSupply)
    for i, r in enumerate(records):
        s = supply[r.year]
        (s.anomalies if r.label.is_anomaly else s.normals).append(i)
        s.months.add(r.timestamp.month)
    for year in config.all_years:
        if year not in supply:
            raise NoRecordsForYear(year)

    train, iid, provenance = [], [], []
    pool: list[tuple[int, RawRecord]] = []
    for year in config.train_years:
        s = supply[year]
        months = len(s.months)
        q_train = months * config.normals_per_month_train
        q_iid = months * config.normals_per_month_iid
        n_train, n_iid = q_train, q_iid
        shrunk = len(s.normals) < q_train + q_iid
        if shrunk:
            n_train = (len(s.normals) * q_train) // (q_train + q_iid)
            n_iid = min(q_iid, len(s.normals) - n_train)
            logger.warning(
                "Year %d: %d normals cannot cover quotas %d + %d; shrinking to %d + %d",
                year, len(s.normals), q_train, q_iid, n_train, n_iid,
            )
        rng = _year_rng(config.seed, year)
        perm = [int(i) for i in rng.permutation(np.asarray(s.normals, dtype=np.int64))]
        train_idx = sorted(perm[:n_train])
        iid_normals = perm[n_train:n_train + n_iid]
        iid_anoms = _draw(s.anomalies, _anomalies_matching(n_iid, s), rng, year, "anomalies")
        used = set(iid_anoms)
        pool.extend((i, records[i]) for i in s.anomalies if i not in used)

        train_set = _year_set(year, train_idx, records)
        iid_set = _year_set(year, sorted(iid_normals + iid_anoms), records)
        train.append(train_set)
        iid.append(iid_set)
        provenance.append(_provenance("train", train_set, months, q_train, s, shrunk))
        provenance.append(_provenance("iid", iid_set, months, q_iid, s, shrunk))

    tests: dict[str, list[YearSet]] = {"near": [], "far": []}
    for split, years in (("near", config.near_years), ("far", config.far_years)):
        for year in years:
            s = supply[year]
            months = len(s.months)
            quota = months * config.normals_per_month_train
            rng = _year_rng(config.seed, year)
            normals = _draw(s.normals, quota, rng, year, "normals")
            anoms = _draw(s.anomalies, _anomalies_matching(len(normals), s), rng, year,
                          "anomalies")
            ys = _year_set(year, sorted(normals + anoms), records)
            tests[split].append(ys)
            provenance.append(
                _provenance(split, ys, months, quota, s, len(s.normals) < quota)
            )

    splits = BenchmarkSplits(
        config=config,
        train=tuple(train),
        iid=tuple(iid),
        near=tuple(tests["near"]),
        far=tuple(tests["far"]),
        provenance=tuple(provenance),
        anomaly_pool=tuple(pool),
    )
    if config.contamination_rate > 0:
        splits = contaminate(splits, config.contamination_rate, config.seed)
    return splits


def contaminate(
    splits: BenchmarkSplits, rate: float, seed: int
) -> BenchmarkSplits:
    """Swaps ``floor(rate * |train|)`` TRAIN normals for relabelled anomalies."""
    if not 0 <= rate < 1:
        raise ValueError(f"contamination rate must lie in [0, 1), got {rate}")
    n_train = sum(len(ys.records) for ys in splits.train)
    n_inject = math.floor(rate * n_train)
    if n_inject == 0:
        return splits
    if n_inject > len(splits.anomaly_pool):
        raise InsufficientAnomalySupply(
            f"need {n_inject} anomalies to contaminate TRAIN but only "
            f"{len(splits.anomaly_pool)} remain in the training years"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, n_train, n_inject]))
    positions = sorted(int(p) for p in rng.choice(n_train, size=n_inject, replace=False))
    picks = [int(p) for p in rng.choice(len(splits.anomaly_pool), size=n_inject,
                                        replace=False)]
    swap = dict(zip(positions, picks))

    # the pool only holds anomalies of the TRAIN years
    train_sets, injections = [], []
    offset = 0
    for ys in splits.train:
        records, indices = list(ys.records), list(ys.indices)
        for local in range(len(records)):
            pos = offset + local
            if pos in swap:
                source_index, anomaly = splits.anomaly_pool[swap[pos]]
                records[local] = relabel(anomaly, 1)
                if indices:
                    indices[local] = source_index
                injections.append(Injection(pos, source_index, anomaly.label.raw_code))
        offset += len(records)
        train_sets.append(replace(ys, records=tuple(records), indices=tuple(indices)))

    used = set(picks)
    remaining = tuple(p for k, p in enumerate(splits.anomaly_pool) if k not in used)
    logger.info("Injected %d mislabelled anomalies into TRAIN (rate %.3f)", n_inject, rate)
    return replace(
        splits,
        train=tuple(train_sets),
        injected=splits.injected + tuple(injections),
        anomaly_pool=remaining,
    )


def split_filename(split: str, year: int) -> str:
    return f"{split}_{year}.txt"


def save_splits(
    splits: BenchmarkSplits,
    directory: Union[str, Path],
    schema: SchemaDescriptor,
    run_config: BaseModel,
    seed: int,
) -> Path:
    directory = Path(directory)
    files = []
    for name, sets in (("train", splits.train), *((n, getattr(splits, n)) for n in TEST_SPLITS)):
        for ys in sets:
            filename = split_filename(name, ys.year)
            write_dataset(ys.records, directory / filename, schema)
            files.append({"split": name, "year": ys.year, "file": filename,
                          "n_records": len(ys.records)})
    payload = {
        "split_config": splits.config.model_dump(mode="json"),
        "files": files,
        "provenance": [asdict(p) for p in splits.provenance],
        "injected": [asdict(i) for i in splits.injected],
    }
    return write_json_artifact(directory / MANIFEST_NAME, "splits", run_config, seed, payload)


def load_splits(
    directory: Union[str, Path], schema: Optional[SchemaDescriptor] = None
) -> BenchmarkSplits:
    directory = Path(directory)
    manifest = read_json_artifact(directory / MANIFEST_NAME, kind="splits")
    payload = manifest["payload"]
    if schema is None:
        schema = SchemaDescriptor.model_validate(manifest["config"].get("layout", {}))
    grouped: dict[str, list[YearSet]] = defaultdict(list)
    for entry in payload["files"]:
        result = read_dataset(directory / entry["file"], schema)
        grouped[entry["split"]].append(
            YearSet(year=entry["year"], records=tuple(result.records))
        )
    return BenchmarkSplits(
        config=SplitConfig.model_validate(payload["split_config"]),
        train=tuple(grouped["train"]),
        iid=tuple(grouped["iid"]),
        near=tuple(grouped["near"]),
        far=tuple(grouped["far"]),
        provenance=tuple(SplitProvenance(**p) for p in payload["provenance"]),
        injected=tuple(Injection(**i) for i in payload["injected"]),
    )
