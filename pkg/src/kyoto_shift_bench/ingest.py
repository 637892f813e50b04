"""Delimited-text dataset I/O and the synthetic drifting-traffic generator."""

import calendar
import datetime
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Union

import numpy as np

from kyoto_shift_bench.config import SchemaDescriptor, SyntheticConfig
from kyoto_shift_bench.errors import InvalidConfig, MalformedDataset
from kyoto_shift_bench.schema import (
    ANOMALY,
    COUNT_FEATURES,
    NORMAL,
    RATE_FEATURES,
    RawRecord,
    label_from_code,
)
from kyoto_shift_bench.utils import atomic_write

logger = logging.getLogger(__name__)

_INT_FEATURES = frozenset({"src_bytes", "dst_bytes"}) | COUNT_FEATURES
_FLOAT_FEATURES = frozenset({"duration"}) | RATE_FEATURES
_IGNORED_PLACEHOLDER = "0"


@dataclass(frozen=True)
class MalformedRow:
    line_no: int
    reason: str


@dataclass
class ReadResult:
    records: list[RawRecord]
    malformed: list[MalformedRow] = field(default_factory=list)
    n_rows: int = 0

    def __iter__(self) -> Iterator[RawRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)


def _parse_int(text: str) -> int:
    value = float(text)
    if not value.is_integer():
        raise ValueError(f"expected an integer, got {text!r}")
    return int(value)


def _parse_row(cells: list[str], schema: SchemaDescriptor) -> RawRecord:
    if len(cells) != len(schema.column_roles):
        raise ValueError(f"expected {len(schema.column_roles)} columns, found {len(cells)}")
    values: dict = {}
    for role, cell in zip(schema.column_roles, cells):
        cell = cell.strip()
        if role == "ignore":
            continue
        if role == "timestamp":
            values["timestamp"] = datetime.datetime.fromisoformat(cell)
        elif role == "label":
            values["label"] = label_from_code(cell)
        elif role in _INT_FEATURES:
            values[role] = _parse_int(cell)
        elif role in _FLOAT_FEATURES:
            value = float(cell)
            if not math.isfinite(value):
                raise ValueError(f"{role} is not finite")
            values[role] = value
        else:
            values[role] = cell
    return RawRecord(**values)


def read_dataset(path: Union[str, Path], schema: SchemaDescriptor) -> ReadResult:
    """Parses a delimited file; tolerates a small share of malformed rows.

    The file fails with ``MalformedDataset`` once malformed rows exceed
    ``max(1, floor(max_malformed_fraction * rows))``.
    """
    path = Path(path)
    records: list[RawRecord] = []
    malformed: list[MalformedRow] = []
    n_rows = 0
    with open(path, encoding="utf-8", newline="") as f:
        for line_no, line in enumerate(f, start=1):
            if line_no == 1 and schema.has_header:
                continue
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            n_rows += 1
            try:
                records.append(_parse_row(line.split(schema.delimiter), schema))
            except ValueError as e:  # UnknownLabelCode included
                malformed.append(MalformedRow(line_no, str(e)))

    allowed = max(1, math.floor(schema.max_malformed_fraction * n_rows))
    if len(malformed) > allowed:
        first = "; ".join(f"line {m.line_no}: {m.reason}" for m in malformed[:3])
        raise MalformedDataset(
            f"{path}: {len(malformed)} of {n_rows} rows are malformed "
            f"(at most {allowed} tolerated). First problems: {first}"
        )
    if malformed:
        logger.warning(
            "%s: skipped %d malformed row(s) out of %d", path, len(malformed), n_rows
        )
    logger.info("Read %d records from %s", len(records), path)
    return ReadResult(records=records, malformed=malformed, n_rows=n_rows)


def _format_cell(role: str, record: RawRecord) -> str:
    if role == "ignore":
        return _IGNORED_PLACEHOLDER
    if role == "timestamp":
        return record.timestamp.isoformat()
    if role == "label":
        return str(record.label.raw_code)
    value = getattr(record, role)
    if role in _FLOAT_FEATURES:
        return repr(float(value))
    return str(value)


def format_rows(records: Iterable[RawRecord], schema: SchemaDescriptor) -> str:
    lines = []
    if schema.has_header:
        lines.append(schema.delimiter.join(schema.column_roles))
    for record in records:
        lines.append(
            schema.delimiter.join(_format_cell(role, record) for role in schema.column_roles)
        )
    return "\n".join(lines) + ("\n" if lines else "")


def write_dataset(
    records: Iterable[RawRecord], path: Union[str, Path], schema: SchemaDescriptor
) -> Path:
    """Writes records in the schema layout so ``read_dataset`` reads them back exactly."""
    return atomic_write(path, format_rows(records, schema))


# --- Synthetic traffic ------------------------------------------------------

SERVICES = ("http", "smtp", "dns", "ssh", "ftp", "snmp", "rdp", "other")
FLAGS = ("SF", "S0", "REJ", "RSTO", "RSTR", "SH", "S1", "OTH")
_RATE_ORDER = (
    "same_srv_rate",
    "serror_rate",
    "srv_serror_rate",
    "dst_host_same_src_port_rate",
    "dst_host_serror_rate",
    "dst_host_srv_serror_rate",
)
_COUNT_ORDER = ("count", "dst_host_count", "dst_host_srv_count")
_LOG_SIGMA = 0.8
_BETA_CONCENTRATION = 20.0


@dataclass(frozen=True)
class TrafficProfile:
    """Parameters of one categorical/numeric mixture of connections."""

    service_logits: tuple[float, ...]
    flag_logits: tuple[float, ...]
    log_duration: float
    log_src_bytes: float
    log_dst_bytes: float
    rate_means: tuple[float, ...]
    count_means: tuple[float, ...]

    def blend(self, other: "TrafficProfile", w: float) -> "TrafficProfile":
        """Linear interpolation (extrapolation for w > 1) toward ``other``."""

        def mix(a, b, clip=False):
            out = np.asarray(a) + w * (np.asarray(b) - np.asarray(a))
            if clip:
                out = np.clip(out, 0.01, 0.99)
            return tuple(float(v) for v in np.atleast_1d(out))

        return TrafficProfile(
            service_logits=mix(self.service_logits, other.service_logits),
            flag_logits=mix(self.flag_logits, other.flag_logits),
            log_duration=mix(self.log_duration, other.log_duration)[0],
            log_src_bytes=mix(self.log_src_bytes, other.log_src_bytes)[0],
            log_dst_bytes=mix(self.log_dst_bytes, other.log_dst_bytes)[0],
            rate_means=mix(self.rate_means, other.rate_means, clip=True),
            count_means=mix(self.count_means, other.count_means, clip=True),
        )


NORMAL_BASE = TrafficProfile(
    service_logits=(2.0, 1.5, 1.5, 0.0, -0.5, -1.0, -2.0, -1.0),
    flag_logits=(3.0, -1.0, -1.0, -1.0, -2.0, -2.0, -1.0, -2.0),
    log_duration=0.5,
    log_src_bytes=6.0,
    log_dst_bytes=7.5,
    rate_means=(0.8, 0.05, 0.05, 0.2, 0.05, 0.05),
    count_means=(0.1, 0.3, 0.6),
)
# Where normal traffic heads as years pass (reached at year * drift_rate == 1).
NORMAL_DRIFT_TARGET = TrafficProfile(
    service_logits=(-0.5, 0.5, 1.0, 2.0, 0.0, 0.5, 1.0, 1.0),
    flag_logits=(2.5, 0.0, -1.0, 0.5, -1.0, -1.0, 0.0, -1.0),
    log_duration=2.0,
    log_src_bytes=8.0,
    log_dst_bytes=5.5,
    rate_means=(0.5, 0.15, 0.1, 0.5, 0.1, 0.1),
    count_means=(0.3, 0.6, 0.3),
)
ANOMALY_BASE = TrafficProfile(
    service_logits=(-1.0, -1.0, 0.5, 1.5, -1.0, 0.0, 1.5, 2.0),
    flag_logits=(-1.0, 2.5, 2.0, 0.5, 0.5, 1.0, -1.0, 0.5),
    log_duration=-1.5,
    log_src_bytes=2.0,
    log_dst_bytes=1.0,
    rate_means=(0.3, 0.8, 0.8, 0.7, 0.8, 0.8),
    count_means=(0.5, 0.9, 0.1),
)


def normal_profile(year_index: int, drift_rate: float) -> TrafficProfile:
    return NORMAL_BASE.blend(NORMAL_DRIFT_TARGET, year_index * drift_rate)


def anomaly_profile(year_index: int, config: SyntheticConfig) -> TrafficProfile:
    """Distinct from normals before ``swap_year``; converges to year-0 normals after."""
    if year_index < config.swap_year:
        return ANOMALY_BASE
    span = max(1, config.n_years - config.swap_year)
    w = min(1.0, (year_index - config.swap_year + 1) / span)
    return ANOMALY_BASE.blend(normal_profile(0, config.drift_rate), w)


def _softmax(logits: tuple[float, ...]) -> np.ndarray:
    z = np.asarray(logits) - max(logits)
    p = np.exp(z)
    return p / p.sum()


def _sample(
    profile: TrafficProfile, n: int, rng: np.random.Generator
) -> list[dict]:
    services = rng.choice(len(SERVICES), size=n, p=_softmax(profile.service_logits))
    flags = rng.choice(len(FLAGS), size=n, p=_softmax(profile.flag_logits))
    duration = np.round(
        np.maximum(0.0, np.expm1(rng.normal(profile.log_duration, _LOG_SIGMA, n))), 6
    )
    src = np.floor(np.maximum(0.0, np.expm1(rng.normal(profile.log_src_bytes, 1.0, n))))
    dst = np.floor(np.maximum(0.0, np.expm1(rng.normal(profile.log_dst_bytes, 1.0, n))))
    rates = {
        name: np.round(rng.beta(m * _BETA_CONCENTRATION, (1 - m) * _BETA_CONCENTRATION, n), 2)
        for name, m in zip(_RATE_ORDER, profile.rate_means)
    }
    counts = {
        name: rng.binomial(100, m, n) for name, m in zip(_COUNT_ORDER, profile.count_means)
    }
    rows = []
    for i in range(n):
        row = {
            "duration": float(duration[i]),
            "service": SERVICES[services[i]],
            "src_bytes": int(src[i]),
            "dst_bytes": int(dst[i]),
            "flag": FLAGS[flags[i]],
        }
        row.update({name: float(values[i]) for name, values in rates.items()})
        row.update({name: int(values[i]) for name, values in counts.items()})
        rows.append(row)
    return rows


def _month_timestamps(
    year: int, month: int, n: int, rng: np.random.Generator
) -> list[datetime.datetime]:
    start = datetime.datetime(year, month, 1)
    span = calendar.monthrange(year, month)[1] * 86_400
    offsets = rng.integers(0, span, size=n)
    return [start + datetime.timedelta(seconds=int(s)) for s in offsets]


def anomalies_for(normals: int, ratio: float) -> int:
    """Anomaly count that makes ``ratio`` the anomaly share next to ``normals``."""
    return int(round(normals * ratio / (1.0 - ratio)))


def generate_synthetic(config: SyntheticConfig) -> list[RawRecord]:
    """Draws a deterministic, chronologically ordered drifting corpus."""
    if len(config.anomaly_ratio_per_year) != config.n_years:
        raise InvalidConfig("anomaly_ratio_per_year must have one entry per year")
    rng = np.random.default_rng(config.seed)
    records: list[RawRecord] = []
    for y, year in enumerate(config.years):
        normal = normal_profile(y, config.drift_rate)
        anomalous = anomaly_profile(y, config)
        year_anomalies = anomalies_for(
            config.normals_per_month * config.months_per_year,
            config.anomaly_ratio_per_year[y],
        )
        base, extra = divmod(year_anomalies, config.months_per_year)
        for m in range(config.months_per_year):
            month = m + 1
            n_anom = base + (1 if m < extra else 0)
            rows = [(r, NORMAL) for r in _sample(normal, config.normals_per_month, rng)]
            rows += [(r, ANOMALY) for r in _sample(anomalous, n_anom, rng)]
            stamps = _month_timestamps(year, month, len(rows), rng)
            month_records = [
                RawRecord(**row, timestamp=ts, label=label)
                for (row, label), ts in zip(rows, stamps)
            ]
            # stable sort keeps draw order among equal timestamps
            month_records.sort(key=lambda r: r.timestamp)
            records.extend(month_records)
    logger.info(
        "Generated %d synthetic records over %d years", len(records), config.n_years
    )
    return records


def relabel(record: RawRecord, code: int) -> RawRecord:
    return replace(record, label=label_from_code(code))
