"""Record model, label semantics and the feature taxonomy of Kyoto-style logs."""

import datetime
import enum
import math
from dataclasses import dataclass
from typing import Union

from kyoto_shift_bench.errors import UnknownLabelCode

# Canonical order of the 14 conventional features. Token sequences, one-hot
# layouts and the default file layout all follow it.
FEATURE_NAMES: tuple[str, ...] = (
    "duration",
    "service",
    "src_bytes",
    "dst_bytes",
    "count",
    "same_srv_rate",
    "serror_rate",
    "srv_serror_rate",
    "dst_host_count",
    "dst_host_srv_count",
    "dst_host_same_src_port_rate",
    "dst_host_serror_rate",
    "dst_host_srv_serror_rate",
    "flag",
)
N_FEATURES = len(FEATURE_NAMES)

CATEGORICAL_FEATURES = frozenset({"service", "flag"})
COUNT_FEATURES = frozenset({"count", "dst_host_count", "dst_host_srv_count"})
RATE_FEATURES = frozenset(
    {
        "same_srv_rate",
        "serror_rate",
        "srv_serror_rate",
        "dst_host_same_src_port_rate",
        "dst_host_serror_rate",
        "dst_host_srv_serror_rate",
    }
)
UNBOUNDED_FEATURES = frozenset({"duration", "src_bytes", "dst_bytes"})

# calendar covered by the Kyoto-2006+ logs; synthetic corpora stay inside it
FIRST_YEAR, LAST_YEAR = 2006, 2015


class LabelClass(str, enum.Enum):
    NORMAL = "normal"
    ANOMALY = "anomaly"


_CODE_TO_CLASS = {1: LabelClass.NORMAL, -1: LabelClass.ANOMALY, -2: LabelClass.ANOMALY}


@dataclass(frozen=True)
class Label:
    cls: LabelClass
    raw_code: int

    @property
    def is_anomaly(self) -> bool:
        return self.cls is LabelClass.ANOMALY


NORMAL = Label(LabelClass.NORMAL, 1)
ANOMALY = Label(LabelClass.ANOMALY, -1)


def label_from_code(code: Union[int, str]) -> Label:
    """Maps a raw Kyoto label code to a ``Label``; 1 is normal, -1/-2 anomalous."""
    try:
        value = int(code)
    except (TypeError, ValueError):
        raise UnknownLabelCode(code) from None
    if isinstance(code, float) and code != value:
        raise UnknownLabelCode(code)
    cls = _CODE_TO_CLASS.get(value)
    if cls is None:
        raise UnknownLabelCode(code)
    return Label(cls, value)


@dataclass(frozen=True, order=True)
class YearMonth:
    year: int
    month: int

    def __post_init__(self):
        if not 1 <= self.month <= 12:
            raise ValueError(f"month must be in 1..12, got {self.month}")

    def __str__(self) -> str:
        return f"{self.year:04d}-{self.month:02d}"

    @classmethod
    def of(cls, timestamp: datetime.datetime) -> "YearMonth":
        return cls(timestamp.year, timestamp.month)


class FeatureKind(str, enum.Enum):
    CATEGORICAL = "categorical"
    BINNED = "binned"
    PERCENTAGE = "percentage"


@dataclass(frozen=True)
class FeatureTreatment:
    """How one feature becomes a token. ``divisor`` scales counts into [0, 1]."""

    kind: FeatureKind
    divisor: float = 1.0


def default_treatments() -> dict[str, FeatureTreatment]:
    """Three binned numerics, nine percentages (three of them capped counts)."""
    table: dict[str, FeatureTreatment] = {}
    for name in FEATURE_NAMES:
        if name in CATEGORICAL_FEATURES:
            table[name] = FeatureTreatment(FeatureKind.CATEGORICAL)
        elif name in UNBOUNDED_FEATURES:
            table[name] = FeatureTreatment(FeatureKind.BINNED)
        elif name in COUNT_FEATURES:
            table[name] = FeatureTreatment(FeatureKind.PERCENTAGE, divisor=100.0)
        else:
            table[name] = FeatureTreatment(FeatureKind.PERCENTAGE)
    return table


@dataclass(frozen=True)
class RawRecord:
    """One connection row: the 14 conventional features, a timestamp, a label."""

    duration: float
    service: str
    src_bytes: int
    dst_bytes: int
    count: int
    same_srv_rate: float
    serror_rate: float
    srv_serror_rate: float
    dst_host_count: int
    dst_host_srv_count: int
    dst_host_same_src_port_rate: float
    dst_host_serror_rate: float
    dst_host_srv_serror_rate: float
    flag: str
    timestamp: datetime.datetime
    label: Label

    def __post_init__(self):
        for name in ("duration", "src_bytes", "dst_bytes", "count",
                     "dst_host_count", "dst_host_srv_count"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be a finite non-negative number, got {value!r}")
        for name in RATE_FEATURES:
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value!r}")
        for name in CATEGORICAL_FEATURES:
            value = getattr(self, name)
            if not value or any(c in value for c in "\t\n\r"):
                raise ValueError(f"{name} must be a non-empty single-line string")
        if not FIRST_YEAR <= self.timestamp.year <= LAST_YEAR:
            raise ValueError(
                f"timestamp year must lie in {FIRST_YEAR}..{LAST_YEAR}, got {self.timestamp.year}"
            )

    @property
    def year_month(self) -> YearMonth:
        return YearMonth.of(self.timestamp)

    @property
    def year(self) -> int:
        return self.timestamp.year

    def features(self) -> tuple:
        return tuple(getattr(self, name) for name in FEATURE_NAMES)
