import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from kyoto_shift_bench.errors import InvalidConfig
from kyoto_shift_bench.schema import (
    CATEGORICAL_FEATURES,
    FEATURE_NAMES,
    FIRST_YEAR,
    LAST_YEAR,
    FeatureKind,
    FeatureTreatment,
    default_treatments,
)

APP_NAME = "kyoto-shift-bench"
USER_CONFIG_DIR = Path.home() / ".config" / APP_NAME
USER_CONFIG_FILE = USER_CONFIG_DIR / ".env"


class Settings(BaseSettings):
    seed: int = Field(
        default=0,
        validation_alias="SHIFT_BENCH_SEED",
        description="Global seed used when a command gets no --seed.",
    )
    threads: int = Field(
        default=1,
        ge=1,
        validation_alias="SHIFT_BENCH_THREADS",
        description="Upper bound on worker threads for parallel stages.",
    )
    output_dir: str = Field(
        default="runs",
        validation_alias="SHIFT_BENCH_OUTPUT_DIR",
        description="Default directory for command outputs.",
    )
    log_level: str = Field(default="INFO", validation_alias="SHIFT_BENCH_LOG_LEVEL")

    model_config = SettingsConfigDict(
        env_file=[".env", str(Path.home() / ".env"), str(USER_CONFIG_FILE)],
        env_file_encoding="utf-8",
        extra="ignore",
    )


settings = Settings()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


# Column layout of the Kyoto-2006+ preprocessed distribution: 0-13 conventional
# features, 14 timestamp, 15-17 detector flags, 18 label, 19 protocol.
KYOTO_COLUMN_ROLES: List[str] = [
    *FEATURE_NAMES,
    "timestamp",
    "ignore",
    "ignore",
    "ignore",
    "label",
    "ignore",
]


class TreatmentSpec(_Section):
    kind: FeatureKind
    divisor: float = Field(default=1.0, gt=0)


def _default_treatment_specs() -> Dict[str, TreatmentSpec]:
    return {
        name: TreatmentSpec(kind=t.kind, divisor=t.divisor)
        for name, t in default_treatments().items()
    }


class SchemaDescriptor(_Section):
    column_roles: List[str] = Field(default_factory=lambda: list(KYOTO_COLUMN_ROLES))
    delimiter: str = "\t"
    has_header: bool = False
    treatments: Dict[str, TreatmentSpec] = Field(default_factory=_default_treatment_specs)
    max_malformed_fraction: float = Field(default=0.01, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check_roles(self) -> "SchemaDescriptor":
        if len(self.delimiter) != 1:
            raise ValueError("delimiter must be a single character")
        roles = self.column_roles
        if roles.count("label") != 1:
            raise ValueError("exactly one column must have the 'label' role")
        if roles.count("timestamp") != 1:
            raise ValueError("exactly one column must have the 'timestamp' role")
        allowed = set(FEATURE_NAMES) | {"label", "timestamp", "ignore"}
        unknown = sorted(set(roles) - allowed)
        if unknown:
            raise ValueError(f"unknown column roles: {unknown}")
        for name in FEATURE_NAMES:
            if roles.count(name) != 1:
                raise ValueError(f"feature {name!r} must be assigned exactly once")
        merged = _default_treatment_specs()
        for name, spec in self.treatments.items():
            if name not in FEATURE_NAMES:
                raise ValueError(f"treatment given for unknown feature {name!r}")
            merged[name] = spec
        for name, spec in merged.items():
            if (name in CATEGORICAL_FEATURES) != (spec.kind is FeatureKind.CATEGORICAL):
                raise ValueError(f"feature {name!r} cannot be treated as {spec.kind.value}")
        self.treatments = merged
        return self

    def feature_treatments(self) -> Dict[str, FeatureTreatment]:
        return {
            name: FeatureTreatment(spec.kind, spec.divisor)
            for name, spec in self.treatments.items()
        }

    def column_of(self, role: str) -> int:
        return self.column_roles.index(role)


def _default_ratios() -> List[float]:
    return [0.55, 0.6, 0.6, 0.65, 0.7, 0.7]


class SyntheticConfig(_Section):
    n_years: int = Field(default=6, ge=2)
    months_per_year: int = Field(default=2, ge=1, le=12)
    normals_per_month: int = Field(default=300, ge=1)
    anomaly_ratio_per_year: List[float] = Field(default_factory=_default_ratios)
    drift_rate: float = Field(default=0.3, ge=0.0)
    swap_year: int = Field(default=5, ge=0)
    start_year: int = 2006
    seed: int = Field(default=0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _check_ratios(self) -> "SyntheticConfig":
        if len(self.anomaly_ratio_per_year) != self.n_years:
            raise ValueError(
                f"anomaly_ratio_per_year has {len(self.anomaly_ratio_per_year)} "
                f"entries but n_years is {self.n_years}"
            )
        if any(not 0.0 < r < 1.0 for r in self.anomaly_ratio_per_year):
            raise ValueError("anomaly ratios must lie strictly between 0 and 1")
        if self.swap_year > self.n_years:
            raise ValueError("swap_year must be a year index no larger than n_years")
        if self.start_year < FIRST_YEAR or self.start_year + self.n_years - 1 > LAST_YEAR:
            raise ValueError(f"synthetic years must stay within {FIRST_YEAR}..{LAST_YEAR}")
        return self

    @property
    def years(self) -> List[int]:
        return [self.start_year + i for i in range(self.n_years)]


class SplitConfig(_Section):
    train_years: List[int] = Field(default_factory=lambda: list(range(2006, 2011)))
    near_years: List[int] = Field(default_factory=lambda: [2011, 2012, 2013])
    far_years: List[int] = Field(default_factory=lambda: [2014, 2015])
    normals_per_month_train: int = Field(default=25_000, gt=0)
    normals_per_month_iid: int = Field(default=2_500, gt=0)
    contamination_rate: float = Field(default=0.0, ge=0.0, lt=1.0)
    seed: int = Field(default=0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _check_years(self) -> "SplitConfig":
        groups = (self.train_years, self.near_years, self.far_years)
        if any(not g for g in groups):
            raise ValueError("train, near and far year lists must be non-empty")
        for g in groups:
            if g != sorted(set(g)):
                raise ValueError("year lists must be strictly increasing")
        if not (max(self.train_years) < min(self.near_years)
                and max(self.near_years) < min(self.far_years)):
            raise ValueError("year lists must be disjoint and chronologically ordered")
        return self

    @property
    def all_years(self) -> List[int]:
        return [*self.train_years, *self.near_years, *self.far_years]


def chronological_years(
    years: List[int], n_train: int, n_near: int
) -> Tuple[List[int], List[int], List[int]]:
    """Cuts an ordered calendar into TRAIN, NEAR and FAR year lists."""
    years = sorted(years)
    if n_train < 1 or n_near < 1 or n_train + n_near >= len(years):
        raise InvalidConfig(
            f"cannot cut {len(years)} years into {n_train} train, {n_near} near "
            "and at least one far year"
        )
    return years[:n_train], years[n_train:n_train + n_near], years[n_train + n_near:]


def _desk_split() -> SplitConfig:
    train, near, far = chronological_years(SyntheticConfig().years, 3, 2)
    return SplitConfig(
        train_years=train,
        near_years=near,
        far_years=far,
        normals_per_month_train=200,
        normals_per_month_iid=20,
    )


ClassName = Literal["inlier", "outlier"]


class DriftConfig(_Section):
    metric: Literal["jeffreys", "sinkhorn"] = "jeffreys"
    feature: str = "service"
    class_pair: Tuple[ClassName, ClassName] = ("inlier", "inlier")
    smoothing: float = Field(default=1e-6, gt=0)
    sample_size: int = Field(default=5000, ge=1, le=10_000)
    repeats: int = Field(default=3, ge=1)
    epsilon: float = Field(default=0.05, gt=0)
    max_iters: int = Field(default=1000, ge=1)
    tol: float = Field(default=1e-6, gt=0)
    pca_components: int = Field(default=2, ge=1)

    @model_validator(mode="after")
    def _check_feature(self) -> "DriftConfig":
        if self.feature not in FEATURE_NAMES:
            raise ValueError(f"unknown feature {self.feature!r}")
        return self


DetectorName = Literal["ecod", "copod", "iforest", "lof", "mlm"]


class DetectorConfig(_Section):
    names: List[DetectorName] = Field(
        default_factory=lambda: ["ecod", "copod", "iforest", "lof"]
    )
    features: Literal["onehot", "raw"] = "onehot"
    iforest_trees: int = Field(default=100, ge=1)
    iforest_subsample: int = Field(default=256, ge=2)
    lof_k: int = Field(default=20, ge=1)
    train_fraction: float = Field(default=1.0, gt=0.0, le=1.0)
    seeds: Optional[List[int]] = None


class ModelConfig(_Section):
    n_layers: int = Field(default=2, ge=1)
    hidden: int = Field(default=120, ge=1)
    intermediate: int = Field(default=192, ge=1)
    n_heads: int = Field(default=6, ge=1)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    attention_dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    layernorm_eps: float = Field(default=1e-12, gt=0)
    init_std: float = Field(default=0.02, gt=0)
    seq_len: int = Field(default=len(FEATURE_NAMES), ge=1)
    mask_prob: float = Field(default=0.15, gt=0.0, lt=1.0)
    eval_mask_samplings: int = Field(default=10, ge=1)
    normalize_by_mask_count: bool = False
    learning_rate: float = Field(default=1e-3, gt=0)
    weight_decay: float = Field(default=0.01, ge=0)
    batch_size: int = Field(default=64, ge=1)
    epochs: int = Field(default=5, ge=1)
    distill_weight: float = Field(default=1.0, ge=0)
    temperature: float = Field(default=1.0, gt=0)
    show_progress: bool = True

    @model_validator(mode="after")
    def _check_heads(self) -> "ModelConfig":
        if self.hidden % self.n_heads:
            raise ValueError(
                f"hidden size {self.hidden} is not divisible by {self.n_heads} heads"
            )
        return self


class RunConfig(_Section):
    seed: int = Field(default_factory=lambda: settings.seed)
    threads: int = Field(default_factory=lambda: settings.threads, ge=1)
    layout: SchemaDescriptor = Field(default_factory=SchemaDescriptor)
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)
    split: SplitConfig = Field(default_factory=_desk_split)
    drift: DriftConfig = Field(default_factory=DriftConfig)
    detectors: DetectorConfig = Field(default_factory=DetectorConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    strategy: Literal["iid", "finetune", "distill"] = "iid"


def config_hash(config: BaseModel) -> str:
    """SHA-256 over the canonical JSON dump; stable across key order.

    The thread count is left out: it never changes results.
    """
    exclude = {"threads"} if isinstance(config, RunConfig) else None
    canonical = json.dumps(
        config.model_dump(mode="json", exclude=exclude),
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(
    path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None
) -> RunConfig:
    """Reads a JSON run config (if any), applies overrides and validates the result."""
    data: Dict[str, Any] = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise InvalidConfig(f"Could not read config file {path}: {e}") from e
        if not isinstance(data, dict):
            raise InvalidConfig(f"Config file {path} must hold a JSON object.")
    data = _deep_merge(data, overrides or {})
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise InvalidConfig(f"Invalid configuration:\n{e}") from e


def write_default_config(path: Path) -> bool:
    """Writes a default run config template; returns False if the file exists."""
    if path.exists():
        return False
    path.parent.mkdir(parents=True, exist_ok=True)
    text = RunConfig().model_dump_json(indent=2)
    path.write_text(text + "\n", encoding="utf-8")
    return True
