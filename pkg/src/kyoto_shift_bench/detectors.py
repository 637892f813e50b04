"""Unsupervised anomaly detectors behind one fit/score contract.

Every detector is fitted on TRAIN vectors and returns one score per row,
higher meaning more anomalous. ``FeatureVectorizer`` turns records into the
vectors (standardized one-hot tokens or raw numerics) or, for the masked
model, into token id sequences.
"""

import abc
import io
import json
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import ClassVar, Optional, Union

import numpy as np
import torch
from pydantic import BaseModel
from scipy.spatial.distance import cdist
from scipy.stats import skew

from kyoto_shift_bench.config import DetectorConfig, ModelConfig, RunConfig, config_hash
from kyoto_shift_bench.errors import (
    ArtifactMismatch,
    EmptyInput,
    InvalidConfig,
    KTooLarge,
    NotFitted,
)
from kyoto_shift_bench.maskedmodel import (
    DTYPE,
    MaskedTransformer,
    score_sequences,
    train_iid,
)
from kyoto_shift_bench.schema import (
    FEATURE_NAMES,
    FeatureKind,
    FeatureTreatment,
    RawRecord,
    default_treatments,
)
from kyoto_shift_bench.tokenize import (
    DEFAULT_BASIS,
    Vocabulary,
    build_vocabulary,
    encode_all,
    token_matrix,
)
from kyoto_shift_bench.utils import atomic_write, parallel_map

logger = logging.getLogger(__name__)

STATE_FORMAT_VERSION = 2
EULER_GAMMA = 0.5772156649
SCORE_CHUNK = 4096
VECTORIZER_MODES = ("onehot", "raw", "tokens")


def _standardize_stats(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0
    return mean, std


class FeatureVectorizer:
    """Records to detector inputs; all statistics come from the TRAIN records."""

    def __init__(
        self,
        mode: str = "onehot",
        vocab: Optional[Vocabulary] = None,
        treatments: Optional[Mapping[str, FeatureTreatment]] = None,
        basis: float = DEFAULT_BASIS,
    ):
        if mode not in VECTORIZER_MODES:
            raise InvalidConfig(f"unknown vectorizer mode {mode!r}")
        self.mode = mode
        self.vocab = vocab
        self.treatments = dict(treatments or default_treatments())
        self.basis = basis
        self.columns_: Optional[np.ndarray] = None
        self.levels_: Optional[np.ndarray] = None
        self.mean_: Optional[np.ndarray] = None
        self.std_: Optional[np.ndarray] = None
        self.fitted = False

    @property
    def categorical_positions(self) -> list[int]:
        return [
            pos for pos, name in enumerate(FEATURE_NAMES)
            if self.treatments[name].kind is FeatureKind.CATEGORICAL
        ]

    def token_ids(self, records: Sequence[RawRecord]) -> np.ndarray:
        return token_matrix(encode_all(records, self.vocab, self.treatments))

    def _numeric(self, records: Sequence[RawRecord]) -> np.ndarray:
        cols = []
        for name in FEATURE_NAMES:
            t = self.treatments[name]
            if t.kind is FeatureKind.CATEGORICAL:
                continue
            values = np.array([float(getattr(r, name)) for r in records])
            if t.kind is FeatureKind.PERCENTAGE:
                values = np.clip(values / t.divisor, 0.0, 1.0)
            cols.append(values)
        return np.column_stack(cols) if cols else np.zeros((len(records), 0))

    @staticmethod
    def _one_hot(values: np.ndarray, positions: np.ndarray, keys: np.ndarray) -> np.ndarray:
        """Indicator matrix for (position, key) columns; unseen values stay all-zero."""
        out = np.zeros((len(values), len(keys)))
        for pos in np.unique(positions):
            cols = np.flatnonzero(positions == pos)
            known = keys[cols]
            col = values[:, pos]
            k = np.minimum(np.searchsorted(known, col), len(known) - 1)
            hit = known[k] == col
            out[np.flatnonzero(hit), cols[k[hit]]] = 1.0
        return out

    def _raw_matrix(self, records: Sequence[RawRecord]) -> np.ndarray:
        categorical = np.array(
            [[str(getattr(r, FEATURE_NAMES[p])) for p in range(len(FEATURE_NAMES))]
             for r in records],
            dtype=str,
        ).reshape(len(records), len(FEATURE_NAMES))
        onehot = self._one_hot(categorical, self.columns_, self.levels_)
        return np.hstack([self._numeric(records), onehot])

    def _encoded(self, records: Sequence[RawRecord]) -> np.ndarray:
        if self.mode == "onehot":
            return self._one_hot(self.token_ids(records), self.columns_, self.levels_)
        return self._raw_matrix(records)

    def fit(self, records: Sequence[RawRecord]) -> "FeatureVectorizer":
        if not records:
            raise EmptyInput("cannot fit a vectorizer on zero records")
        if self.mode != "raw" and self.vocab is None:
            self.vocab = build_vocabulary(records, self.treatments, self.basis)
        if self.mode == "onehot":
            ids = self.token_ids(records)
            pairs = [(pos, tok) for pos in range(ids.shape[1]) for tok in np.unique(ids[:, pos])]
            self.columns_ = np.array([p for p, _ in pairs], dtype=np.int64)
            self.levels_ = np.array([t for _, t in pairs], dtype=np.int64)
        elif self.mode == "raw":
            pairs = [
                (pos, level)
                for pos in self.categorical_positions
                for level in sorted({str(getattr(r, FEATURE_NAMES[pos])) for r in records})
            ]
            self.columns_ = np.array([p for p, _ in pairs], dtype=np.int64)
            self.levels_ = np.array([lv for _, lv in pairs], dtype=str)
        if self.mode != "tokens":
            self.mean_, self.std_ = _standardize_stats(self._encoded(records))
        self.fitted = True
        return self

    def transform(self, records: Sequence[RawRecord]) -> np.ndarray:
        if not self.fitted:
            raise NotFitted("FeatureVectorizer")
        if self.mode == "tokens":
            return self.token_ids(records)
        if not records:
            return np.zeros((0, len(self.mean_)))
        return (self._encoded(records) - self.mean_) / self.std_

    def fit_transform(self, records: Sequence[RawRecord]) -> np.ndarray:
        return self.fit(records).transform(records)

    @property
    def dim(self) -> int:
        if self.mode == "tokens":
            return len(FEATURE_NAMES)
        if self.mean_ is None:
            raise NotFitted("FeatureVectorizer")
        return len(self.mean_)

    def state(self) -> dict[str, np.ndarray]:
        if not self.fitted:
            raise NotFitted("FeatureVectorizer")
        state = {
            "mode": np.array(self.mode),
            "basis": np.array(self.basis),
            "treatment_kinds": np.array([self.treatments[n].kind.value for n in FEATURE_NAMES]),
            "treatment_divisors": np.array([self.treatments[n].divisor for n in FEATURE_NAMES]),
        }
        if self.vocab is not None:
            state["vocab"] = np.array(self.vocab.id_to_token)
        if self.mode != "tokens":
            state.update(columns=self.columns_, levels=self.levels_,
                         mean=self.mean_, std=self.std_)
        return state

    @classmethod
    def from_state(cls, state: Mapping[str, np.ndarray]) -> "FeatureVectorizer":
        treatments = {
            name: FeatureTreatment(FeatureKind(str(kind)), float(div))
            for name, kind, div in zip(
                FEATURE_NAMES, state["treatment_kinds"], state["treatment_divisors"]
            )
        }
        vocab = None
        if "vocab" in state:
            vocab = Vocabulary.from_ordered([str(t) for t in state["vocab"]])
        vec = cls(str(state["mode"]), vocab, treatments, float(state["basis"]))
        if vec.mode != "tokens":
            vec.columns_ = np.asarray(state["columns"])
            vec.levels_ = np.asarray(state["levels"])
            vec.mean_ = np.asarray(state["mean"])
            vec.std_ = np.asarray(state["std"])
        vec.fitted = True
        return vec


def _as_matrix(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError("expected a 2-D array of feature vectors")
    return X


class Detector(abc.ABC):
    name: ClassVar[str]
    # scoring row chunks independently gives the same result as one call
    chunkable: ClassVar[bool] = True

    @abc.abstractmethod
    def fit(self, X: np.ndarray) -> "Detector": ...

    @abc.abstractmethod
    def _score(self, X: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def state(self) -> dict[str, np.ndarray]: ...

    @classmethod
    @abc.abstractmethod
    def from_state(cls, state: Mapping[str, np.ndarray]) -> "Detector": ...

    @property
    @abc.abstractmethod
    def is_fitted(self) -> bool: ...

    def score(self, X: np.ndarray) -> np.ndarray:
        if not self.is_fitted:
            raise NotFitted(type(self).__name__)
        return self._score(X)

    def score_one(self, x: np.ndarray) -> float:
        return float(self.score(np.asarray(x)[None, ...])[0])


class _TailProbabilityDetector(Detector):
    """Shared empirical-CDF machinery of ECOD and COPOD."""

    def __init__(self):
        self.sorted_: Optional[np.ndarray] = None
        self.skew_: Optional[np.ndarray] = None

    @property
    def is_fitted(self) -> bool:
        return self.sorted_ is not None

    def fit(self, X: np.ndarray) -> "_TailProbabilityDetector":
        X = _as_matrix(X)
        if len(X) < 2:
            raise EmptyInput(f"{self.name} needs at least 2 training points")
        self.sorted_ = np.sort(X, axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            # constant columns have no skewness; they take the right tail
            self.skew_ = np.nan_to_num(skew(X, axis=0), nan=0.0)
        return self

    def tail_scores(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """-log of left, right and skew-selected tail probabilities, per dimension."""
        X = _as_matrix(X)
        n, d = self.sorted_.shape
        if X.shape[1] != d:
            raise ValueError(f"expected {d} features, got {X.shape[1]}")
        left = np.empty(X.shape)
        right = np.empty(X.shape)
        for j in range(d):
            col = self.sorted_[:, j]
            left[:, j] = np.searchsorted(col, X[:, j], side="right")
            right[:, j] = n - np.searchsorted(col, X[:, j], side="left")
        o_left = -np.log((left + 1.0) / (n + 1.0))
        o_right = -np.log((right + 1.0) / (n + 1.0))
        o_skew = np.where(self.skew_ < 0, o_left, o_right)
        return o_left, o_right, o_skew

    def state(self) -> dict[str, np.ndarray]:
        return {"sorted": self.sorted_, "skew": self.skew_}

    @classmethod
    def from_state(cls, state):
        det = cls()
        det.sorted_ = np.asarray(state["sorted"])
        det.skew_ = np.asarray(state["skew"])
        return det


class ECOD(_TailProbabilityDetector):
    name = "ecod"

    def _score(self, X: np.ndarray) -> np.ndarray:
        o_left, o_right, o_skew = self.tail_scores(X)
        return np.maximum.reduce([o_left.sum(1), o_right.sum(1), o_skew.sum(1)])


class COPOD(_TailProbabilityDetector):
    name = "copod"

    def _score(self, X: np.ndarray) -> np.ndarray:
        o_left, o_right, o_skew = self.tail_scores(X)
        return np.maximum(o_skew, (o_left + o_right) / 2.0).sum(axis=1)


def average_path_length(n) -> np.ndarray:
    """c(n): mean depth of an unsuccessful search in a BST of n keys."""
    n = np.asarray(n, dtype=np.float64)
    out = np.zeros_like(n)
    out[n == 2] = 1.0
    big = n > 2
    m = n[big]
    out[big] = 2.0 * (np.log(m - 1.0) + EULER_GAMMA) - 2.0 * (m - 1.0) / m
    return out


class IsolationForest(Detector):
    name = "iforest"

    def __init__(self, n_trees: int = 100, subsample: int = 256, seed: int = 0):
        self.n_trees = n_trees
        self.subsample = subsample
        self.seed = seed
        self.feature_: Optional[np.ndarray] = None
        self.threshold_: Optional[np.ndarray] = None
        self.left_: Optional[np.ndarray] = None
        self.right_: Optional[np.ndarray] = None
        self.size_: Optional[np.ndarray] = None
        self.roots_: Optional[np.ndarray] = None
        self.psi_ = 0

    @property
    def is_fitted(self) -> bool:
        return self.roots_ is not None

    @property
    def height_limit(self) -> int:
        return max(1, math.ceil(math.log2(self.psi_)))

    def fit(self, X: np.ndarray) -> "IsolationForest":
        X = _as_matrix(X)
        if len(X) < 2:
            raise EmptyInput("isolation forest needs at least 2 training points")
        rng = np.random.default_rng(self.seed)
        self.psi_ = min(self.subsample, len(X))
        limit = self.height_limit
        feature, threshold, left, right, size = [], [], [], [], []

        def grow(rows: np.ndarray, depth: int) -> int:
            node = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            size.append(len(rows))
            if depth >= limit or len(rows) <= 1:
                return node
            sub = X[rows]
            lo, hi = sub.min(axis=0), sub.max(axis=0)
            candidates = np.flatnonzero(hi > lo)
            if len(candidates) == 0:
                return node
            f = int(rng.choice(candidates))
            cut = float(rng.uniform(lo[f], hi[f]))
            goes_left = sub[:, f] < cut
            if goes_left.all() or not goes_left.any():
                return node
            feature[node], threshold[node] = f, cut
            left[node] = grow(rows[goes_left], depth + 1)
            right[node] = grow(rows[~goes_left], depth + 1)
            return node

        roots = [
            grow(np.sort(rng.choice(len(X), size=self.psi_, replace=False)), 0)
            for _ in range(self.n_trees)
        ]
        self.feature_ = np.array(feature, dtype=np.int64)
        self.threshold_ = np.array(threshold)
        self.left_ = np.array(left, dtype=np.int64)
        self.right_ = np.array(right, dtype=np.int64)
        self.size_ = np.array(size, dtype=np.int64)
        self.roots_ = np.array(roots, dtype=np.int64)
        return self

    def path_lengths(self, X: np.ndarray) -> np.ndarray:
        """``(n_trees, n)`` path lengths h = depth + c(leaf size)."""
        X = _as_matrix(X)
        rows = np.arange(len(X))
        out = np.empty((len(self.roots_), len(X)))
        for t, root in enumerate(self.roots_):
            node = np.full(len(X), root)
            depth = np.zeros(len(X))
            while True:
                f = self.feature_[node]
                active = f >= 0
                if not active.any():
                    break
                idx = rows[active]
                goes_left = X[idx, f[active]] < self.threshold_[node[active]]
                node[active] = np.where(
                    goes_left, self.left_[node[active]], self.right_[node[active]]
                )
                depth[active] += 1
            out[t] = depth + average_path_length(self.size_[node])
        return out

    def _score(self, X: np.ndarray) -> np.ndarray:
        mean_depth = self.path_lengths(X).mean(axis=0)
        norm = float(average_path_length(self.psi_))
        return np.power(2.0, -mean_depth / norm)

    def state(self) -> dict[str, np.ndarray]:
        return {
            "params": np.array([self.n_trees, self.subsample, self.seed, self.psi_]),
            "feature": self.feature_, "threshold": self.threshold_,
            "left": self.left_, "right": self.right_,
            "size": self.size_, "roots": self.roots_,
        }

    @classmethod
    def from_state(cls, state):
        n_trees, subsample, seed, psi = (int(v) for v in state["params"])
        det = cls(n_trees, subsample, seed)
        det.psi_ = psi
        for key in ("feature", "threshold", "left", "right", "size", "roots"):
            setattr(det, f"{key}_", np.asarray(state[key]))
        return det


def _knn(
    queries: np.ndarray, points: np.ndarray, k: int, exclude_self: bool, chunk: int = 1024
) -> tuple[np.ndarray, np.ndarray]:
    """Exact k nearest neighbours by brute force; ties resolve to the lower index."""
    dist = np.empty((len(queries), k))
    idx = np.empty((len(queries), k), dtype=np.int64)
    for start in range(0, len(queries), chunk):
        d = cdist(queries[start:start + chunk], points)
        if exclude_self:
            rows = np.arange(d.shape[0])
            d[rows, start + rows] = np.inf
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        idx[start:start + chunk] = order
        dist[start:start + chunk] = np.take_along_axis(d, order, axis=1)
    return dist, idx


class LocalOutlierFactor(Detector):
    name = "lof"

    def __init__(self, k: int = 20):
        if k < 1:
            raise InvalidConfig("LOF needs k >= 1")
        self.k = k
        self.points_: Optional[np.ndarray] = None
        self.k_distance_: Optional[np.ndarray] = None
        self.lrd_: Optional[np.ndarray] = None
        self.training_scores_: Optional[np.ndarray] = None

    @property
    def is_fitted(self) -> bool:
        return self.points_ is not None

    def _lof(self, dist: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        reach = np.maximum(dist, self.k_distance_[idx])
        lrd = 1.0 / (reach.mean(axis=1) + 1e-10)
        return lrd, self.lrd_[idx].mean(axis=1) / lrd

    def fit(self, X: np.ndarray) -> "LocalOutlierFactor":
        X = _as_matrix(X)
        if self.k >= len(X):
            raise KTooLarge(f"k={self.k} needs more than {self.k} training points, got {len(X)}")
        dist, idx = _knn(X, X, self.k, exclude_self=True)
        self.points_ = X
        self.k_distance_ = dist[:, -1]
        reach = np.maximum(dist, self.k_distance_[idx])
        self.lrd_ = 1.0 / (reach.mean(axis=1) + 1e-10)
        self.training_scores_ = self.lrd_[idx].mean(axis=1) / self.lrd_
        return self

    def _score(self, X: np.ndarray) -> np.ndarray:
        dist, idx = _knn(_as_matrix(X), self.points_, self.k, exclude_self=False)
        return self._lof(dist, idx)[1]

    def state(self) -> dict[str, np.ndarray]:
        return {
            "k": np.array(self.k), "points": self.points_,
            "k_distance": self.k_distance_, "lrd": self.lrd_,
            "training_scores": self.training_scores_,
        }

    @classmethod
    def from_state(cls, state):
        det = cls(int(state["k"]))
        det.points_ = np.asarray(state["points"])
        det.k_distance_ = np.asarray(state["k_distance"])
        det.lrd_ = np.asarray(state["lrd"])
        det.training_scores_ = np.asarray(state["training_scores"])
        return det


class MaskedModelScorer(Detector):
    """The masked transformer behind the detector contract; inputs are token ids."""

    name = "mlm"
    # one forward pass per call keeps scores bit-identical across thread counts
    chunkable = False

    def __init__(self, config: ModelConfig, vocab_size: int, seed: int = 0):
        self.config = config
        self.vocab_size = vocab_size
        self.seed = seed
        self.model: Optional[MaskedTransformer] = None

    @property
    def is_fitted(self) -> bool:
        return self.model is not None

    def fit(self, X: np.ndarray) -> "MaskedModelScorer":
        tokens = np.asarray(X, dtype=np.int64)
        self.model = train_iid([tokens], self.config, self.vocab_size, self.seed).model
        return self

    def _score(self, X: np.ndarray) -> np.ndarray:
        return score_sequences(
            self.model, np.asarray(X, dtype=np.int64), self.config.mask_prob,
            self.config.eval_mask_samplings, self.seed, self.config.normalize_by_mask_count,
        )

    def state(self) -> dict[str, np.ndarray]:
        state = {
            "config": np.array(self.config.model_dump_json()),
            "params": np.array([self.vocab_size, self.seed]),
        }
        for key, tensor in self.model.state_dict().items():
            state[f"weight:{key}"] = tensor.detach().cpu().numpy()
        return state

    @classmethod
    def from_state(cls, state):
        config = ModelConfig.model_validate_json(str(state["config"]))
        vocab_size, seed = (int(v) for v in state["params"])
        det = cls(config, vocab_size, seed)
        det.model = MaskedTransformer(config, vocab_size).to(DTYPE)
        weights = {
            key.split(":", 1)[1]: torch.from_numpy(np.array(value))
            for key, value in state.items() if key.startswith("weight:")
        }
        det.model.load_state_dict(weights)
        det.model.eval()
        return det


DETECTOR_TYPES: dict[str, type[Detector]] = {
    cls.name: cls for cls in (ECOD, COPOD, IsolationForest, LocalOutlierFactor, MaskedModelScorer)
}


def ecod_fit(X: np.ndarray) -> ECOD:
    return ECOD().fit(X)


def ecod_score(state: ECOD, x: np.ndarray) -> float:
    return state.score_one(x)


def copod_fit(X: np.ndarray) -> COPOD:
    return COPOD().fit(X)


def copod_score(state: COPOD, x: np.ndarray) -> float:
    return state.score_one(x)


def isoforest_fit(
    X: np.ndarray, n_trees: int = 100, subsample: int = 256, seed: int = 0
) -> IsolationForest:
    return IsolationForest(n_trees, subsample, seed).fit(X)


def isoforest_score(state: IsolationForest, x: np.ndarray) -> float:
    return state.score_one(x)


def lof_fit(X: np.ndarray, k: int = 20) -> LocalOutlierFactor:
    return LocalOutlierFactor(k).fit(X)


def lof_score(state: LocalOutlierFactor, x: np.ndarray) -> float:
    return state.score_one(x)


def subsample_records(
    records: Sequence[RawRecord], fraction: float, seed: int
) -> list[RawRecord]:
    """Seeded subset of ``ceil(fraction * n)`` records in original order."""
    if not 0 < fraction <= 1:
        raise InvalidConfig(f"train fraction must lie in (0, 1], got {fraction}")
    if fraction == 1:
        return list(records)
    n = max(1, math.ceil(fraction * len(records)))
    rng = np.random.default_rng(np.random.SeedSequence([seed, len(records), n]))
    return [records[i] for i in np.sort(rng.choice(len(records), size=n, replace=False))]


@dataclass
class FittedDetector:
    name: str
    seed: int
    vectorizer: FeatureVectorizer
    detector: Detector
    threads: int = 1
    # hash of the run config the state was fitted under, "" when unknown
    run_config_hash: str = ""

    def score_records(self, records: Sequence[RawRecord]) -> np.ndarray:
        if not records:
            return np.zeros(0)
        X = self.vectorizer.transform(records)
        if not self.detector.chunkable or len(X) <= SCORE_CHUNK:
            return self.detector.score(X)
        chunks = [X[i:i + SCORE_CHUNK] for i in range(0, len(X), SCORE_CHUNK)]
        return np.concatenate(parallel_map(self.detector.score, chunks, self.threads))


def build_detector(
    name: str,
    config: DetectorConfig,
    seed: int,
    model_config: Optional[ModelConfig] = None,
    vocab_size: Optional[int] = None,
) -> Detector:
    if name == "ecod":
        return ECOD()
    if name == "copod":
        return COPOD()
    if name == "iforest":
        return IsolationForest(config.iforest_trees, config.iforest_subsample, seed)
    if name == "lof":
        return LocalOutlierFactor(config.lof_k)
    if name == "mlm":
        if model_config is None or vocab_size is None:
            raise InvalidConfig("the masked model needs a model config and a vocabulary")
        return MaskedModelScorer(model_config, vocab_size, seed)
    raise InvalidConfig(f"unknown detector {name!r}")


def fit_detector(
    name: str,
    train_records: Sequence[RawRecord],
    config: DetectorConfig,
    seed: int,
    vocab: Optional[Vocabulary] = None,
    treatments: Optional[Mapping[str, FeatureTreatment]] = None,
    model_config: Optional[ModelConfig] = None,
    threads: int = 1,
) -> FittedDetector:
    records = subsample_records(train_records, config.train_fraction, seed)
    mode = "tokens" if name == "mlm" else config.features
    vectorizer = FeatureVectorizer(mode, vocab, treatments)
    X = vectorizer.fit_transform(records)
    vocab_size = vectorizer.vocab.size if vectorizer.vocab is not None else None
    detector = build_detector(name, config, seed, model_config, vocab_size)
    logger.info("Fitting %s (seed %d) on %d x %d inputs", name, seed, *np.shape(X))
    detector.fit(X)
    return FittedDetector(name, seed, vectorizer, detector, threads)


def save_detector(
    fitted: FittedDetector,
    path: Union[str, Path],
    run_config: Optional[BaseModel] = None,
) -> Path:
    arrays = {
        "format_version": np.array(STATE_FORMAT_VERSION),
        "meta": np.array(json.dumps({"name": fitted.name, "seed": fitted.seed,
                                     "kind": fitted.detector.name})),
        "seed": np.array(fitted.seed),
        "config_hash": np.array(config_hash(run_config) if run_config is not None else ""),
        "run_config": np.array(run_config.model_dump_json() if run_config is not None else ""),
    }
    arrays.update({f"vec__{k}": v for k, v in fitted.vectorizer.state().items()})
    arrays.update({f"det__{k}": v for k, v in fitted.detector.state().items()})
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return atomic_write(path, buf.getvalue())


def _read_state(path: Union[str, Path]) -> dict[str, np.ndarray]:
    with np.load(Path(path), allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    if int(arrays.get("format_version", -1)) != STATE_FORMAT_VERSION:
        raise ArtifactMismatch(f"{path} is not a detector state file of this version")
    return arrays


def state_provenance(path: Union[str, Path]) -> tuple[str, Optional[dict], int]:
    """``(config_hash, run config, seed)`` recorded in a detector state file."""
    arrays = _read_state(path)
    run_config = str(arrays["run_config"])
    return (
        str(arrays["config_hash"]),
        json.loads(run_config) if run_config else None,
        int(arrays["seed"]),
    )


def load_detector(
    path: Union[str, Path], threads: int = 1, expected_hash: Optional[str] = None
) -> FittedDetector:
    arrays = _read_state(path)
    stored, run_config = str(arrays["config_hash"]), str(arrays["run_config"])
    if run_config and config_hash(RunConfig.model_validate_json(run_config)) != stored:
        raise ArtifactMismatch(f"{path}: embedded hash {stored} does not match its config")
    if expected_hash is not None and stored != expected_hash:
        raise ArtifactMismatch(
            f"{path} was fitted under config {stored or 'unknown'}, expected {expected_hash}"
        )
    meta = json.loads(str(arrays["meta"]))
    vec_state = {k[5:]: v for k, v in arrays.items() if k.startswith("vec__")}
    det_state = {k[5:]: v for k, v in arrays.items() if k.startswith("det__")}
    detector = DETECTOR_TYPES[meta["kind"]].from_state(det_state)
    return FittedDetector(
        meta["name"], int(arrays["seed"]), FeatureVectorizer.from_state(vec_state), detector,
        threads, stored,
    )
