"""Turns raw records into fixed-length token sequences over a closed vocabulary.

Unbounded numerics fall into exponentially widening bins
``[basis**i - 1, basis**(i+1) - 1)``, percentages into 100 equal buckets,
categoricals pass through. Every token is namespaced by its feature position
(``f2:bin17``) so equal bucket numbers of different features stay distinct.
"""

import functools
import hashlib
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from kyoto_shift_bench.errors import EmptyInput, NegativeInput, VocabularyMismatch
from kyoto_shift_bench.schema import (
    FEATURE_NAMES,
    FeatureKind,
    FeatureTreatment,
    Label,
    RawRecord,
    YearMonth,
    default_treatments,
)
from kyoto_shift_bench.utils import atomic_write, parallel_map

logger = logging.getLogger(__name__)

N_BINS = 233
N_PERCENT_BUCKETS = 100
DEFAULT_BASIS = 1.1

PAD_TOKEN, UNK_TOKEN, MASK_TOKEN = "[PAD]", "[UNK]", "[MASK]"
PAD_ID, UNK_ID, MASK_ID = 0, 1, 2
SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, MASK_TOKEN)


@functools.lru_cache(maxsize=8)
def bin_edges(basis: float = DEFAULT_BASIS, n_bins: int = N_BINS) -> tuple[float, ...]:
    """Lower bin edges ``basis**i - 1``; powers come from repeated multiplication."""
    edges = []
    power = 1.0
    for _ in range(n_bins):
        edges.append(power - 1.0)
        power *= basis
    return tuple(edges)


def bin_index(x: float, basis: float = DEFAULT_BASIS) -> int:
    if not x >= 0:
        raise NegativeInput(f"bin_index needs a non-negative value, got {x!r}")
    if basis <= 1:
        raise ValueError("basis must be greater than 1")
    edges = bin_edges(basis)
    last = len(edges) - 1
    if math.isfinite(x):
        candidate = min(last, int(math.floor(math.log1p(x) / math.log(basis))))
    else:
        candidate = last
    # the log can land one bin off near an edge; settle it against exact edges
    while candidate < last and x >= edges[candidate + 1]:
        candidate += 1
    while candidate > 0 and x < edges[candidate]:
        candidate -= 1
    return candidate


def bin_indices(values: np.ndarray, basis: float = DEFAULT_BASIS) -> np.ndarray:
    """Vectorised ``bin_index`` with the same exact-edge semantics."""
    values = np.asarray(values, dtype=np.float64)
    if np.any(~(values >= 0)):
        raise NegativeInput("bin_indices needs non-negative values")
    edges = np.asarray(bin_edges(basis))
    return np.searchsorted(edges, values, side="right") - 1


def discretize_percentage(x: float) -> int:
    x = min(1.0, max(0.0, float(x)))
    # round first so 0.57 * 100 == 56.99999999999999 still lands in bucket 57
    return min(N_PERCENT_BUCKETS - 1, int(math.floor(round(x * 100, 9))))


def feature_token_value(value, treatment: FeatureTreatment, basis: float = DEFAULT_BASIS) -> str:
    if treatment.kind is FeatureKind.CATEGORICAL:
        return str(value)
    if treatment.kind is FeatureKind.BINNED:
        return f"bin{bin_index(float(value), basis)}"
    return f"pct{discretize_percentage(float(value) / treatment.divisor)}"


def token_string(position: int, value: str) -> str:
    return f"f{position}:{value}"


@dataclass(frozen=True)
class Vocabulary:
    token_to_id: Mapping[str, int]
    id_to_token: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self) -> int:
        return self.size

    def get(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def to_text(self) -> str:
        return "".join(f"{token}\t{i}\n" for i, token in enumerate(self.id_to_token))

    @functools.cached_property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def position_ids(self, position: int) -> np.ndarray:
        """Sorted ids of every token namespaced to one feature position."""
        prefix = token_string(position, "")
        return np.array(
            sorted(i for t, i in self.token_to_id.items() if t.startswith(prefix)),
            dtype=np.int64,
        )

    @classmethod
    def from_tokens(cls, tokens) -> "Vocabulary":
        return cls.from_ordered(
            SPECIAL_TOKENS + tuple(sorted(set(tokens) - set(SPECIAL_TOKENS)))
        )

    @classmethod
    def from_ordered(cls, id_to_token: Sequence[str]) -> "Vocabulary":
        """Rebuilds a vocabulary whose ids are the positions in ``id_to_token``."""
        ordered = tuple(id_to_token)
        if ordered[:len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise VocabularyMismatch("special tokens must occupy ids 0-2")
        if len(set(ordered)) != len(ordered):
            raise VocabularyMismatch("vocabulary tokens must be unique")
        return cls({t: i for i, t in enumerate(ordered)}, ordered)


def build_vocabulary(
    records: Sequence[RawRecord],
    treatments: Optional[Mapping[str, FeatureTreatment]] = None,
    basis: float = DEFAULT_BASIS,
) -> Vocabulary:
    """Closed a-priori token space plus every categorical value observed."""
    if not records:
        raise EmptyInput("cannot build a vocabulary from zero records")
    treatments = treatments or default_treatments()
    tokens: set[str] = set()
    for pos, name in enumerate(FEATURE_NAMES):
        kind = treatments[name].kind
        if kind is FeatureKind.BINNED:
            tokens.update(token_string(pos, f"bin{i}") for i in range(N_BINS))
        elif kind is FeatureKind.PERCENTAGE:
            tokens.update(token_string(pos, f"pct{i}") for i in range(N_PERCENT_BUCKETS))
        else:
            tokens.update(token_string(pos, str(getattr(r, name))) for r in records)
    vocab = Vocabulary.from_tokens(tokens)
    logger.info("Built vocabulary with %d tokens", vocab.size)
    return vocab


def save_vocabulary(vocab: Vocabulary, path: Union[str, Path]) -> Path:
    return atomic_write(path, vocab.to_text())


def load_vocabulary(path: Union[str, Path]) -> Vocabulary:
    id_to_token: list[str] = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        token, _, raw_id = line.rpartition("\t")
        if not token or int(raw_id) != len(id_to_token):
            raise VocabularyMismatch(f"{path}:{line_no}: ids must be contiguous from 0")
        id_to_token.append(token)
    return Vocabulary.from_ordered(id_to_token)


@dataclass(frozen=True)
class TokenizedRecord:
    tokens: tuple[int, ...]
    label: Label
    year_month: YearMonth


def record_tokens(
    record: RawRecord,
    treatments: Optional[Mapping[str, FeatureTreatment]] = None,
    basis: float = DEFAULT_BASIS,
) -> list[str]:
    treatments = treatments or default_treatments()
    return [
        token_string(pos, feature_token_value(getattr(record, name), treatments[name], basis))
        for pos, name in enumerate(FEATURE_NAMES)
    ]


def encode(
    record: RawRecord,
    vocab: Vocabulary,
    treatments: Optional[Mapping[str, FeatureTreatment]] = None,
    basis: float = DEFAULT_BASIS,
) -> TokenizedRecord:
    ids = tuple(vocab.get(t) for t in record_tokens(record, treatments, basis))
    return TokenizedRecord(tokens=ids, label=record.label, year_month=record.year_month)


def decode(tokenized: TokenizedRecord, vocab: Vocabulary) -> list[str]:
    return [vocab.id_to_token[i] for i in tokenized.tokens]


def encode_all(
    records: Sequence[RawRecord],
    vocab: Vocabulary,
    treatments: Optional[Mapping[str, FeatureTreatment]] = None,
    threads: int = 1,
    chunk_size: int = 4096,
) -> list[TokenizedRecord]:
    treatments = treatments or default_treatments()
    chunks = [records[i:i + chunk_size] for i in range(0, len(records), chunk_size)]
    encoded = parallel_map(
        lambda chunk: [encode(r, vocab, treatments) for r in chunk], chunks, threads
    )
    return [t for chunk in encoded for t in chunk]


def token_matrix(tokenized: Sequence[TokenizedRecord]) -> np.ndarray:
    if not tokenized:
        return np.zeros((0, len(FEATURE_NAMES)), dtype=np.int64)
    return np.array([t.tokens for t in tokenized], dtype=np.int64)
