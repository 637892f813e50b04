"""Masked-token transformer anomaly scorer and its three training strategies.

A record is a fixed-length token sequence. The model is trained to recover
masked tokens; at scoring time the anomaly score of a sequence is the
average, over ``n`` random maskings, of ``sum(1 - P(true token))`` across the
masked positions. Unmasked positions contribute nothing.

Strategies over a sequence of yearly training sets:

- ``iid``: one fresh model on the shuffled concatenation.
- ``finetune``: keep optimizing the same weights set after set.
- ``distill``: a fresh student per set, trained with an extra
  KL(teacher || student) term at masked positions; the student then becomes
  the next teacher.
"""

import copy
import io
import logging
import math
import sys
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel
from torch import nn
from tqdm import tqdm

from kyoto_shift_bench.config import ModelConfig, config_hash
from kyoto_shift_bench.errors import (
    ArtifactMismatch,
    ConfigMismatch,
    EmptyMask,
    InvalidConfig,
    VocabularyMismatch,
)
from kyoto_shift_bench.evaluate import roc_auc
from kyoto_shift_bench.tokenize import MASK_ID, Vocabulary
from kyoto_shift_bench.utils import atomic_write

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
DTYPE = torch.float64
ARCHITECTURE_FIELDS = frozenset(
    {"n_layers", "hidden", "intermediate", "n_heads", "seq_len", "layernorm_eps"}
)


class SelfAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.n_heads = config.n_heads
        self.head_dim = config.hidden // config.n_heads
        self.query = nn.Linear(config.hidden, config.hidden)
        self.key = nn.Linear(config.hidden, config.hidden)
        self.value = nn.Linear(config.hidden, config.hidden)
        self.output = nn.Linear(config.hidden, config.hidden)
        self.attention_dropout = nn.Dropout(config.attention_dropout)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = self._heads(self.query(x)), self._heads(self.key(x)), self._heads(self.value(x))
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        context = self.attention_dropout(weights) @ v
        b, _, t, _ = context.shape
        return self.output(context.transpose(1, 2).reshape(b, t, -1))


class EncoderLayer(nn.Module):
    """Post-LN block: attention and feed-forward, each with residual + LayerNorm."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attention = SelfAttention(config)
        self.attention_norm = nn.LayerNorm(config.hidden, eps=config.layernorm_eps)
        self.intermediate = nn.Linear(config.hidden, config.intermediate)
        self.output = nn.Linear(config.intermediate, config.hidden)
        self.output_norm = nn.LayerNorm(config.hidden, eps=config.layernorm_eps)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.attention_norm(x + self.dropout(self.attention(x)))
        hidden = self.output(F.gelu(self.intermediate(x)))
        return self.output_norm(x + self.dropout(hidden))


class MaskedTransformer(nn.Module):
    def __init__(self, config: ModelConfig, vocab_size: int):
        super().__init__()
        self.config = config
        self.vocab_size = vocab_size
        h = config.hidden
        self.token_embedding = nn.Embedding(vocab_size, h)
        self.position_embedding = nn.Embedding(config.seq_len, h)
        self.embedding_norm = nn.LayerNorm(h, eps=config.layernorm_eps)
        self.embedding_dropout = nn.Dropout(config.dropout)
        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.n_layers))
        self.head_dense = nn.Linear(h, h)
        self.head_norm = nn.LayerNorm(h, eps=config.layernorm_eps)
        self.decoder = nn.Linear(h, vocab_size)
        self.register_buffer(
            "positions", torch.arange(config.seq_len), persistent=False
        )

    def reset_parameters(self) -> None:
        std = self.config.init_std
        for module in self.modules():
            if isinstance(module, (nn.Linear, nn.Embedding)):
                nn.init.trunc_normal_(module.weight, std=std, a=-2 * std, b=2 * std)
                if getattr(module, "bias", None) is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Log-probabilities over the vocabulary, shape ``(batch, seq_len, V)``."""
        if tokens.shape[-1] != self.config.seq_len:
            raise ValueError(
                f"expected sequences of length {self.config.seq_len}, got {tokens.shape[-1]}"
            )
        x = self.token_embedding(tokens) + self.position_embedding(self.positions)
        x = self.embedding_dropout(self.embedding_norm(x))
        for layer in self.layers:
            x = layer(x)
        x = self.head_norm(F.gelu(self.head_dense(x)))
        return F.log_softmax(self.decoder(x), dim=-1)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def expected_parameter_count(config: ModelConfig, vocab_size: int) -> int:
    V, h, i, T, L = (
        vocab_size, config.hidden, config.intermediate, config.seq_len, config.n_layers
    )
    embeddings = V * h + T * h + 2 * h
    layer = 4 * h * h + 9 * h + 2 * h * i + i
    head = h * h + 3 * h + V * h + V
    return embeddings + L * layer + head


PARAMETER_FORMULA = "2*V*h + V + T*h + 2*h + L*(4*h^2 + 9*h + 2*h*i + i) + h^2 + 3*h"


def init_model(config: ModelConfig, vocab_size: int, seed: int) -> MaskedTransformer:
    if vocab_size <= MASK_ID:
        raise InvalidConfig(f"vocabulary of size {vocab_size} has no room past the specials")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = MaskedTransformer(config, vocab_size).to(DTYPE)
        model.reset_parameters()
    return model


@dataclass(frozen=True)
class MaskSample:
    mask: np.ndarray
    masked: np.ndarray


def apply_mask(tokens: np.ndarray, p: float, rng: np.random.Generator) -> MaskSample:
    """Bernoulli(p) masking per position; an empty row is redrawn once, then forced."""
    if not 0 < p < 1:
        raise ValueError(f"mask probability must lie in (0, 1), got {p}")
    tokens = np.asarray(tokens, dtype=np.int64)
    rows = np.atleast_2d(tokens)
    mask = rng.random(rows.shape) < p
    empty = ~mask.any(axis=1)
    if empty.any():
        mask[empty] = rng.random((int(empty.sum()), rows.shape[1])) < p
        empty = ~mask.any(axis=1)
        if empty.any():
            forced = rng.integers(0, rows.shape[1], size=int(empty.sum()))
            mask[np.flatnonzero(empty), forced] = True
    masked = np.where(mask, MASK_ID, rows)
    if tokens.ndim == 1:
        return MaskSample(mask[0], masked[0])
    return MaskSample(mask, masked)


def predict_proba(model: MaskedTransformer, tokens: np.ndarray) -> np.ndarray:
    """Eval-mode per-position distributions over the vocabulary."""
    model.eval()
    with torch.no_grad():
        log_probs = model(torch.as_tensor(np.atleast_2d(tokens), dtype=torch.long))
    return log_probs.exp().numpy()


def mlm_loss(
    log_probs: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Mean negative log-probability of the true token over masked positions."""
    mask = mask.bool()
    if not mask.any():
        raise EmptyMask("no masked positions to compute the loss over")
    true = log_probs.gather(-1, targets.long().unsqueeze(-1)).squeeze(-1)
    return -true[mask].mean()


def distill_loss(
    student_log_probs: torch.Tensor,
    teacher_log_probs: torch.Tensor,
    mask: torch.Tensor,
    temperature: float = 1.0,
) -> torch.Tensor:
    """KL(teacher || student) averaged over masked positions."""
    mask = mask.bool()
    if not mask.any():
        raise EmptyMask("no masked positions to distill over")
    student = F.log_softmax(student_log_probs[mask] / temperature, dim=-1)
    teacher = F.log_softmax(teacher_log_probs[mask] / temperature, dim=-1)
    kl = F.kl_div(student, teacher, reduction="batchmean", log_target=True)
    return kl * temperature**2


def aggregate_scores(
    true_probs: np.ndarray, masks: np.ndarray, normalize_by_mask_count: bool = False
) -> np.ndarray:
    """Per-sequence score from ``(n, N, T)`` true-token probabilities and masks."""
    true_probs = np.asarray(true_probs, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    contrib = np.where(masks, 1.0 - true_probs, 0.0).sum(axis=-1)
    if normalize_by_mask_count:
        contrib = contrib / np.maximum(masks.sum(axis=-1), 1)
    return contrib.mean(axis=0)


def true_token_probs(
    model: MaskedTransformer, tokens: np.ndarray, mask: np.ndarray, batch_size: int = 1024
) -> np.ndarray:
    """P(original token) at every position after masking ``mask``."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    masked = np.where(mask, MASK_ID, tokens)
    model.eval()
    out = np.empty(tokens.shape, dtype=np.float64)
    with torch.no_grad():
        for start in range(0, len(tokens), batch_size):
            stop = start + batch_size
            log_probs = model(torch.as_tensor(masked[start:stop]))
            target = torch.as_tensor(tokens[start:stop]).unsqueeze(-1)
            out[start:stop] = log_probs.gather(-1, target).squeeze(-1).exp().numpy()
    return out


def row_masks(row: np.ndarray, p: float, n: int, seed: int) -> np.ndarray:
    """``(n, T)`` evaluation masks drawn from a stream keyed on ``(seed, row)``."""
    row = np.asarray(row, dtype=np.int64)
    rng = np.random.default_rng(np.random.SeedSequence([seed, *(int(t) for t in row)]))
    return apply_mask(np.broadcast_to(row, (n, len(row))), p, rng).mask


def score_sequences(
    model: MaskedTransformer,
    tokens: np.ndarray,
    p: float,
    n: int,
    seed: int,
    normalize_by_mask_count: bool = False,
    batch_size: int = 1024,
) -> np.ndarray:
    """Score every row; a row's masks depend only on its tokens and ``seed``."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if len(tokens) == 0:
        return np.zeros(0)
    masks = np.empty((n, *tokens.shape), dtype=bool)
    drawn: dict[bytes, np.ndarray] = {}
    for i, row in enumerate(tokens):
        key = row.tobytes()
        if key not in drawn:
            drawn[key] = row_masks(row, p, n, seed)
        masks[:, i] = drawn[key]
    probs = np.stack([true_token_probs(model, tokens, masks[k], batch_size) for k in range(n)])
    return aggregate_scores(probs, masks, normalize_by_mask_count)


def anomaly_score(
    model: MaskedTransformer,
    tokens: Sequence[int],
    p: float,
    n: int,
    seed: int,
    normalize_by_mask_count: bool = False,
) -> float:
    return float(score_sequences(model, np.asarray(tokens)[None, :], p, n, seed,
                                 normalize_by_mask_count)[0])


@dataclass
class TrainResult:
    model: MaskedTransformer
    # one list of per-epoch mean losses per training stage
    epoch_losses: list[list[float]] = field(default_factory=list)


def _stage_seed(seed: int, stage: int) -> int:
    return int(np.random.SeedSequence([seed, stage]).generate_state(1)[0])


def _progress_disabled(config: ModelConfig) -> bool:
    return not config.show_progress or not sys.stderr.isatty()


def _fit_stage(
    model: MaskedTransformer,
    tokens: np.ndarray,
    config: ModelConfig,
    seed: int,
    stage: int,
    teacher: Optional[MaskedTransformer] = None,
    desc: str = "train",
) -> list[float]:
    """Runs ``config.epochs`` epochs with a fresh AdamW; returns epoch mean losses."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) == 0:
        raise ValueError("cannot train on an empty set")
    stage_seed = _stage_seed(seed, stage)
    rng = np.random.default_rng(stage_seed)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    if teacher is not None:
        teacher.eval()
    losses = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(stage_seed)
        model.train()
        epochs = tqdm(range(config.epochs), desc=desc, disable=_progress_disabled(config))
        for epoch in epochs:
            order = rng.permutation(len(tokens))
            total, batches = 0.0, 0
            for start in range(0, len(order), config.batch_size):
                batch = tokens[order[start:start + config.batch_size]]
                sample = apply_mask(batch, config.mask_prob, rng)
                masked = torch.as_tensor(sample.masked)
                mask = torch.as_tensor(sample.mask)
                log_probs = model(masked)
                loss = mlm_loss(log_probs, torch.as_tensor(batch), mask)
                if teacher is not None:
                    with torch.no_grad():
                        teacher_log_probs = teacher(masked)
                    loss = loss + config.distill_weight * distill_loss(
                        log_probs, teacher_log_probs, mask, config.temperature
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item()
                batches += 1
            losses.append(total / batches)
            epochs.set_postfix(loss=f"{losses[-1]:.4f}")
            logger.debug("%s epoch %d loss %.6f", desc, epoch + 1, losses[-1])
    model.eval()
    return losses


def train_iid(
    sets: Sequence[np.ndarray], config: ModelConfig, vocab_size: int, seed: int
) -> TrainResult:
    """Fresh model on the shuffled concatenation of every set."""
    tokens = np.concatenate([np.asarray(s, dtype=np.int64) for s in sets])
    model = init_model(config, vocab_size, seed)
    losses = _fit_stage(model, tokens, config, seed, stage=0, desc="iid")
    return TrainResult(model, [losses])


def train_finetune(
    initial: MaskedTransformer,
    sets: Sequence[np.ndarray],
    config: ModelConfig,
    seed: int,
) -> TrainResult:
    model = copy.deepcopy(initial)
    result = TrainResult(model)
    for stage, tokens in enumerate(sets):
        result.epoch_losses.append(
            _fit_stage(model, tokens, config, seed, stage, desc=f"finetune {stage + 1}")
        )
    return result


def _check_compatible(teacher: MaskedTransformer, config: ModelConfig, vocab_size: int):
    ours = config.model_dump(include=set(ARCHITECTURE_FIELDS))
    theirs = teacher.config.model_dump(include=set(ARCHITECTURE_FIELDS))
    if ours != theirs or teacher.vocab_size != vocab_size:
        raise ConfigMismatch(
            f"teacher architecture {theirs} (V={teacher.vocab_size}) does not match "
            f"student {ours} (V={vocab_size})"
        )


def train_distill(
    teacher: Optional[MaskedTransformer],
    sets: Sequence[np.ndarray],
    config: ModelConfig,
    vocab_size: int,
    seed: int,
) -> TrainResult:
    """Fresh student per set; the trained student teaches the next set.

    With ``teacher=None`` the first set is learned without a KL term.
    """
    if teacher is not None:
        _check_compatible(teacher, config, vocab_size)
    result = TrainResult(teacher)
    for stage, tokens in enumerate(sets):
        student = init_model(config, vocab_size, _stage_seed(seed, stage))
        result.epoch_losses.append(
            _fit_stage(student, tokens, config, seed, stage, teacher=teacher,
                       desc=f"distill {stage + 1}")
        )
        teacher = student
    result.model = teacher
    return result


@dataclass(frozen=True)
class StrategyRow:
    strategy: str
    stage: int
    last_train_year: int
    test_split: str
    test_year: int
    roc_auc: float


STRATEGIES = ("iid", "finetune", "distill")


def run_strategies(
    yearly_train: Sequence[tuple[int, np.ndarray]],
    yearly_test: Mapping[tuple[str, int], tuple[np.ndarray, np.ndarray]],
    config: ModelConfig,
    vocab_size: int,
    seed: int,
    strategies: Sequence[str] = STRATEGIES,
) -> list[StrategyRow]:
    """Trains each strategy stage by stage and scores every test year after each stage.

    ``yearly_test`` maps ``(split, year)`` to ``(tokens, is_anomaly)``.
    """
    unknown = set(strategies) - set(STRATEGIES)
    if unknown:
        raise InvalidConfig(f"unknown strategies: {sorted(unknown)}")
    rows = []
    for strategy in strategies:
        model: Optional[MaskedTransformer] = None
        for stage, (year, tokens) in enumerate(yearly_train):
            if strategy == "iid":
                model = init_model(config, vocab_size, _stage_seed(seed, stage))
                seen = np.concatenate([t for _, t in yearly_train[:stage + 1]])
                _fit_stage(model, seen, config, seed, stage, desc=f"iid {stage + 1}")
            elif strategy == "finetune":
                if model is None:
                    model = init_model(config, vocab_size, _stage_seed(seed, stage))
                _fit_stage(model, tokens, config, seed, stage, desc=f"finetune {stage + 1}")
            else:
                student = init_model(config, vocab_size, _stage_seed(seed, stage))
                _fit_stage(student, tokens, config, seed, stage, teacher=model,
                           desc=f"distill {stage + 1}")
                model = student
            for (split, test_year), (test_tokens, labels) in yearly_test.items():
                scores = score_sequences(
                    model, test_tokens, config.mask_prob, config.eval_mask_samplings,
                    seed, config.normalize_by_mask_count,
                )
                rows.append(StrategyRow(strategy, stage, year, split, test_year,
                                        roc_auc(scores, labels)))
            logger.info("%s stage %d (through %d) evaluated", strategy, stage + 1, year)
    return rows


def save_checkpoint(
    model: MaskedTransformer,
    vocab: Vocabulary,
    path: Union[str, Path],
    run_config: Optional[BaseModel] = None,
    seed: Optional[int] = None,
) -> Path:
    if model.vocab_size != vocab.size:
        raise VocabularyMismatch(
            f"model has {model.vocab_size} token rows, vocabulary has {vocab.size}"
        )
    blob = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.config.model_dump(mode="json"),
        "vocab_size": model.vocab_size,
        "vocab_hash": vocab.fingerprint,
        "config_hash": config_hash(run_config if run_config is not None else model.config),
        "run_config": run_config.model_dump(mode="json") if run_config is not None else None,
        "seed": seed,
        "state_dict": {k: v.detach().to(DTYPE).clone() for k, v in model.state_dict().items()},
    }
    buf = io.BytesIO()
    torch.save(blob, buf)
    return atomic_write(path, buf.getvalue())


def read_checkpoint(path: Union[str, Path]) -> dict:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if blob.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ArtifactMismatch(f"{path}: unsupported checkpoint format")
    return blob


def load_checkpoint(path: Union[str, Path], vocab: Vocabulary) -> MaskedTransformer:
    blob = read_checkpoint(path)
    if blob["vocab_hash"] != vocab.fingerprint:
        raise VocabularyMismatch(
            f"{path} was trained against a different vocabulary "
            f"({blob['vocab_hash'][:12]} != {vocab.fingerprint[:12]})"
        )
    config = ModelConfig.model_validate(blob["config"])
    model = MaskedTransformer(config, blob["vocab_size"]).to(DTYPE)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model
