"""Token embedding pretraining (CBOW with negative sampling) and pooling.

The trained table feeds every downstream model: a record's per-window
representation starts as the arithmetic mean of its token embeddings. Row 0
is the padding token and stays all-zero, so padded positions contribute
nothing to pooled vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .cohort import Cohort, ModalSequence
from .errors import ConfigError, DataFormatError

_MAGIC = b"BFFE0001"
_NEG_TABLE_SIZE = 1 << 17


@dataclass
class EmbeddingTable:
    table: np.ndarray  # (vocab, dim) float64; row 0 is the frozen padding row
    output_weights: np.ndarray | None = None  # CBOW output matrix, not persisted
    epoch_losses: list[float] = field(default_factory=list)

    @property
    def vocab_size(self) -> int:
        return int(self.table.shape[0])

    @property
    def dim(self) -> int:
        return int(self.table.shape[1])

    def cbow_score(self, context_ids, center: int) -> float:
        """sigmoid(mean(context embeddings) . output_weights[center])"""
        if self.output_weights is None:
            raise ConfigError("table has no CBOW output weights (loaded from disk?)")
        h = self.table[np.asarray(context_ids)].mean(axis=0)
        x = float(h @ self.output_weights[center])
        return float(1.0 / (1.0 + np.exp(-x)))


def _init_input_embeddings(vocab_size: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    emb = rng.uniform(-0.5 / dim, 0.5 / dim, size=(vocab_size, dim))
    emb[0] = 0.0
    return emb


def _negative_table(counts: np.ndarray) -> np.ndarray:
    """Unigram^0.75 sampling table; padding id 0 is never drawn."""
    weights = counts.astype(np.float64) ** 0.75
    weights[0] = 0.0
    total = weights.sum()
    if total <= 0:
        raise ConfigError("cannot build negative-sampling table from an empty corpus")
    table = np.zeros(_NEG_TABLE_SIZE, dtype=np.int64)
    cum = np.cumsum(weights) / total
    grid = (np.arange(_NEG_TABLE_SIZE) + 0.5) / _NEG_TABLE_SIZE
    table[:] = np.searchsorted(cum, grid, side="right")
    return np.minimum(table, counts.shape[0] - 1)


def train_cbow(corpus, vocab_size: int, window: int = 5, dim: int = 64,
               epochs: int = 3, negatives: int = 5, lr: float = 0.025,
               lr_min: float = 1e-4, seed: int = 0) -> EmbeddingTable:
    """Train CBOW embeddings over an iterable of token-id sequences.

    The corpus must exclude any downstream test split to avoid leakage;
    callers pass training-split sequences only.
    """
    sequences = [np.asarray(s, dtype=np.int64) for s in corpus]
    if not sequences:
        raise ConfigError("empty corpus")
    if vocab_size < 2:
        raise ConfigError("vocabulary must have at least 2 entries")
    if window < 1:
        raise ConfigError("window must be at least 1")
    if negatives < 1:
        raise ConfigError("need at least 1 negative sample")

    tokens = np.concatenate(sequences)
    if tokens.size == 0:
        raise ConfigError("empty corpus")
    if tokens.min() < 1 or tokens.max() >= vocab_size:
        raise DataFormatError("corpus token ids must lie in [1, vocab_size)")
    offsets = np.zeros(len(sequences) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([s.size for s in sequences])

    emb_in = _init_input_embeddings(vocab_size, dim, seed)
    emb_out = np.zeros((vocab_size, dim), dtype=np.float64)
    result = EmbeddingTable(table=emb_in, output_weights=emb_out)
    if epochs == 0:
        return result

    counts = np.bincount(tokens, minlength=vocab_size)
    neg_table = _negative_table(counts)
    rng = np.random.default_rng(seed + 1)
    n_pos = tokens.shape[0]
    for epoch in range(epochs):
        lr0 = lr + (lr_min - lr) * (epoch / epochs)
        lr1 = lr + (lr_min - lr) * ((epoch + 1) / epochs)
        win_draws = rng.random(n_pos)
        neg_draws = rng.random((n_pos, negatives))
        loss, trained = kernels.cbow_epoch(
            emb_in, emb_out, tokens, offsets, window, negatives,
            neg_table, win_draws, neg_draws, lr0, lr1)
        result.epoch_losses.append(loss / max(trained, 1))
    emb_in[0] = 0.0
    return result


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------


def mean_pool(sequence, table: EmbeddingTable, token_mask=None) -> np.ndarray:
    """Mean of the embeddings of valid (non-padding) tokens."""
    ids = np.asarray(sequence.token_ids if isinstance(sequence, ModalSequence) else sequence,
                     dtype=np.int64)
    if token_mask is None:
        token_mask = ids != 0
    else:
        token_mask = np.asarray(token_mask, dtype=bool)
    if not token_mask.any():
        raise DataFormatError("mean_pool: sequence has no valid tokens; "
                              "route absent modalities through the observed mask")
    return table.table[ids[token_mask]].mean(axis=0)


def pool_batch(token_ids, token_mask, table: EmbeddingTable):
    """Pooled vectors for a padded batch: (B, m, dim) plus slot validity.

    Slots with no valid token (absent modalities) pool to zero and are
    reported invalid; callers must mask them out of any loss.
    """
    b = token_ids[0].shape[0]
    m = len(token_ids)
    pooled = np.zeros((b, m, table.dim), dtype=np.float64)
    valid = np.zeros((b, m), dtype=bool)
    for j in range(m):
        emb = table.table[token_ids[j]]  # (B, L, dim); padding rows are zero
        counts = token_mask[j].sum(axis=1)
        has = counts > 0
        # padding embeddings are zero so a plain sum ignores them
        sums = emb.sum(axis=1)
        pooled[has, j] = sums[has] / counts[has, None]
        valid[:, j] = has
    return pooled, valid


def pool_cohort(cohort: Cohort, table: EmbeddingTable, chunk: int = 2048):
    """Pooled vectors for every (record, modality) slot of a cohort.

    Chunked so the intermediate (chunk, max_len, dim) lookup stays small.
    """
    from .cohort import _build_batch  # deferred: cohort does not import us

    n = len(cohort)
    m = cohort.modality_count
    pooled = np.zeros((n, m, table.dim), dtype=np.float64)
    observed = np.zeros((n, m), dtype=bool)
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        batch = _build_batch(cohort, idx)
        p, v = pool_batch(batch.token_ids, batch.token_mask, table)
        pooled[idx] = p
        observed[idx] = v
    return pooled, observed


# ---------------------------------------------------------------------------
# Persistence: magic, int64 vocab, int64 dim, row-major little-endian float64
# ---------------------------------------------------------------------------


def save_table(table: EmbeddingTable, path):
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        np.array([table.vocab_size, table.dim], dtype="<i8").tofile(fh)
        np.ascontiguousarray(table.table, dtype="<f8").tofile(fh)


def load_table(path) -> EmbeddingTable:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(_MAGIC) + 16 or raw[:len(_MAGIC)] != _MAGIC:
        raise DataFormatError(f"{path}: not an embedding table file")
    header = np.frombuffer(raw, dtype="<i8", count=2, offset=len(_MAGIC))
    vocab, dim = int(header[0]), int(header[1])
    expected = len(_MAGIC) + 16 + vocab * dim * 8
    if len(raw) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes for a "
                              f"{vocab}x{dim} table, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f8", offset=len(_MAGIC) + 16).reshape(vocab, dim)
    if not np.all(np.isfinite(data)):
        raise DataFormatError(f"{path}: table contains non-finite entries")
    if np.any(data[0] != 0.0):
        raise DataFormatError(f"{path}: padding row (row 0) must be all zeros")
    return EmbeddingTable(table=data.astype(np.float64, copy=True))
