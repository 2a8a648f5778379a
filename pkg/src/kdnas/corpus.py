"""Deterministic token streams for desk-scale distillation."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .exceptions import CorpusError, InputError

PAD_ID = 0
HELDOUT_FRACTION = 0.05
MASK_PROB = 0.15


@dataclass(frozen=True)
class SyntheticSpec:
    """Markov-chain token generator; each token depends on its predecessor.

    The transition table is sparse (``branching`` successors per token, Zipf
    weighted) so the stream has learnable structure.
    """

    n_sequences: int = 2000
    branching: int = 8
    zipf_a: float = 1.2


@dataclass(frozen=True, eq=False)
class BatchStream:
    sequences: np.ndarray
    vocab_size: int
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        seqs = np.asarray(self.sequences, dtype=np.int64)
        if seqs.ndim != 2:
            raise InputError(f"sequences must be 2-D, got shape {seqs.shape}")
        if seqs.size and (seqs.min() < 0 or seqs.max() >= self.vocab_size):
            raise InputError("token id outside vocabulary")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        seqs.setflags(write=False)
        object.__setattr__(self, "sequences", seqs)

    def __len__(self):
        return self.sequences.shape[0]

    @property
    def seq_len(self):
        return self.sequences.shape[1]

    @property
    def n_batches(self):
        return math.ceil(len(self) / self.batch_size)

    def order(self, epoch):
        return np.random.default_rng([self.seed, epoch]).permutation(len(self))

    def index_batches(self, epoch=0, shuffle=True):
        idx = self.order(epoch) if shuffle else np.arange(len(self))
        for start in range(0, len(idx), self.batch_size):
            yield idx[start:start + self.batch_size]

    def batches(self, epoch=0, shuffle=True):
        for idx in self.index_batches(epoch, shuffle):
            yield self.sequences[idx]

    def subset(self, indices):
        return replace(self, sequences=self.sequences[np.asarray(indices, dtype=np.int64)])

    def with_batch_size(self, batch_size):
        return replace(self, batch_size=batch_size)


def _synthetic(spec, vocab_size, seq_len, seed):
    rng = np.random.default_rng(seed)
    real = np.arange(1, vocab_size)
    k = min(spec.branching, real.size)
    successors = np.stack([rng.choice(real, size=k, replace=False) for _ in range(vocab_size)])
    weights = 1.0 / np.arange(1, k + 1) ** spec.zipf_a
    weights /= weights.sum()
    seqs = np.empty((spec.n_sequences, seq_len), dtype=np.int64)
    seqs[:, 0] = rng.choice(real, size=spec.n_sequences)
    for t in range(1, seq_len):
        picks = rng.choice(k, size=spec.n_sequences, p=weights)
        seqs[:, t] = successors[seqs[:, t - 1], picks]
    return seqs


def _byte_tokens(path, vocab_size, seq_len):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc
    rows = []
    for line in text.splitlines():
        data = line.strip().encode("utf-8")
        if not data:
            continue
        ids = 1 + np.frombuffer(data, dtype=np.uint8).astype(np.int64) % (vocab_size - 1)
        for start in range(0, ids.size, seq_len):
            chunk = ids[start:start + seq_len]
            row = np.full(seq_len, PAD_ID, dtype=np.int64)
            row[:chunk.size] = chunk
            rows.append(row)
    if not rows:
        raise CorpusError(f"corpus {path} is empty")
    return np.stack(rows)


def load_corpus(source, vocab_size=512, seq_len=32, seed=0, batch_size=32):
    """Build a :class:`BatchStream` from a text file or a :class:`SyntheticSpec`.

    Text is tokenised byte-wise (one document per line), ids shifted past the
    padding id 0 and folded into the vocabulary; each line is chunked into
    ``seq_len`` windows with the final window zero-padded.
    """
    if vocab_size < 2:
        raise InputError("vocab_size must be >= 2")
    if isinstance(source, SyntheticSpec):
        seqs = _synthetic(source, vocab_size, seq_len, seed)
    elif isinstance(source, dict):
        seqs = _synthetic(SyntheticSpec(**source), vocab_size, seq_len, seed)
    else:
        seqs = _byte_tokens(source, vocab_size, seq_len)
    return BatchStream(seqs, vocab_size, batch_size, seed)


def split_heldout(stream, fraction=HELDOUT_FRACTION, seed=None):
    """Reserve ``ceil(fraction * n)`` sequences for evaluation.

    Both parts keep the original sequence order.
    """
    if not 0 < fraction < 1:
        raise InputError(f"held-out fraction must be in (0, 1), got {fraction}")
    n = len(stream)
    n_held = max(1, math.ceil(fraction * n))
    if n_held >= n:
        raise InputError(f"corpus of {n} sequences is too small to hold out {n_held}")
    perm = np.random.default_rng([stream.seed if seed is None else seed, 0x4E1D]).permutation(n)
    held = np.sort(perm[:n_held])
    train = np.sort(perm[n_held:])
    return stream.subset(train), stream.subset(held)


def proxy_subset(stream, fraction, seed):
    """Deterministic ``ceil(fraction * n)``-sequence subset, original order kept.

    Subsets for different fractions under one seed are nested.
    """
    if not 0 < fraction <= 1:
        raise InputError(f"proxy fraction must be in (0, 1], got {fraction}")
    n = len(stream)
    k = math.ceil(round(fraction * n, 9))
    if k == 0:
        raise InputError("proxy subset is empty")
    perm = np.random.default_rng([seed, 0x9A0C]).permutation(n)
    return stream.subset(np.sort(perm[:k]))


def mask_tokens(batch, vocab_size, rng, prob=MASK_PROB, mask_id=None):
    """Replace a random ``prob`` share of non-pad tokens with ``mask_id``.

    Returns ``(corrupted, selected)`` where ``selected`` marks the positions
    whose original id is the prediction target.
    """
    mask_id = vocab_size - 1 if mask_id is None else mask_id
    batch = np.asarray(batch)
    selected = (rng.random(batch.shape) < prob) & (batch != PAD_ID)
    corrupted = np.where(selected, mask_id, batch)
    return corrupted, selected
