"""Word-level tokenization, per-user shards and batch assembly."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numkernel import Rng
from .special import NUM_RESERVED, RESERVED_TOKENS, UNK_ID

log = logging.getLogger(__name__)

_WORD = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _WORD.findall(text.lower())


class Vocabulary:
    """Bijective token <-> id map; ids below ``NUM_RESERVED`` are the special tokens."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:NUM_RESERVED]) != RESERVED_TOKENS:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str) -> np.ndarray:
        return np.array([self.index.get(t, UNK_ID) for t in tokenize(text)], dtype=np.int64)

    def decode(self, ids) -> str:
        return " ".join(self.tokens[int(i)] for i in ids)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(text, max_size: int | None = None) -> Vocabulary:
    """Frequency-sorted vocabulary; ties broken alphabetically so the result is order independent.

    ``text`` may be a string or an iterable of strings. ``max_size`` counts
    regular tokens only; the reserved entries come on top.
    """
    texts = [text] if isinstance(text, str) else list(text)
    counts = Counter()
    for t in texts:
        counts.update(tokenize(t))
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if max_size is not None:
        ranked = ranked[:max_size]
    return Vocabulary(list(RESERVED_TOKENS) + [w for w, _ in ranked])


@dataclass(frozen=True)
class UserShard:
    user_id: int
    tokens: np.ndarray
    source: str

    def __len__(self):
        return len(self.tokens)


def read_documents(paths) -> list[tuple[str, str]]:
    """``(source label, text)`` pairs.

    A directory contributes one document per ``*.txt`` file (sorted by name); a
    single file is split into documents on blank lines.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    docs = []
    for p in map(Path, paths):
        if p.is_dir():
            for f in sorted(p.glob("*.txt")):
                docs.append((f.stem, f.read_text(encoding="utf-8")))
        else:
            chunks = re.split(r"\n\s*\n", p.read_text(encoding="utf-8"))
            docs.extend((f"{p.stem}:{i}", c) for i, c in enumerate(chunks) if c.strip())
    if not docs:
        raise ValueError(f"no documents found in {paths}")
    return docs


def make_shards(documents, vocab: Vocabulary) -> list[UserShard]:
    return [UserShard(i, vocab.encode(text), src) for i, (src, text) in enumerate(documents)]


def make_user_batches(shards, batch_size: int, seq_len: int, user_limit: int | None = None) -> list[np.ndarray]:
    """One ``(batch_size, seq_len)`` array per qualifying user, in shard order.

    Users owning fewer than ``batch_size * seq_len`` tokens are skipped; nothing
    is padded.
    """
    if batch_size < 1 or seq_len < 1:
        raise ValueError("batch_size and seq_len must be >= 1")
    need = batch_size * seq_len
    out = []
    for shard in shards:
        if len(shard) < need:
            continue
        out.append(np.asarray(shard.tokens[:need]).reshape(batch_size, seq_len).copy())
        if user_limit is not None and len(out) >= user_limit:
            break
    if not out:
        raise ValueError(f"no user owns the {need} tokens needed for B={batch_size}, S={seq_len}")
    return out


def random_token_batches(vocab_size: int, count: int, batch_size: int, seq_len: int, rng: Rng) -> list[np.ndarray]:
    """``count`` batches of uniform non-reserved token ids."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if vocab_size <= NUM_RESERVED:
        raise ValueError("vocabulary has no regular tokens")
    return [rng.integers(NUM_RESERVED, vocab_size, size=(batch_size, seq_len)) for _ in range(count)]


def mask_positions(shape, rate: float, rng: Rng) -> np.ndarray:
    """Random MLM mask with at least one masked position per sequence."""
    mask = rng.uniform(size=shape) < rate
    B, S = shape
    empty = ~mask.any(1)
    if empty.any():
        mask[np.flatnonzero(empty), rng.integers(0, S, size=int(empty.sum()))] = True
    return mask


@dataclass(frozen=True)
class MeasurementStats:
    mean: float
    std: float
    sample_count: int

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"measurement std must be positive, got {self.std}")


def measurement_samples(m, params, batches, masks=None) -> np.ndarray:
    from .model import forward_features

    m = np.asarray(m, dtype=np.float64)
    if m.shape != (params.config.d_model,):
        raise ValueError(f"measurement vector must have length {params.config.d_model}")
    vals = []
    for i, batch in enumerate(batches):
        feats = forward_features(params, batch, None if masks is None else masks[i])
        vals.append((feats["ffn_inputs"][0] @ m).ravel())
    return np.concatenate(vals)


def estimate_measurement_stats(m, params, batches, masks=None) -> MeasurementStats:
    """Mean and std of ``<m, u>`` over the first block's FFN inputs ``u``."""
    vals = measurement_samples(m, params, batches, masks)
    if vals.size < 100:
        raise ValueError(f"need at least 100 measurement samples, got {vals.size}")
    std = float(vals.std())
    if not std > 0:
        raise ValueError("measurement distribution is degenerate (zero spread)")
    return MeasurementStats(float(vals.mean()), std, int(vals.size))
