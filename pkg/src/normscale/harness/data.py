"""Byte-level corpus ingestion and a synthetic corpus generator for desk runs."""

from pathlib import Path

import numpy as np

from ..linalg import make_rng

EOS = 256
VOCAB_SIZE = 257


class CorpusExhausted(ValueError):
    pass


def encode_bytes(raw: bytes) -> np.ndarray:
    """Bytes map to token ids 0-255; a single EOS (256) closes the document."""
    return np.append(np.frombuffer(raw, dtype=np.uint8).astype(np.int64), EOS)


class TokenWindows:
    """Non-overlapping ``context``-token windows visited once in a seeded order."""

    def __init__(self, tokens: np.ndarray, context: int, seed: int = 0):
        if context < 2:
            raise ValueError("context must be at least 2")
        n = len(tokens) // context
        self.context = context
        self.windows = tokens[: n * context].reshape(n, context)
        self.order = make_rng(seed).permutation(n)

    def __len__(self):
        return len(self.windows)

    @property
    def n_tokens(self) -> int:
        return self.windows.size

    def require(self, horizon_tokens: int):
        if horizon_tokens > self.n_tokens:
            missing = horizon_tokens - self.n_tokens
            raise CorpusExhausted(
                f"corpus holds {self.n_tokens} tokens in full windows but the horizon needs "
                f"{horizon_tokens}; add at least {missing} more bytes"
            )

    def batch(self, step: int, batch_size: int) -> np.ndarray:
        lo, hi = step * batch_size, (step + 1) * batch_size
        if hi > len(self.order):
            self.require(hi * self.context)
        return self.windows[self.order[lo:hi]]


def ingest_corpus(path, context: int, seed: int = 0) -> TokenWindows:
    raw = Path(path).read_bytes()
    if not raw:
        raise ValueError(f"{path}: corpus is empty")
    return TokenWindows(encode_bytes(raw), context, seed)


_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "th", "tr", "st"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou", "ee"]


def write_synthetic_corpus(path, n_bytes: int, seed: int = 0, n_words: int = 400) -> Path:
    """Write ``n_bytes`` of pseudo-English with Zipfian words and bigram structure.

    The text has enough regularity (spelling, word-order statistics,
    punctuation) for a tiny model to make steady progress.
    """
    rng = make_rng(seed)
    words = []
    seen = set()
    while len(words) < n_words:
        syl = rng.integers(1, 4)
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(syl))
        if w not in seen:
            seen.add(w)
            words.append(w)
    zipf = 1.0 / np.arange(1, n_words + 1)
    zipf /= zipf.sum()
    # each word prefers a small set of successors
    successors = rng.integers(0, n_words, size=(n_words, 8))
    out = []
    size = 0
    cur = 0
    sentence_len = 0
    while size < n_bytes:
        if rng.random() < 0.7:
            cur = int(successors[cur, rng.integers(8)])
        else:
            cur = int(rng.choice(n_words, p=zipf))
        w = words[cur]
        if sentence_len == 0:
            w = w.capitalize()
        sentence_len += 1
        if sentence_len >= 4 and rng.random() < 0.15:
            w += "." if rng.random() < 0.8 else "?"
            w += "\n" if rng.random() < 0.2 else " "
            sentence_len = 0
        else:
            w += " "
        out.append(w)
        size += len(w)
    text = "".join(out).encode()[:n_bytes]
    path = Path(path)
    path.write_bytes(text)
    return path
