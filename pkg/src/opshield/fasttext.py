"""Subword skip-gram embeddings with negative sampling.

A token's input representation is the mean of its own row (when it is in the
vocabulary) and one hashed row per character n-gram of ``<token>``. Context
tokens are scored against a separate output table, as in FastText.

Randomness comes from xoshiro256** seeded through splitmix64, implemented
here so saved models are bit-identical across platforms for a fixed seed.
"""

from __future__ import annotations

import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numba
import numpy as np

from .errors import EmptyCorpus, EmptySequence, FormatError, InvalidConfig

__all__ = [
    "SubwordConfig",
    "EmbeddingModel",
    "char_ngrams",
    "hash_ngram",
    "token_vector",
    "doc_vector",
    "doc_vectors",
    "train_skipgram",
    "init_model",
    "pair_loss_and_grads",
    "save_vec",
    "load_vec",
    "save_buckets",
    "load_buckets",
    "load_model",
]

FNV_OFFSET = 2166136261
FNV_PRIME = 16777619
BUCKET_MAGIC = b"FTBK"

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class SubwordConfig:
    minn: int = 3
    maxn: int = 5
    buckets: int = 100_000
    dim: int = 64
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    lr: float = 0.05
    seed: int = 42

    def __post_init__(self):
        if not 2 <= self.minn <= self.maxn:
            raise InvalidConfig("need 2 <= minn <= maxn")
        if self.buckets < 1 or self.dim < 1:
            raise InvalidConfig("buckets and dim must be >= 1")
        if self.window < 1 or self.negatives < 0 or self.epochs < 0:
            raise InvalidConfig("window >= 1, negatives >= 0, epochs >= 0 required")
        if not self.lr > 0:
            raise InvalidConfig("lr must be positive")


@dataclass
class EmbeddingModel:
    """Vocabulary plus input/output tables.

    ``input_vectors`` stacks the vocabulary rows on top of the hashed n-gram
    bucket rows. ``output_vectors`` is None for models restored from a
    ``.vec``/``FTBK`` pair, which only carry what inference needs.
    """

    vocab: dict
    counts: np.ndarray
    input_vectors: np.ndarray
    output_vectors: Optional[np.ndarray]
    config: SubwordConfig
    loss_history: list = field(default_factory=list)
    _rows: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def dim(self) -> int:
        return self.input_vectors.shape[1]

    def rows_for(self, token: str) -> np.ndarray:
        rows = self._rows.get(token)
        if rows is None:
            rows = _subword_rows(token, self.vocab, self.config)
            self._rows[token] = rows
        return rows


def char_ngrams(token: str, minn: int, maxn: int) -> list[str]:
    """Character n-grams of ``<token>`` by start position then length, plus ``<token>`` itself."""
    wrapped = f"<{token}>"
    n = len(wrapped)
    grams = []
    for i in range(n):
        for length in range(minn, maxn + 1):
            if i + length > n:
                break
            if length == n:
                continue  # the whole wrapped token is appended once below
            grams.append(wrapped[i : i + length])
    grams.append(wrapped)
    return grams


def hash_ngram(ngram: str, buckets: int) -> int:
    """FNV-1a (32 bit) over the UTF-8 bytes, reduced mod ``buckets``."""
    h = FNV_OFFSET
    for b in ngram.encode("utf-8"):
        h = ((h ^ b) * FNV_PRIME) & 0xFFFFFFFF
    return h % buckets


def _subword_rows(token: str, vocab: dict, config: SubwordConfig) -> np.ndarray:
    rows = []
    idx = vocab.get(token)
    if idx is not None:
        rows.append(idx)
    offset = len(vocab)
    rows.extend(offset + hash_ngram(g, config.buckets) for g in char_ngrams(token, config.minn, config.maxn))
    return np.asarray(rows, dtype=np.int64)


def token_vector(model: EmbeddingModel, token: str) -> np.ndarray:
    """Mean of the token's own row (if known) and its n-gram bucket rows."""
    rows = model.rows_for(token)
    return model.input_vectors[rows].mean(axis=0)


def doc_vector(model: EmbeddingModel, tokens: Sequence[str]) -> np.ndarray:
    if len(tokens) == 0:
        raise EmptySequence("cannot pool an empty token list")
    counts = Counter(tokens)
    acc = np.zeros(model.dim, dtype=np.float64)
    for tok in sorted(counts):
        acc += counts[tok] * token_vector(model, tok)
    return acc / len(tokens)


def doc_vectors(model: EmbeddingModel, docs: Iterable[Sequence[str]]) -> np.ndarray:
    return np.stack([doc_vector(model, d) for d in docs])


# --- PRNG -------------------------------------------------------------------

def _splitmix_state(seed: int) -> np.ndarray:
    x = seed & _MASK64
    state = []
    for _ in range(4):
        x = (x + 0x9E3779B97F4A7C15) & _MASK64
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        state.append(z ^ (z >> 31))
    return np.array(state, dtype=np.uint64)


@numba.njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@numba.njit(cache=True)
def _next_u64(s):
    result = _rotl(s[1] * np.uint64(5), 7) * np.uint64(9)
    t = s[1] << np.uint64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


@numba.njit(cache=True)
def _uniform(s):
    return np.float64(_next_u64(s) >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True)
def _fill_uniform(out, scale, s):
    flat = out.reshape(-1)
    for i in range(flat.size):
        flat[i] = (2.0 * _uniform(s) - 1.0) * scale


# --- training -----------------------------------------------------------------

@numba.njit(cache=True)
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@numba.njit(cache=True)
def _train_kernel(inp, out, row_ptr, row_idx, corpus, sent_ptr, neg_cdf,
                  window, negatives, epochs, lr0, state, losses):
    dim = inp.shape[1]
    vocab_size = out.shape[0]
    n_tokens = corpus.shape[0]
    total = epochs * n_tokens
    processed = 0
    h = np.empty(dim)
    grad = np.empty(dim)
    for ep in range(epochs):
        loss_sum = 0.0
        n_pairs = 0
        for s in range(sent_ptr.shape[0] - 1):
            start = sent_ptr[s]
            end = sent_ptr[s + 1]
            for i in range(start, end):
                lr = lr0 * (1.0 - processed / total)
                processed += 1
                w = corpus[i]
                r0 = row_ptr[w]
                r1 = row_ptr[w + 1]
                nr = r1 - r0
                boundary = 1 + int(_uniform(state) * window)
                for c in range(-boundary, boundary + 1):
                    j = i + c
                    if c == 0 or j < start or j >= end:
                        continue
                    h[:] = 0.0
                    for r in range(r0, r1):
                        h += inp[row_idx[r]]
                    h /= nr
                    grad[:] = 0.0
                    pair_loss = 0.0
                    for k in range(negatives + 1):
                        if k == 0:
                            target = corpus[j]
                            label = 1.0
                        else:
                            if vocab_size < 2:
                                break
                            target = corpus[j]
                            neg = target
                            while neg == target:
                                neg = np.searchsorted(neg_cdf, _uniform(state), side="right")
                                if neg >= vocab_size:
                                    neg = vocab_size - 1
                            target = neg
                            label = 0.0
                        dot = 0.0
                        for d in range(dim):
                            dot += out[target, d] * h[d]
                        p = _sigmoid(dot)
                        if label > 0.5:
                            pair_loss -= math.log(max(p, 1e-12))
                        else:
                            pair_loss -= math.log(max(1.0 - p, 1e-12))
                        alpha = lr * (label - p)
                        for d in range(dim):
                            grad[d] += alpha * out[target, d]
                            out[target, d] += alpha * h[d]
                    scale = 1.0 / nr
                    for r in range(r0, r1):
                        row = row_idx[r]
                        for d in range(dim):
                            inp[row, d] += grad[d] * scale
                    loss_sum += pair_loss
                    n_pairs += 1
        losses[ep] = loss_sum / n_pairs if n_pairs > 0 else 0.0


def _build_vocab(corpus: Sequence[Sequence[str]]) -> tuple[dict, np.ndarray]:
    counts = Counter(tok for seq in corpus for tok in seq)
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    vocab = {tok: i for i, (tok, _) in enumerate(ordered)}
    return vocab, np.array([c for _, c in ordered], dtype=np.int64)


def _as_token_lists(corpus) -> list[list[str]]:
    return [list(getattr(seq, "tokens", seq)) for seq in corpus]


def init_model(corpus, config: SubwordConfig = SubwordConfig()) -> EmbeddingModel:
    """Vocabulary and seeded initial tables; what ``train_skipgram`` returns for ``epochs=0``."""
    docs = _as_token_lists(corpus)
    if not docs or not any(docs):
        raise EmptyCorpus("corpus has no tokens")
    vocab, counts = _build_vocab(docs)
    dim = config.dim
    inp = np.empty((len(vocab) + config.buckets, dim), dtype=np.float64)
    state = _splitmix_state(config.seed)
    _fill_uniform(inp, 1.0 / dim, state)
    out = np.zeros((len(vocab), dim), dtype=np.float64)
    return EmbeddingModel(vocab, counts, inp, out, config)


def train_skipgram(corpus, config: SubwordConfig = SubwordConfig()) -> EmbeddingModel:
    """Train skip-gram with negative sampling over token sequences.

    ``corpus`` holds TokenSequence objects or plain token lists. Learning rate
    decays linearly to zero over ``epochs`` passes; the per-epoch mean
    negative-sampling loss lands in ``model.loss_history``.
    """
    model = init_model(corpus, config)
    if config.epochs == 0:
        return model
    docs = _as_token_lists(corpus)
    vocab = model.vocab

    row_lists = [model.rows_for(tok) for tok in sorted(vocab, key=vocab.get)]
    row_ptr = np.zeros(len(row_lists) + 1, dtype=np.int64)
    row_ptr[1:] = np.cumsum([len(r) for r in row_lists])
    row_idx = np.concatenate(row_lists)

    flat = np.array([vocab[t] for d in docs for t in d], dtype=np.int64)
    sent_ptr = np.zeros(len(docs) + 1, dtype=np.int64)
    sent_ptr[1:] = np.cumsum([len(d) for d in docs])

    weights = model.counts.astype(np.float64) ** 0.75
    neg_cdf = np.cumsum(weights / weights.sum())

    # the init consumed the first stream; training draws from a second one
    state = _splitmix_state(config.seed ^ 0x5DEECE66D)
    losses = np.zeros(config.epochs)
    _train_kernel(model.input_vectors, model.output_vectors, row_ptr, row_idx, flat, sent_ptr,
                  neg_cdf, config.window, config.negatives, config.epochs, config.lr, state, losses)
    model.loss_history = [float(x) for x in losses]
    return model


def pair_loss_and_grads(inp, out, center_rows, target, negatives):
    """Loss of one (center, context) pair and its exact gradients.

    Returns ``(loss, d_inp, d_out)`` with gradients shaped like ``inp`` and
    ``out``. Used to check the training kernel's update rule.
    """
    center_rows = np.asarray(center_rows)
    h = inp[center_rows].mean(axis=0)
    d_h = np.zeros_like(h)
    d_out = np.zeros_like(out)
    loss = 0.0
    for t, label in [(target, 1.0)] + [(n, 0.0) for n in negatives]:
        score = out[t] @ h
        p = 1.0 / (1.0 + np.exp(-score))
        loss -= np.log(p) if label else np.log1p(-p)
        d_h += (p - label) * out[t]
        d_out[t] += (p - label) * h
    d_inp = np.zeros_like(inp)
    np.add.at(d_inp, center_rows, d_h / len(center_rows))
    return loss, d_inp, d_out


# --- persistence ------------------------------------------------------------------

_VEC_ESC = {"\\": "\\\\", " ": "\\s", "\t": "\\t", "\n": "\\n", "\r": "\\r"}
_VEC_UNESC = {"\\": "\\", "s": " ", "t": "\t", "n": "\n", "r": "\r"}


def _escape_token(tok: str) -> str:
    return "".join(_VEC_ESC.get(c, c) for c in tok)


def _unescape_token(tok: str, line_no: int) -> str:
    out = []
    it = iter(tok)
    for c in it:
        if c == "\\":
            nxt = next(it, None)
            if nxt not in _VEC_UNESC:
                raise FormatError(line_no, "bad escape in token")
            out.append(_VEC_UNESC[nxt])
        else:
            out.append(c)
    return "".join(out)


def save_vec(model: EmbeddingModel) -> str:
    """Vocabulary rows as text: ``<count> <dim>`` then ``token v1 .. vdim``.

    Whitespace and backslashes inside tokens are backslash-escaped (``\\s`` for space).
    """
    dim = model.dim
    lines = [f"{model.vocab_size} {dim}"]
    for tok, idx in sorted(model.vocab.items(), key=lambda kv: kv[1]):
        vals = " ".join(f"{v:.6f}" for v in model.input_vectors[idx])
        lines.append(f"{_escape_token(tok)} {vals}")
    return "\n".join(lines) + "\n"


def load_vec(text: str) -> tuple[dict, np.ndarray]:
    """Parse ``.vec`` text into ``(vocab, vectors)``."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError(1, "missing header")
    head = lines[0].split(" ")
    if len(head) != 2 or not all(h.isdigit() for h in head):
        raise FormatError(1, "header must be '<count> <dim>'")
    count, dim = int(head[0]), int(head[1])
    if len(lines) - 1 != count:
        raise FormatError(len(lines), f"expected {count} rows, found {len(lines) - 1}")
    vocab = {}
    vectors = np.zeros((count, dim), dtype=np.float64)
    for i, line in enumerate(lines[1:]):
        parts = line.split(" ")
        if len(parts) != dim + 1:
            raise FormatError(i + 2, f"expected {dim} values, found {len(parts) - 1}")
        tok = _unescape_token(parts[0], i + 2)
        if tok in vocab:
            raise FormatError(i + 2, f"duplicate token {tok!r}")
        try:
            vectors[i] = [float(v) for v in parts[1:]]
        except ValueError:
            raise FormatError(i + 2, "non-numeric vector value") from None
        vocab[tok] = i
    return vocab, vectors


def save_buckets(model: EmbeddingModel) -> bytes:
    buckets = model.input_vectors[model.vocab_size :]
    header = BUCKET_MAGIC + struct.pack("<III", buckets.shape[0], buckets.shape[1], 0)
    return header + np.ascontiguousarray(buckets, dtype="<f4").tobytes()


def load_buckets(blob: bytes) -> np.ndarray:
    if len(blob) < 16 or blob[:4] != BUCKET_MAGIC:
        raise FormatError(0, "not an FTBK bucket file")
    n, dim, _ = struct.unpack("<III", blob[4:16])
    body = blob[16:]
    if len(body) != 4 * n * dim:
        raise FormatError(0, f"bucket payload size {len(body)} != {4 * n * dim}")
    return np.frombuffer(body, dtype="<f4").reshape(n, dim).astype(np.float64)


def load_model(vec_text: str, bucket_blob: bytes, config: SubwordConfig) -> EmbeddingModel:
    """Rebuild an inference-only model from its ``.vec`` text and ``FTBK`` sidecar."""
    vocab, words = load_vec(vec_text)
    buckets = load_buckets(bucket_blob)
    if buckets.shape != (config.buckets, words.shape[1]) and len(vocab):
        raise FormatError(0, "bucket table does not match config/vec dimensions")
    if buckets.shape[0] != config.buckets:
        raise FormatError(0, "bucket count does not match config")
    inp = np.vstack([words.reshape(-1, buckets.shape[1]), buckets])
    return EmbeddingModel(vocab, np.zeros(len(vocab), dtype=np.int64), inp, None, config)
