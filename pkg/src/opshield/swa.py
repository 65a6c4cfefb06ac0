"""Transformer encoder with self-attention confined to overlapping windows.

The token sequence is cut into windows of ``W`` tokens starting every ``Sr``
tokens. Each window runs through the full block stack on its own, so the
score matrices are at most ``W x W`` no matter how long the input is.
Positions are global sinusoids, which keeps a token's encoding consistent in
every window that contains it. The document vector averages token rows
within each window and then averages the windows.

Backpropagation is written out by hand; see ``encoder_backward``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError, InvalidConfig, SequenceTooLong, TokenOutOfRange
from .tensorio import format_kv, pack_block, pack_tensor, parse_kv, unpack_block, unpack_tensor

__all__ = [
    "EncoderConfig",
    "WindowLayout",
    "window_layout",
    "attention",
    "softmax",
    "gelu",
    "positional_table",
    "param_names",
    "init_params",
    "encode",
    "pool_global",
    "encoder_forward",
    "encoder_forward_batch",
    "encoder_backward",
    "encoder_grad",
    "save_encoder",
    "load_encoder",
]

LN_EPS = 1e-5
SWAE_MAGIC = b"SWAE"
SWAE_VERSION = 1
POOL_MODES = ("window_mean", "token_mean")


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ff_dim: int = 128
    max_len: int = 2048
    W: int = 128
    Sr: int = 64
    dropout: float = 0.1
    pool: str = "window_mean"

    def __post_init__(self):
        if self.vocab_size < 1 or self.d_model < 1 or self.n_heads < 1:
            raise InvalidConfig("vocab_size, d_model and n_heads must be positive")
        if self.d_model % self.n_heads:
            raise InvalidConfig("d_model must be divisible by n_heads")
        if self.n_layers < 0 or self.ff_dim < 1 or self.max_len < 1:
            raise InvalidConfig("bad layer/ff/max_len sizes")
        if self.W < 1 or not self.Sr < self.W or self.Sr < 1:
            raise InvalidConfig(f"need 1 <= Sr < W, got W={self.W} Sr={self.Sr}")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig("dropout must lie in [0, 1)")
        if self.pool not in POOL_MODES:
            raise InvalidConfig(f"pool must be one of {POOL_MODES}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_kv(self) -> dict:
        return asdict(self)

    @classmethod
    def from_kv(cls, kv: dict) -> "EncoderConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            kwargs[f.name] = raw if f.type == "str" else (float(raw) if f.type == "float" else int(raw))
        return cls(**kwargs)


@dataclass(frozen=True)
class WindowLayout:
    starts: tuple
    W: int
    seq_len: int

    @property
    def spans(self) -> list[tuple[int, int]]:
        return [(s, min(s + self.W, self.seq_len)) for s in self.starts]

    def __len__(self):
        return len(self.starts)


def window_layout(seq_len: int, W: int, Sr: int) -> WindowLayout:
    if seq_len < 1:
        raise InvalidConfig("seq_len must be >= 1")
    if W < 1 or Sr < 1 or Sr >= W:
        raise InvalidConfig(f"need 1 <= Sr < W, got W={W} Sr={Sr}")
    if seq_len <= W:
        return WindowLayout((0,), W, seq_len)
    last = -(-(seq_len - W) // Sr)
    return WindowLayout(tuple(k * Sr for k in range(last + 1)), W, seq_len)


# --- primitives ---------------------------------------------------------------

def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Scaled dot-product attention, ``softmax(Q K^T / sqrt(d_k)) V``."""
    d_k = Q.shape[-1]
    P = softmax(Q @ np.swapaxes(K, -1, -2) / math.sqrt(d_k))
    return P @ V


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_tanh(x):
    return np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x))


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh approximation of GELU."""
    return 0.5 * x * (1.0 + _gelu_tanh(x))


def _gelu_grad(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    # t is _gelu_tanh(x) from the forward pass
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def positional_table(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / d_model)
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return table


_LAYER_TENSORS = (
    "ln1.g", "ln1.b",
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln2.g", "ln2.b",
    "ff.w1", "ff.b1", "ff.w2", "ff.b2",
)


def param_names(config: EncoderConfig) -> list[str]:
    """Checkpoint order: token embedding, then each layer's tensors as listed in ``_LAYER_TENSORS``."""
    names = ["tok_emb"]
    for layer in range(config.n_layers):
        names.extend(f"l{layer}.{t}" for t in _LAYER_TENSORS)
    return names


def init_params(config: EncoderConfig, rng: np.random.Generator) -> dict:
    d, ff = config.d_model, config.ff_dim
    p = {"tok_emb": rng.normal(0.0, 1.0, (config.vocab_size, d))}
    for layer in range(config.n_layers):
        pre = f"l{layer}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        for w in "qkvo":
            p[pre + f"attn.w{w}"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))
            p[pre + f"attn.b{w}"] = np.zeros(d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "ff.w1"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, ff))
        p[pre + "ff.b1"] = np.zeros(ff)
        p[pre + "ff.w2"] = rng.normal(0.0, 1.0 / math.sqrt(ff), (ff, d))
        p[pre + "ff.b2"] = np.zeros(d)
    return p


# --- forward --------------------------------------------------------------------

def _ln_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xh = xc * rstd
    return xh * g + b, (xh, rstd)


def _ln_bwd(dy, g, cache):
    xh, rstd = cache
    dg = (dy * xh).reshape(-1, xh.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxh = dy * g
    dx = rstd * (dxh - dxh.mean(axis=-1, keepdims=True) - xh * (dxh * xh).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _split_heads(x, h):
    B, n, d = x.shape
    return x.reshape(B, n, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, h, n, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, n, h * dk)


def _dropout_mask(rng, shape, rate, dtype):
    if rng is None or rate <= 0.0:
        return None
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) * dtype.type(1.0 / (1.0 - rate))


def _block_fwd(x, p, pre, config, rng, stats):
    h = config.n_heads
    y, ln1 = _ln_fwd(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
    q = _split_heads(y @ p[pre + "attn.wq"] + p[pre + "attn.bq"], h)
    k = _split_heads(y @ p[pre + "attn.wk"] + p[pre + "attn.bk"], h)
    v = _split_heads(y @ p[pre + "attn.wv"] + p[pre + "attn.bv"], h)
    scale = x.dtype.type(1.0 / math.sqrt(config.d_head))
    P = softmax(q @ k.transpose(0, 1, 3, 2) * scale)
    if stats is not None:
        stats["max_score_rows"] = max(stats.get("max_score_rows", 0), P.shape[-2])
        stats["score_matrices"] = stats.get("score_matrices", 0) + P.shape[0] * P.shape[1]
    a = _merge_heads(P @ v)
    o = a @ p[pre + "attn.wo"] + p[pre + "attn.bo"]
    m1 = _dropout_mask(rng, o.shape, config.dropout, x.dtype)
    if m1 is not None:
        o = o * m1
    x1 = x + o
    z, ln2 = _ln_fwd(x1, p[pre + "ln2.g"], p[pre + "ln2.b"])
    f1 = z @ p[pre + "ff.w1"] + p[pre + "ff.b1"]
    t = _gelu_tanh(f1)
    g = 0.5 * f1 * (1.0 + t)
    f2 = g @ p[pre + "ff.w2"] + p[pre + "ff.b2"]
    m2 = _dropout_mask(rng, f2.shape, config.dropout, x.dtype)
    if m2 is not None:
        f2 = f2 * m2
    cache = (y, ln1, q, k, v, P, a, m1, z, ln2, f1, t, g, m2)
    return x1 + f2, cache


def _check_ids(config, token_ids):
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 1:
        raise InvalidConfig("token_ids must be a non-empty 1-D sequence")
    if ids.size > config.max_len:
        raise SequenceTooLong(f"sequence of {ids.size} tokens exceeds max_len={config.max_len}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise TokenOutOfRange("token id outside [0, vocab_size)")
    return ids


_POS_CACHE: dict = {}


def _positions(config, dtype=np.float64):
    key = (config.max_len, config.d_model, np.dtype(dtype).str)
    table = _POS_CACHE.get(key)
    if table is None:
        table = _POS_CACHE[key] = positional_table(config.max_len, config.d_model).astype(dtype)
    return table


def encoder_forward_batch(params, config: EncoderConfig, batch_ids, rng=None, stats=None):
    """Encode several sequences at once and pool each; returns ``(pooled[N, d], cache)``.

    Windows from all sequences are grouped by length and pushed through the
    block stack as one batch per length. Attention never crosses a window,
    so batching changes nothing numerically. ``rng`` enables dropout.
    """
    seqs = [_check_ids(config, ids) for ids in batch_ids]
    layouts = [window_layout(ids.size, config.W, config.Sr) for ids in seqs]
    pe = _positions(config, params["tok_emb"].dtype)
    by_len: dict = {}
    for si, layout in enumerate(layouts):
        for wi, (s, e) in enumerate(layout.spans):
            by_len.setdefault(e - s, []).append((si, wi, s))
    hiddens = [[None] * len(layout) for layout in layouts]
    groups = []
    for length in sorted(by_len, reverse=True):
        members = by_len[length]
        idx = np.array([m[2] for m in members])[:, None] + np.arange(length)[None, :]
        win_ids = np.stack([seqs[si][row] for (si, _, _), row in zip(members, idx)])
        x = params["tok_emb"][win_ids] + pe[idx]
        layer_caches = []
        for layer in range(config.n_layers):
            x, c = _block_fwd(x, params, f"l{layer}.", config, rng, stats)
            layer_caches.append(c)
        for j, (si, wi, _) in enumerate(members):
            hiddens[si][wi] = x[j]
        groups.append((members, win_ids, layer_caches))
    pooled = np.stack([pool_global(h, lay, config.pool) for h, lay in zip(hiddens, layouts)])
    return pooled, (layouts, hiddens, groups)


def encoder_forward(params, config: EncoderConfig, token_ids, rng=None, stats=None):
    """Single-sequence form of ``encoder_forward_batch``; returns ``(pooled[d], cache)``."""
    pooled, cache = encoder_forward_batch(params, config, [token_ids], rng, stats)
    return pooled[0], cache


def encode(params, config: EncoderConfig, token_ids, stats=None) -> list[np.ndarray]:
    """Per-window last hidden states (dropout off), in window order."""
    _, (_, hiddens, _) = encoder_forward(params, config, token_ids, None, stats)
    return hiddens[0]


def pool_global(window_hiddens, layout=None, mode: str = "window_mean") -> np.ndarray:
    """Average token rows inside each window, then average the windows.

    ``mode="token_mean"`` instead averages every row of every window, so
    tokens in overlaps count once per window containing them.
    """
    if len(window_hiddens) == 0:
        raise InvalidConfig("no window hidden states to pool")
    if mode == "token_mean":
        return np.concatenate(list(window_hiddens), axis=0).mean(axis=0)
    return np.mean([h.mean(axis=0) for h in window_hiddens], axis=0)


# --- backward -------------------------------------------------------------------

def _block_bwd(dout, p, pre, config, cache, grads):
    y, ln1, q, k, v, P, a, m1, z, ln2, f1, t, g, m2 = cache
    d = config.d_model
    # feed-forward branch
    df2 = dout if m2 is None else dout * m2
    grads[pre + "ff.w2"] += g.reshape(-1, g.shape[-1]).T @ df2.reshape(-1, d)
    grads[pre + "ff.b2"] += df2.reshape(-1, d).sum(axis=0)
    df1 = (df2 @ p[pre + "ff.w2"].T) * _gelu_grad(f1, t)
    grads[pre + "ff.w1"] += z.reshape(-1, d).T @ df1.reshape(-1, df1.shape[-1])
    grads[pre + "ff.b1"] += df1.reshape(-1, df1.shape[-1]).sum(axis=0)
    dz = df1 @ p[pre + "ff.w1"].T
    dx1_ln, dg, db = _ln_bwd(dz, p[pre + "ln2.g"], ln2)
    grads[pre + "ln2.g"] += dg
    grads[pre + "ln2.b"] += db
    dx1 = dout + dx1_ln
    # attention branch
    do = dx1 if m1 is None else dx1 * m1
    grads[pre + "attn.wo"] += a.reshape(-1, d).T @ do.reshape(-1, d)
    grads[pre + "attn.bo"] += do.reshape(-1, d).sum(axis=0)
    da = _split_heads(do @ p[pre + "attn.wo"].T, config.n_heads)
    dP = da @ v.transpose(0, 1, 3, 2)
    dv = P.transpose(0, 1, 3, 2) @ da
    dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True))
    dS *= dS.dtype.type(1.0 / math.sqrt(config.d_head))
    dq = dS @ k
    dk = dS.transpose(0, 1, 3, 2) @ q
    dy = np.zeros_like(y)
    y2 = y.reshape(-1, d)
    for name, dpart in (("q", dq), ("k", dk), ("v", dv)):
        dm = _merge_heads(dpart)
        grads[pre + f"attn.w{name}"] += y2.T @ dm.reshape(-1, d)
        grads[pre + f"attn.b{name}"] += dm.reshape(-1, d).sum(axis=0)
        dy += dm @ p[pre + f"attn.w{name}"].T
    dx_ln, dg, db = _ln_bwd(dy, p[pre + "ln1.g"], ln1)
    grads[pre + "ln1.g"] += dg
    grads[pre + "ln1.b"] += db
    return dx1 + dx_ln


def encoder_backward(params, config: EncoderConfig, cache, d_pooled, grads=None) -> dict:
    """Accumulate parameter gradients given dLoss/d(pooled) for each encoded sequence.

    ``d_pooled`` is ``[N, d]`` for a batch cache or ``[d]`` for a single one.
    """
    layouts, hiddens, groups = cache
    if grads is None:
        grads = {k: np.zeros_like(v) for k, v in params.items()}
    dtype = params["tok_emb"].dtype
    d_pooled = np.asarray(d_pooled, dtype=dtype).reshape(len(layouts), config.d_model)
    if config.pool == "token_mean":
        denom = np.array([sum(h.shape[0] for h in hs) for hs in hiddens], dtype=dtype)
    for members, win_ids, layer_caches in groups:
        length = win_ids.shape[1]
        sample = np.array([m[0] for m in members])
        if config.pool == "token_mean":
            row_grad = d_pooled[sample] / denom[sample, None]
        else:
            n_win = np.array([len(hiddens[si]) for si in sample], dtype=dtype)
            row_grad = d_pooled[sample] / (n_win[:, None] * length)
        dx = np.repeat(row_grad[:, None, :], length, axis=1)
        for layer in reversed(range(config.n_layers)):
            dx = _block_bwd(dx, params, f"l{layer}.", config, layer_caches[layer], grads)
        np.add.at(grads["tok_emb"], win_ids.reshape(-1), dx.reshape(-1, config.d_model))
    return grads


def encoder_grad(params, config: EncoderConfig, batch: Sequence, upstream) -> dict:
    """Sum over ``batch`` of parameter gradients given per-sample upstream vectors.

    ``upstream[i]`` is dLoss/d(pooled vector) for ``batch[i]``. Dropout is off.
    """
    _, cache = encoder_forward_batch(params, config, batch)
    return encoder_backward(params, config, cache, np.asarray(upstream))


# --- checkpoint -----------------------------------------------------------------

def save_encoder(params, config: EncoderConfig) -> bytes:
    """``SWAE`` blob: magic, u32 version, config block, u32 tensor count, tensors in ``param_names`` order."""
    names = param_names(config)
    out = [SWAE_MAGIC, struct.pack("<I", SWAE_VERSION), pack_block(format_kv(config.to_kv()))]
    out.append(struct.pack("<I", len(names)))
    out.extend(pack_tensor(n, params[n]) for n in names)
    return b"".join(out)


def load_encoder(blob: bytes, pos: int = 0) -> tuple[dict, EncoderConfig, int]:
    if blob[pos : pos + 4] != SWAE_MAGIC:
        raise FormatError(0, "not an SWAE encoder blob")
    (version,) = struct.unpack_from("<I", blob, pos + 4)
    if version != SWAE_VERSION:
        raise FormatError(0, f"unsupported SWAE version {version}")
    text, pos = unpack_block(blob, pos + 8)
    try:
        config = EncoderConfig.from_kv(parse_kv(text))
    except (TypeError, ValueError) as exc:
        raise FormatError(0, f"bad encoder config: {exc}") from None
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    params = {}
    for _ in range(count):
        name, arr, pos = unpack_tensor(blob, pos)
        params[name] = arr
    if list(params) != param_names(config):
        raise FormatError(0, "tensor names do not match the encoder layout")
    return params, config, pos
