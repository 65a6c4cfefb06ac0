"""Weighted feature fusion, the binary head, AdamW, and the joint training loop.

The document vector fed to the head is::

    fused = lam * encoder_vector + (1 - lam) * P @ embedder_vector

where ``P`` is a learned projection that only exists when the embedder and
encoder widths differ. Embedder vectors are computed once and stay frozen;
the encoder, head and projection are trained together with AdamW.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import fasttext as ft
from .errors import DimMismatch, EmptyDataset, EmptySequence, FormatError, InvalidConfig, SingleClassDataset
from .metrics import Metrics, compute_metrics
from .odt import Label, TokenSequence
from .swa import (
    EncoderConfig,
    encoder_backward,
    encoder_forward_batch,
    init_params,
    load_encoder,
    save_encoder,
)
from .tensorio import format_kv, pack_tensor, parse_kv, unpack_tensor

log = logging.getLogger(__name__)

__all__ = [
    "FusionConfig",
    "TrainConfig",
    "AdamWState",
    "TrainedModel",
    "History",
    "fuse",
    "bce_loss",
    "init_head",
    "head_forward",
    "head_backward",
    "adamw_init",
    "adamw_step",
    "build_vocab",
    "train",
    "predict",
    "predict_proba",
    "evaluate",
    "grid_search_lambda",
    "batch_loss_and_grads",
    "save_model",
    "load_model",
]

BCE_EPS = 1e-7
UNK = "<unk>"


@dataclass(frozen=True)
class FusionConfig:
    lam: float = 0.7
    d_fused: int = 64

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidConfig("lambda must lie in [0, 1]")
        if self.d_fused < 1:
            raise InvalidConfig("d_fused must be positive")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch: int = 16
    seed: int = 42
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    hidden: int = 32
    threshold: float = 0.5
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 1 or self.hidden < 1:
            raise InvalidConfig("epochs >= 0, batch >= 1, hidden >= 1 required")
        if not self.lr > 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise InvalidConfig("bad optimizer hyperparameters")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfig("dtype must be float32 or float64")


# --- fusion / loss / head ---------------------------------------------------------

def fuse(e_enc, e_ft, cfg: FusionConfig, projection: Optional[np.ndarray] = None) -> np.ndarray:
    e_enc = np.asarray(e_enc)
    e_ft = np.asarray(e_ft)
    if projection is not None:
        e_ft = e_ft @ projection
    if e_enc.shape[-1] != cfg.d_fused or e_ft.shape[-1] != cfg.d_fused:
        raise DimMismatch(f"fusion expects width {cfg.d_fused}, got {e_enc.shape[-1]} and {e_ft.shape[-1]}")
    if cfg.lam == 1.0:
        return e_enc.copy()
    if cfg.lam == 0.0:
        return e_ft.copy()
    return cfg.lam * e_enc + (1.0 - cfg.lam) * e_ft


def bce_loss(p, y, eps: float = BCE_EPS) -> float:
    """Mean binary cross-entropy with probabilities clamped to ``[eps, 1 - eps]``."""
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(y, dtype=np.float64)
    losses = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(np.mean(losses))


_GELU_C = math.sqrt(2.0 / math.pi)


def init_head(d_in: int, hidden: int, rng: np.random.Generator) -> dict:
    return {
        "head.w1": rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, hidden)),
        "head.b1": np.zeros(hidden),
        "head.w2": rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, 1)),
        "head.b2": np.zeros(1),
    }


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def head_forward(head: dict, x: np.ndarray):
    """Rows of ``x`` -> probabilities; also returns the cache for ``head_backward``."""
    a = x @ head["head.w1"] + head["head.b1"]
    t = np.tanh(_GELU_C * a * (1.0 + 0.044715 * a * a))
    g = 0.5 * a * (1.0 + t)
    logit = (g @ head["head.w2"] + head["head.b2"])[:, 0]
    return _sigmoid(logit), (x, a, t, g)


def head_backward(head: dict, cache, d_logit: np.ndarray, grads: dict) -> np.ndarray:
    """Accumulate head gradients for dLoss/dlogit; returns dLoss/dx."""
    x, a, t, g = cache
    d_logit = d_logit[:, None]
    grads["head.w2"] += g.T @ d_logit
    grads["head.b2"] += d_logit.sum(axis=0)
    dg = d_logit @ head["head.w2"].T
    da = dg * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * a * a))
    grads["head.w1"] += x.T @ da
    grads["head.b1"] += da.sum(axis=0)
    return da @ head["head.w1"].T


def _bce_logit_grad(p, y):
    # d/dlogit of the clamped loss: zero where the clamp is active
    active = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
    return np.where(active, p - y, 0.0)


# --- AdamW ----------------------------------------------------------------------------

@dataclass
class AdamWState:
    step: int
    m: dict
    v: dict
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def adamw_init(params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01) -> AdamWState:
    return AdamWState(
        0,
        {k: np.zeros_like(v) for k, v in params.items()},
        {k: np.zeros_like(v) for k, v in params.items()},
        lr, beta1, beta2, eps, weight_decay,
    )


def adamw_step(params: dict, grads: dict, state: AdamWState):
    """One AdamW update, in place. Weight decay acts on the parameters directly."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, theta in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * theta
        theta -= state.lr * update
    return params, state


# --- model --------------------------------------------------------------------------

@dataclass
class History:
    epochs: list = field(default_factory=list)  # dicts: epoch, train_loss, val_acc, val_f1

    def __len__(self):
        return len(self.epochs)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,train_loss,val_acc,val_f1\n")
        for row in self.epochs:
            buf.write(f"{row['epoch']},{row['train_loss']:.6f},{row['val_acc']:.6f},{row['val_f1']:.6f}\n")
        return buf.getvalue()


@dataclass
class TrainedModel:
    enc_params: dict
    enc_cfg: EncoderConfig
    head: dict
    fus_cfg: FusionConfig
    vocab: dict
    embed: ft.EmbeddingModel
    train_cfg: TrainConfig = TrainConfig()
    projection: Optional[np.ndarray] = None

    def params(self) -> dict:
        out = dict(self.enc_params)
        out.update(self.head)
        if self.projection is not None:
            out["proj.w"] = self.projection
        return out

    def token_ids(self, tokens: Sequence[str]) -> np.ndarray:
        unk = self.vocab[UNK]
        return np.array([self.vocab.get(t, unk) for t in tokens], dtype=np.int64)


def build_vocab(seqs: Sequence[TokenSequence]) -> dict:
    """Encoder vocabulary: ``<unk>`` at 0, then tokens by descending frequency."""
    counts = Counter(tok for s in seqs for tok in s.tokens)
    counts.pop(UNK, None)
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    vocab = {UNK: 0}
    for tok, _ in ordered:
        vocab[tok] = len(vocab)
    return vocab


def _tokens(s):
    return s.tokens if isinstance(s, TokenSequence) else list(s)


def _labels(seqs):
    out = []
    for s in seqs:
        if s.label is None:
            raise InvalidConfig(f"sample {s.source_id!r} has no label")
        out.append(int(s.label))
    return np.array(out, dtype=np.float64)


def init_model(
    train_seqs: Sequence[TokenSequence],
    embed: ft.EmbeddingModel,
    enc_cfg: EncoderConfig,
    fus_cfg: FusionConfig,
    train_cfg: TrainConfig = TrainConfig(),
) -> TrainedModel:
    """Fresh model whose encoder vocabulary comes from ``train_seqs``."""
    vocab = build_vocab(train_seqs)
    enc_cfg = replace(enc_cfg, vocab_size=len(vocab))
    if fus_cfg.d_fused != enc_cfg.d_model:
        raise DimMismatch("d_fused must equal the encoder width")
    rng = np.random.default_rng(train_cfg.seed)
    dtype = np.dtype(train_cfg.dtype)
    enc = {k: v.astype(dtype) for k, v in init_params(enc_cfg, rng).items()}
    head = {k: v.astype(dtype) for k, v in init_head(fus_cfg.d_fused, train_cfg.hidden, rng).items()}
    projection = None
    if embed.dim != enc_cfg.d_model:
        projection = rng.normal(0.0, 1.0 / math.sqrt(embed.dim), (embed.dim, enc_cfg.d_model)).astype(dtype)
    return TrainedModel(enc, enc_cfg, head, fus_cfg, vocab, embed, train_cfg, projection)


def _forward(model: TrainedModel, ids_batch, ft_batch, rng=None):
    pooled, enc_cache = encoder_forward_batch(model.enc_params, model.enc_cfg, ids_batch, rng)
    e_ft = ft_batch @ model.projection if model.projection is not None else ft_batch
    lam = model.fus_cfg.lam
    fused = lam * pooled + (1.0 - lam) * e_ft
    probs, head_cache = head_forward(model.head, fused)
    return probs, (enc_cache, head_cache, ft_batch)


def _embed_docs(model: TrainedModel, seqs) -> np.ndarray:
    dtype = np.dtype(model.train_cfg.dtype)
    return np.stack([ft.doc_vector(model.embed, _tokens(s)) for s in seqs]).astype(dtype)


def predict_proba(model: TrainedModel, seqs, batch: int = 32) -> np.ndarray:
    """Deterministic probabilities (dropout off) for token sequences."""
    seqs = list(seqs)
    for s in seqs:
        if len(_tokens(s)) == 0:
            raise EmptySequence("cannot classify an empty token sequence")
    out = []
    for i in range(0, len(seqs), batch):
        chunk = seqs[i : i + batch]
        ids = [model.token_ids(_tokens(s)) for s in chunk]
        probs, _ = _forward(model, ids, _embed_docs(model, chunk))
        out.append(probs.astype(np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def predict(model: TrainedModel, tokens) -> tuple[float, Label]:
    p = float(predict_proba(model, [tokens])[0])
    return p, Label.WEBSHELL if p >= model.train_cfg.threshold else Label.BENIGN


def evaluate(model: TrainedModel, seqs) -> Metrics:
    probs = predict_proba(model, seqs)
    pred = (probs >= model.train_cfg.threshold).astype(int)
    return compute_metrics(pred, _labels(seqs).astype(int))


def batch_loss_and_grads(model: TrainedModel, ids_batch, ft_batch, y, rng=None) -> tuple[float, dict]:
    """Mean BCE over one mini-batch and its gradient for every entry of ``model.params()``."""
    probs, (enc_cache, head_cache, ft_batch) = _forward(model, ids_batch, ft_batch, rng)
    y = np.asarray(y, dtype=np.float64)
    params = model.params()
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    d_logit = (_bce_logit_grad(probs.astype(np.float64), y) / len(y)).astype(probs.dtype)
    d_fused = head_backward(model.head, head_cache, d_logit, grads)
    lam = model.fus_cfg.lam
    encoder_backward(model.enc_params, model.enc_cfg, enc_cache, lam * d_fused, grads)
    if model.projection is not None:
        grads["proj.w"] += ft_batch.T @ ((1.0 - lam) * d_fused)
    return bce_loss(probs, y), grads


def train(
    dataset: Sequence[TokenSequence],
    embed: ft.EmbeddingModel,
    enc_cfg: EncoderConfig,
    fus_cfg: FusionConfig,
    train_cfg: TrainConfig = TrainConfig(),
    val: Optional[Sequence[TokenSequence]] = None,
) -> tuple[TrainedModel, History]:
    """Jointly train encoder, head (and projection) with BCE and AdamW.

    Samples in a mini-batch are encoded independently and their gradients
    averaged. ``val`` (optional) is scored after every epoch.
    """
    dataset = list(dataset)
    if not dataset:
        raise EmptyDataset("no training samples")
    y = _labels(dataset)
    if len(set(y.tolist())) < 2:
        raise SingleClassDataset("training data must contain both classes")

    model = init_model(dataset, embed, enc_cfg, fus_cfg, train_cfg)
    history = History()
    if train_cfg.epochs == 0:
        return model, history

    ids = [model.token_ids(s.tokens) for s in dataset]
    e_ft = _embed_docs(model, dataset)
    params = model.params()
    state = adamw_init(params, train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps, train_cfg.weight_decay)
    order_rng = np.random.default_rng([train_cfg.seed, 1])
    drop_rng = np.random.default_rng([train_cfg.seed, 2])

    for epoch in range(1, train_cfg.epochs + 1):
        order = order_rng.permutation(len(dataset))
        loss_sum = 0.0
        for start in range(0, len(order), train_cfg.batch):
            idx = order[start : start + train_cfg.batch]
            loss, grads = batch_loss_and_grads(model, [ids[i] for i in idx], e_ft[idx], y[idx], drop_rng)
            loss_sum += loss * len(idx)
            adamw_step(params, grads, state)
        row = {"epoch": epoch, "train_loss": loss_sum / len(dataset), "val_acc": float("nan"), "val_f1": float("nan")}
        if val:
            m = evaluate(model, val)
            row["val_acc"], row["val_f1"] = m.accuracy, m.f1
        history.epochs.append(row)
        log.info("epoch %d loss %.4f val_acc %.4f val_f1 %.4f", epoch, row["train_loss"], row["val_acc"], row["val_f1"])
    return model, history


def grid_search_lambda(
    candidates: Sequence[float],
    train_set: Sequence[TokenSequence],
    val_set: Sequence[TokenSequence],
    embed: ft.EmbeddingModel,
    enc_cfg: EncoderConfig,
    fus_cfg: FusionConfig = FusionConfig(),
    train_cfg: TrainConfig = TrainConfig(),
) -> tuple[float, list[dict]]:
    """Train one model per distinct lambda; best validation F1 wins, ties go to the larger lambda."""
    lams = sorted({float(c) for c in candidates})
    if not lams:
        raise InvalidConfig("no lambda candidates")
    table = []
    for lam in lams:
        model, _ = train(train_set, embed, enc_cfg, replace(fus_cfg, lam=lam), train_cfg)
        m = evaluate(model, val_set)
        table.append({"lambda": lam, **m.as_dict()})
    best = max(table, key=lambda row: (row["f1"], row["lambda"]))
    return best["lambda"], table


# --- checkpoint ---------------------------------------------------------------------

HEAD_MAGIC = b"HEAD"


def _escape_line(tok: str) -> str:
    return tok.replace("\\", "\\\\").replace("\n", "\\n").replace("\r", "\\r")


def _unescape_line(s: str) -> str:
    out, i = [], 0
    while i < len(s):
        if s[i] == "\\" and i + 1 < len(s):
            out.append({"n": "\n", "r": "\r", "\\": "\\"}.get(s[i + 1], s[i + 1]))
            i += 2
        else:
            out.append(s[i])
            i += 1
    return "".join(out)


def save_model(model: TrainedModel, out_dir, history: Optional[History] = None) -> None:
    """Write the checkpoint directory.

    Files: ``encoder.swae``, ``head.bin``, ``vocab.txt``, ``embed.vec``,
    ``embed.ftbk``, ``manifest.txt`` and, when given, ``history.csv``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "encoder.swae").write_bytes(save_encoder(model.enc_params, model.enc_cfg))
    head_tensors = dict(model.head)
    if model.projection is not None:
        head_tensors["proj.w"] = model.projection
    blob = [HEAD_MAGIC, struct.pack("<I", len(head_tensors))]
    blob.extend(pack_tensor(k, v) for k, v in head_tensors.items())
    (out / "head.bin").write_bytes(b"".join(blob))
    vocab_lines = [_escape_line(t) for t, _ in sorted(model.vocab.items(), key=lambda kv: kv[1])]
    (out / "vocab.txt").write_text("\n".join(vocab_lines) + "\n", encoding="utf-8")
    (out / "embed.vec").write_text(ft.save_vec(model.embed), encoding="utf-8")
    (out / "embed.ftbk").write_bytes(ft.save_buckets(model.embed))
    manifest = {"format": "opshield-model", "version": 1, "fusion.lambda": repr(model.fus_cfg.lam),
                "fusion.d_fused": model.fus_cfg.d_fused}
    manifest.update({f"embed.{k}": v for k, v in asdict(model.embed.config).items()})
    manifest.update({f"train.{k}": v for k, v in asdict(model.train_cfg).items()})
    (out / "manifest.txt").write_text(format_kv(manifest), encoding="utf-8")
    if history is not None:
        (out / "history.csv").write_text(history.to_csv(), encoding="utf-8")


def _typed(cls, kv: dict, prefix: str):
    kwargs = {}
    for f in fields(cls):
        key = prefix + f.name
        if key in kv:
            raw = kv[key]
            kwargs[f.name] = raw if f.type == "str" else (float(raw) if f.type == "float" else int(raw))
    return cls(**kwargs)


def load_model(model_dir) -> TrainedModel:
    d = Path(model_dir)
    try:
        manifest = parse_kv((d / "manifest.txt").read_text(encoding="utf-8"))
        enc_params, enc_cfg, _ = load_encoder((d / "encoder.swae").read_bytes())
        blob = (d / "head.bin").read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(0, f"missing checkpoint file: {exc.filename}") from None
    if blob[:4] != HEAD_MAGIC:
        raise FormatError(0, "head.bin has a bad magic number")
    (count,) = struct.unpack_from("<I", blob, 4)
    pos, head = 8, {}
    for _ in range(count):
        name, arr, pos = unpack_tensor(blob, pos)
        head[name] = arr
    projection = head.pop("proj.w", None)
    lines = (d / "vocab.txt").read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    vocab = {_unescape_line(t): i for i, t in enumerate(lines)}
    fus_cfg = FusionConfig(float(manifest["fusion.lambda"]), int(manifest["fusion.d_fused"]))
    embed_cfg = _typed(ft.SubwordConfig, manifest, "embed.")
    train_cfg = _typed(TrainConfig, manifest, "train.")
    embed = ft.load_model((d / "embed.vec").read_text(encoding="utf-8"), (d / "embed.ftbk").read_bytes(), embed_cfg)
    dtype = np.dtype(train_cfg.dtype)
    cast = lambda t: {k: v.astype(dtype) for k, v in t.items()}  # noqa: E731
    return TrainedModel(cast(enc_params), enc_cfg, cast(head), fus_cfg, vocab, embed, train_cfg,
                        None if projection is None else projection.astype(dtype))
