"""Opcode Double-Tuple extraction: instruction filtering, operand decoding, tokenization."""

from __future__ import annotations

import base64
import binascii
import enum
import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Optional
from urllib.parse import unquote

from .errors import EmptyInput, EmptySequence, InvalidConfig
from .opdump import Operand, OperandKind, OpcodeDump, OpLine

__all__ = [
    "Policy",
    "FilterRules",
    "DecodePolicy",
    "Encoding",
    "Mode",
    "Label",
    "TokenSequence",
    "DEFAULT_RULES",
    "DEFAULT_POLICY",
    "filter_ops",
    "detect_encoding",
    "decode_operand",
    "decode_trace",
    "normalize_operand",
    "shannon_entropy",
    "extract_sequence",
    "write_jsonl",
    "read_jsonl",
]


class Policy(enum.Enum):
    KEEP_UNKNOWN = "KeepUnknown"
    DROP_UNKNOWN = "DropUnknown"


class Encoding(enum.Enum):
    BASE64 = "Base64"
    URL = "UrlEncoded"
    PLAIN = "Plain"


class Mode(enum.Enum):
    ODT = "odt"
    OST = "ost"


class Label(enum.IntEnum):
    BENIGN = 0
    WEBSHELL = 1


@dataclass(frozen=True)
class FilterRules:
    keep: frozenset = frozenset()
    drop: frozenset = frozenset()
    default_policy: Policy = Policy.KEEP_UNKNOWN

    def __post_init__(self):
        object.__setattr__(self, "keep", frozenset(self.keep))
        object.__setattr__(self, "drop", frozenset(self.drop))
        both = self.keep & self.drop
        if both:
            raise InvalidConfig(f"opcodes in both keep and drop: {sorted(both)}")

    def retains(self, opcode: str) -> bool:
        if opcode in self.keep:
            return True
        return opcode not in self.drop and self.default_policy is Policy.KEEP_UNKNOWN


DEFAULT_RULES = FilterRules(
    keep={
        "INCLUDE_OR_EVAL", "INIT_FCALL", "INIT_FCALL_BY_NAME", "INIT_DYNAMIC_CALL",
        "DO_FCALL", "DO_ICALL", "DO_UCALL", "SEND_VAL", "SEND_VAR", "CONCAT",
        "FAST_CONCAT", "ROPE_INIT", "ROPE_ADD", "ROPE_END", "ASSIGN", "ASSIGN_DIM",
        "ECHO", "EXIT", "FETCH_R", "FETCH_W", "FETCH_DIM_R", "BEGIN_SILENCE",
    },
    drop={"NOP", "EXT_STMT", "EXT_NOP", "EXT_FCALL_BEGIN", "EXT_FCALL_END", "TICKS"},
    default_policy=Policy.KEEP_UNKNOWN,
)


@dataclass(frozen=True)
class DecodePolicy:
    """Operand decoding gates and the long-string placeholder thresholds."""

    max_depth: int = 3
    min_b64_len: int = 8
    printable_ratio: float = 0.9
    max_token_len: int = 64
    entropy_high: float = 5.0
    entropy_low: float = 3.0

    def __post_init__(self):
        if self.max_depth < 1:
            raise InvalidConfig("max_depth must be >= 1")
        if self.min_b64_len < 1:
            raise InvalidConfig("min_b64_len must be >= 1")
        if not 0.0 < self.printable_ratio <= 1.0:
            raise InvalidConfig("printable_ratio must lie in (0, 1]")
        if self.max_token_len < 1:
            raise InvalidConfig("max_token_len must be >= 1")
        if not 0.0 <= self.entropy_low <= self.entropy_high:
            raise InvalidConfig("entropy buckets must satisfy 0 <= low <= high")


DEFAULT_POLICY = DecodePolicy()


@dataclass
class TokenSequence:
    tokens: list
    label: Optional[Label] = None
    source_id: str = ""
    mode: Mode = Mode.ODT

    def __len__(self):
        return len(self.tokens)


def filter_ops(dump: OpcodeDump, rules: FilterRules = DEFAULT_RULES) -> list[OpLine]:
    return [op for op in dump.iter_ops() if rules.retains(op.opcode)]


# --- decoding ---------------------------------------------------------------

_B64_RE = re.compile(r"[A-Za-z0-9+/]*={0,2}\Z")
_HEX = frozenset("0123456789abcdefABCDEF")
_PRINTABLE = frozenset(range(0x20, 0x7F)) | {0x09, 0x0A, 0x0D}


def _printable_fraction(data: bytes) -> float:
    if not data:
        return 0.0
    return sum(b in _PRINTABLE for b in data) / len(data)


def _is_url_encoded(s: str) -> bool:
    pos = s.find("%")
    if pos < 0:
        return False
    while pos >= 0:
        if pos + 2 >= len(s) or s[pos + 1] not in _HEX or s[pos + 2] not in _HEX:
            return False
        pos = s.find("%", pos + 3)
    return True


def _b64_bytes(s: str, policy: DecodePolicy) -> Optional[bytes]:
    if len(s) < policy.min_b64_len or len(s) % 4 or not _B64_RE.match(s):
        return None
    try:
        data = base64.b64decode(s, validate=True)
    except (binascii.Error, ValueError):
        return None
    if _printable_fraction(data) < policy.printable_ratio:
        return None
    return data


def detect_encoding(s: str, policy: DecodePolicy = DEFAULT_POLICY) -> Encoding:
    if _is_url_encoded(s):
        return Encoding.URL
    if _b64_bytes(s, policy) is not None:
        return Encoding.BASE64
    return Encoding.PLAIN


def decode_trace(s: str, policy: DecodePolicy = DEFAULT_POLICY) -> tuple[str, int]:
    """Decode until plain text or ``max_depth`` steps; returns (text, steps taken)."""
    depth = 0
    while depth < policy.max_depth:
        if _is_url_encoded(s):
            s = unquote(s, errors="replace")
        else:
            data = _b64_bytes(s, policy)
            if data is None:
                break
            s = data.decode("utf-8", errors="replace")
        depth += 1
    return s, depth


def decode_operand(s: str, policy: DecodePolicy = DEFAULT_POLICY) -> str:
    return decode_trace(s, policy)[0]


def shannon_entropy(s: str) -> float:
    """Bits per character of the empirical character distribution."""
    if not s:
        raise EmptyInput("entropy of an empty string is undefined")
    n = len(s)
    h = 0.0
    for count in Counter(s).values():
        p = count / n
        h -= p * math.log2(p)
    return max(h, 0.0)


def normalize_operand(op: Operand, policy: DecodePolicy = DEFAULT_POLICY) -> Optional[str]:
    kind = op.kind
    if kind in (OperandKind.NAME, OperandKind.CONST_STRING):
        decoded = decode_operand(op.raw, policy)
        if not decoded:
            return None
        if len(decoded) > policy.max_token_len:
            h = shannon_entropy(decoded)
            if h > policy.entropy_high:
                return "<str:H>"
            return "<str:M>" if h >= policy.entropy_low else "<str:L>"
        return decoded.lower()
    if kind is OperandKind.CONST_NUMBER:
        return "<num>"
    if kind in (OperandKind.COMPILED_VAR, OperandKind.TEMP_VAR, OperandKind.VAR):
        return "<var>"
    return None


def extract_sequence(
    dump: OpcodeDump,
    rules: FilterRules = DEFAULT_RULES,
    policy: DecodePolicy = DEFAULT_POLICY,
    mode: Mode = Mode.ODT,
    label: Optional[Label] = None,
    source_id: str = "",
) -> TokenSequence:
    mode = Mode(mode)
    ops = filter_ops(dump, rules)
    if not ops:
        raise EmptySequence(f"{source_id or 'dump'}: every instruction was filtered out")
    tokens = []
    for op in ops:
        tokens.append(op.opcode)
        if mode is Mode.ODT:
            for operand in op.operands:
                tok = normalize_operand(operand, policy)
                if tok is not None:
                    tokens.append(tok)
    return TokenSequence(tokens, label, source_id, mode)


# --- JSON-lines persistence ---------------------------------------------------

def write_jsonl(seqs: Iterable[TokenSequence], fh) -> None:
    for seq in seqs:
        record = {
            "source_id": seq.source_id,
            "label": None if seq.label is None else int(seq.label),
            "mode": Mode(seq.mode).value,
            "tokens": list(seq.tokens),
        }
        fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def read_jsonl(fh) -> list[TokenSequence]:
    out = []
    for line in fh:
        if not line.strip():
            continue
        rec = json.loads(line)
        label = rec.get("label")
        out.append(
            TokenSequence(
                list(rec["tokens"]),
                None if label is None else Label(int(label)),
                rec.get("source_id", ""),
                Mode(rec.get("mode", "odt")),
            )
        )
    return out
