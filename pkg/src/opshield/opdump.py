"""Opcode dump model plus the ODUMP v1 reader/writer and a VLD table importer.

ODUMP v1 layout::

    #odump 1
    fn (main)
    <src_line>\t<op_index>\t<OPCODE>\t<op1>|<op2>\t<result>

String constants are single-quoted with ``\\``, ``\t``, ``\n``, ``\r`` and
``\'`` escapes, so every record stays on one line.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Optional

from .errors import FormatError

__all__ = [
    "OperandKind",
    "Operand",
    "OpLine",
    "FunctionUnit",
    "OpcodeDump",
    "MAIN",
    "parse_dump",
    "serialize_dump",
    "import_vld",
]

MAIN = "(main)"
HEADER_PREFIX = "#odump "
FORMAT_VERSION = 1

OPCODE_RE = re.compile(r"[A-Z][A-Z0-9_]*\Z")
NUMBER_RE = re.compile(r"-?(?:[0-9]+(?:\.[0-9]*)?|\.[0-9]+)(?:[eE][+-]?[0-9]+)?\Z")
NAME_RE = re.compile(r"[A-Za-z_\\][A-Za-z0-9_\\]*\Z")
VAR_RE = re.compile(r"[!~$][0-9]+\Z")
UINT_RE = re.compile(r"[0-9]+\Z")

_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r", "'": "\\'"}
_UNESCAPES = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r", "'": "'"}


class OperandKind(enum.Enum):
    CONST_STRING = "ConstString"
    CONST_NUMBER = "ConstNumber"
    COMPILED_VAR = "CompiledVar"
    TEMP_VAR = "TempVar"
    VAR = "Var"
    NAME = "Name"
    UNUSED = "Unused"


_SIGILS = {"!": OperandKind.COMPILED_VAR, "~": OperandKind.TEMP_VAR, "$": OperandKind.VAR}


@dataclass(frozen=True)
class Operand:
    kind: OperandKind
    raw: str = ""

    def __post_init__(self):
        if self.kind is OperandKind.UNUSED and self.raw:
            raise ValueError("Unused operand must have empty raw text")
        if self.kind is OperandKind.CONST_NUMBER and not NUMBER_RE.match(self.raw):
            raise ValueError(f"not a decimal number: {self.raw!r}")
        if self.kind in (OperandKind.COMPILED_VAR, OperandKind.TEMP_VAR, OperandKind.VAR):
            if not VAR_RE.match(self.raw) or _SIGILS[self.raw[0]] is not self.kind:
                raise ValueError(f"bad {self.kind.value} operand: {self.raw!r}")
        if self.kind is OperandKind.NAME and not NAME_RE.match(self.raw):
            raise ValueError(f"not a bare identifier: {self.raw!r}")

    def to_token(self) -> str:
        if self.kind is OperandKind.CONST_STRING:
            return "'" + "".join(_ESCAPES.get(c, c) for c in self.raw) + "'"
        return self.raw


UNUSED = Operand(OperandKind.UNUSED)


@dataclass(frozen=True)
class OpLine:
    src_line: int
    op_index: int
    opcode: str
    operands: tuple = ()
    result: Optional[Operand] = None

    def __post_init__(self):
        operands = tuple(self.operands)
        # a lone Unused operand serializes to an empty field, which reads back as no operands
        if operands == (UNUSED,):
            operands = ()
        object.__setattr__(self, "operands", operands)
        if len(operands) > 2:
            raise ValueError("at most two operands per instruction")
        if not OPCODE_RE.match(self.opcode):
            raise ValueError(f"bad opcode name: {self.opcode!r}")
        if self.src_line < 1 or self.op_index < 0:
            raise ValueError("src_line must be positive and op_index non-negative")
        if self.result is not None and self.result.kind is OperandKind.UNUSED:
            object.__setattr__(self, "result", None)


@dataclass(frozen=True)
class FunctionUnit:
    name: str
    ops: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        if not self.name or any(c in self.name for c in "\n\r\t"):
            raise ValueError(f"bad function name: {self.name!r}")
        if not self.ops:
            raise ValueError(f"function {self.name} has no instructions")
        for a, b in zip(self.ops, self.ops[1:]):
            if b.op_index <= a.op_index:
                raise ValueError(f"op_index not increasing in {self.name}")


@dataclass(frozen=True)
class OpcodeDump:
    """A whole file: ``(main)`` first, then declared functions in source order."""

    functions: tuple = ()
    version: int = FORMAT_VERSION

    def __post_init__(self):
        funcs = tuple(self.functions)
        mains = [f for f in funcs if f.name == MAIN]
        if len(mains) != 1:
            raise ValueError(f"expected exactly one {MAIN} unit, found {len(mains)}")
        funcs = tuple(mains) + tuple(f for f in funcs if f.name != MAIN)
        object.__setattr__(self, "functions", funcs)

    @property
    def main(self) -> FunctionUnit:
        return self.functions[0]

    def iter_ops(self):
        for fn in self.functions:
            yield from fn.ops

    def __len__(self):
        return sum(len(fn.ops) for fn in self.functions)


def classify_token(token: str) -> Operand:
    """Infer an operand's kind from its surface syntax (string tokens already unquoted are not handled here)."""
    if token == "":
        return UNUSED
    if VAR_RE.match(token):
        return Operand(_SIGILS[token[0]], token)
    if NUMBER_RE.match(token):
        return Operand(OperandKind.CONST_NUMBER, token)
    if NAME_RE.match(token):
        return Operand(OperandKind.NAME, token)
    raise ValueError(f"unrecognized operand token {token!r}")


def _read_quoted(s: str, i: int) -> tuple[str, int]:
    # s[i] is the opening quote; returns (unescaped body, index after closing quote)
    out = []
    i += 1
    n = len(s)
    while i < n:
        c = s[i]
        if c == "\\":
            if i + 1 >= n or s[i + 1] not in _UNESCAPES:
                raise ValueError("invalid escape in string constant")
            out.append(_UNESCAPES[s[i + 1]])
            i += 2
        elif c == "'":
            return "".join(out), i + 1
        else:
            out.append(c)
            i += 1
    raise ValueError("unterminated string constant")


def _split_operands(field_text: str) -> list[Operand]:
    if field_text == "":
        return []
    operands = []
    i, n = 0, len(field_text)
    while True:
        if i < n and field_text[i] == "'":
            body, i = _read_quoted(field_text, i)
            operands.append(Operand(OperandKind.CONST_STRING, body))
        else:
            j = field_text.find("|", i)
            j = n if j < 0 else j
            operands.append(classify_token(field_text[i:j]))
            i = j
        if i == n:
            break
        if field_text[i] != "|":
            raise ValueError("junk after string constant")
        i += 1
        if len(operands) >= 2:
            raise ValueError("more than two operands")
        if i == n:
            operands.append(UNUSED)
            break
    return operands


def _parse_result(field_text: str) -> Optional[Operand]:
    if field_text == "":
        return None
    if field_text[0] == "'":
        body, end = _read_quoted(field_text, 0)
        if end != len(field_text):
            raise ValueError("junk after result string")
        return Operand(OperandKind.CONST_STRING, body)
    return classify_token(field_text)


def parse_dump(text: str) -> OpcodeDump:
    """Parse ODUMP v1 text.

    Raises FormatError with a 1-based line number for anything that is not
    canonical ODUMP v1.
    """
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].startswith(HEADER_PREFIX):
        raise FormatError(1, "missing header")
    version = lines[0][len(HEADER_PREFIX):]
    if version != str(FORMAT_VERSION):
        raise FormatError(1, f"unsupported version {version!r}")

    functions: list[FunctionUnit] = []
    name: Optional[str] = None
    ops: list[OpLine] = []
    name_line = 0
    seen_main = False

    def close(line_no):
        if name is None:
            return
        if not ops:
            raise FormatError(name_line, f"function {name} has no instructions")
        functions.append(FunctionUnit(name, ops))

    for line_no, line in enumerate(lines[1:], start=2):
        if line.startswith("fn "):
            close(line_no)
            name = line[3:]
            name_line = line_no
            ops = []
            if not name or "\r" in name or "\t" in name:
                raise FormatError(line_no, "bad function name")
            if name == MAIN:
                if seen_main:
                    raise FormatError(line_no, "duplicate (main)")
                seen_main = True
            continue
        if name is None:
            raise FormatError(line_no, "record outside any function")
        fields = line.split("\t")
        if len(fields) != 5:
            raise FormatError(line_no, f"malformed record: expected 5 fields, got {len(fields)}")
        src, idx, opcode, operand_field, result_field = fields
        if not UINT_RE.match(src) or int(src) < 1:
            raise FormatError(line_no, "malformed record: bad source line")
        if not UINT_RE.match(idx):
            raise FormatError(line_no, "malformed record: bad op index")
        if not OPCODE_RE.match(opcode):
            raise FormatError(line_no, "malformed record: bad opcode")
        if ops and int(idx) <= ops[-1].op_index:
            raise FormatError(line_no, "non-monotonic op_index")
        try:
            operands = _split_operands(operand_field)
            result = _parse_result(result_field)
            ops.append(OpLine(int(src), int(idx), opcode, tuple(operands), result))
        except ValueError as exc:
            raise FormatError(line_no, f"malformed record: {exc}") from None
    close(len(lines))

    if not seen_main:
        raise FormatError(len(lines), "no (main) function")
    return OpcodeDump(tuple(functions), FORMAT_VERSION)


def serialize_dump(dump: OpcodeDump) -> str:
    out = [f"{HEADER_PREFIX}{dump.version}"]
    for fn in dump.functions:
        out.append(f"fn {fn.name}")
        for op in fn.ops:
            operands = "|".join(o.to_token() for o in op.operands)
            result = op.result.to_token() if op.result is not None else ""
            out.append(f"{op.src_line}\t{op.op_index}\t{op.opcode}\t{operands}\t{result}")
    return "\n".join(out) + "\n"


# --- VLD adapter -----------------------------------------------------------

_VLD_ROW = re.compile(
    r"^\s*(?:(?P<line>\d+)\s+)?(?P<idx>\d+)\s+(?:[EIO>*]+\s+)*(?P<op>[A-Z][A-Z0-9_]+)\b(?P<rest>.*)$"
)
_VLD_FUNC = re.compile(r"^\s*function name:\s*(?P<name>\S+)")
_VLD_FETCH = {"global", "local", "static", "member", "lock", "global lock"}
# opcodes whose quoted operands are identifiers rather than data
_VLD_NAME_OPS = {
    "INIT_FCALL",
    "INIT_FCALL_BY_NAME",
    "INIT_NS_FCALL_BY_NAME",
    "INIT_METHOD_CALL",
    "INIT_STATIC_METHOD_CALL",
    "NEW",
    "FETCH_CONSTANT",
    "FETCH_CLASS",
    "DECLARE_FUNCTION",
    "DECLARE_CLASS",
}


def _vld_columns(rest: str) -> list[list[str]]:
    """Split the text after the opcode into whitespace-separated columns.

    Comma-joined tokens (``!0, 'x'``) stay in one column; quotes are respected.
    Quoted tokens keep their quotes so the caller can tell them apart.
    """
    columns: list[list[str]] = []
    i, n = 0, len(rest)
    joined = False
    while i < n:
        c = rest[i]
        if c.isspace():
            i += 1
            continue
        if c == ",":
            joined = True
            i += 1
            continue
        if c == "'":
            j = i + 1
            while j < n and rest[j] != "'":
                j += 2 if rest[j] == "\\" else 1
            tok = rest[i : min(j + 1, n)]
            i = j + 1
        else:
            j = i
            while j < n and not rest[j].isspace() and rest[j] != ",":
                j += 1
            tok = rest[i:j]
            i = j
        if joined and columns:
            columns[-1].append(tok)
        else:
            columns.append([tok])
        joined = False
    return columns


def _vld_operand(tok: str, opcode: str) -> Operand:
    if len(tok) >= 2 and tok[0] == "'" and tok[-1] == "'":
        body = tok[1:-1].replace("\\'", "'")
        if opcode in _VLD_NAME_OPS and NAME_RE.match(body):
            return Operand(OperandKind.NAME, body)
        return Operand(OperandKind.CONST_STRING, body)
    try:
        return classify_token(tok)
    except ValueError:
        return Operand(OperandKind.CONST_STRING, tok)


def import_vld(text: str) -> OpcodeDump:
    """Best-effort conversion of VLD opcode tables.

    Extended columns (fetch, ext, flags) are dropped. A row without a line
    number inherits the previous row's line.
    """
    units: dict[str, list[OpLine]] = {}
    order: list[str] = []
    current = MAIN
    last_line = 1

    for raw in text.splitlines():
        fm = _VLD_FUNC.match(raw)
        if fm:
            name = fm.group("name")
            current = MAIN if name in ("(null)", MAIN) else name
            continue
        m = _VLD_ROW.match(raw)
        if not m:
            continue
        if m.group("line") is not None:
            last_line = max(1, int(m.group("line")))
        opcode = m.group("op")
        columns = [c for c in _vld_columns(m.group("rest")) if " ".join(c) not in _VLD_FETCH]
        operand_toks: list[str] = []
        result_tok: Optional[str] = None
        if columns:
            operand_toks = columns[-1]
            if len(columns) >= 2 and len(columns[-2]) == 1 and VAR_RE.match(columns[-2][0]):
                result_tok = columns[-2][0]
            elif len(columns) == 1 and len(operand_toks) == 1 and re.match(r"[~$]\d+\Z", operand_toks[0]) \
                    and opcode not in ("RETURN", "ECHO", "FREE", "SEND_VAR", "SEND_VAL"):
                # a lone temporary after a value-producing opcode is its result column
                result_tok, operand_toks = operand_toks[0], []
        operands = tuple(_vld_operand(t, opcode) for t in operand_toks[:2])
        result = _vld_operand(result_tok, opcode) if result_tok else None

        ops = units.setdefault(current, [])
        if current not in order:
            order.append(current)
        idx = int(m.group("idx"))
        if ops and idx <= ops[-1].op_index:
            idx = ops[-1].op_index + 1
        ops.append(OpLine(last_line, idx, opcode, operands, result))

    if not order:
        raise FormatError(1, "no VLD instruction rows found")
    if MAIN not in units:
        raise FormatError(1, "no (main) block recovered")
    return OpcodeDump(tuple(FunctionUnit(name, units[name]) for name in order))
