from pathlib import Path

import pytest
from hypothesis import strategies as st

from opshield.opdump import MAIN, FunctionUnit, Operand, OperandKind, OpcodeDump, OpLine

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


_ident = st.from_regex(r"[A-Za-z_][A-Za-z0-9_]{0,12}", fullmatch=True)
_number = st.one_of(
    st.integers(-10**9, 10**9).map(str),
    st.floats(allow_nan=False, allow_infinity=False, width=32).map(lambda f: repr(float(f)))
    .filter(lambda s: "inf" not in s and "nan" not in s),
)


def _var(sigil, kind):
    return st.integers(0, 999).map(lambda i: Operand(kind, f"{sigil}{i}"))


operands = st.one_of(
    st.text(max_size=40).map(lambda s: Operand(OperandKind.CONST_STRING, s)),
    _number.map(lambda s: Operand(OperandKind.CONST_NUMBER, s)),
    _ident.map(lambda s: Operand(OperandKind.NAME, s)),
    _var("!", OperandKind.COMPILED_VAR),
    _var("~", OperandKind.TEMP_VAR),
    _var("$", OperandKind.VAR),
)
_results = st.one_of(st.none(), _var("~", OperandKind.TEMP_VAR), _var("$", OperandKind.VAR))
_opcodes = st.from_regex(r"[A-Z][A-Z0-9_]{0,15}", fullmatch=True)
_operand_lists = st.one_of(
    st.just(()),
    st.tuples(operands),
    st.tuples(operands, operands),
    st.tuples(st.just(Operand(OperandKind.UNUSED)), operands),
)


@st.composite
def function_units(draw, name):
    n = draw(st.integers(1, 8))
    gaps = draw(st.lists(st.integers(1, 3), min_size=n, max_size=n))
    ops, idx, line = [], -1, draw(st.integers(1, 50))
    for g in gaps:
        idx += g
        line += draw(st.integers(0, 2))
        ops.append(OpLine(line, idx, draw(_opcodes), draw(_operand_lists), draw(_results)))
    return FunctionUnit(name, ops)


@st.composite
def dumps(draw):
    main = draw(function_units(MAIN))
    names = draw(st.lists(_ident, max_size=3))
    return OpcodeDump((main, *(draw(function_units(n)) for n in names)))
