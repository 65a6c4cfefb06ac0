import random

import pytest
from hypothesis import given, settings

from conftest import dumps
from opshield.errors import FormatError
from opshield.opdump import (
    MAIN,
    FunctionUnit,
    Operand,
    OperandKind,
    OpcodeDump,
    OpLine,
    import_vld,
    parse_dump,
    serialize_dump,
)

ONE_OP = "#odump 1\nfn (main)\n1\t0\tECHO\t'hi'\t\n"


def test_parse_single_echo():
    dump = parse_dump(ONE_OP)
    assert len(dump.functions) == 1
    (op,) = dump.main.ops
    assert op.opcode == "ECHO"
    assert op.operands == (Operand(OperandKind.CONST_STRING, "hi"),)
    assert op.result is None


def test_serialize_single_echo():
    assert serialize_dump(parse_dump(ONE_OP)) == ONE_OP


@pytest.mark.parametrize(
    "text, line, fragment",
    [
        ("", 1, "missing header"),
        ("#odump 2\nfn (main)\n1\t0\tNOP\t\t\n", 1, "version"),
        ("#odump 1\n1\t0\tNOP\t\t\n", 2, "outside"),
        ("#odump 1\nfn (main)\n1\t0\tNOP\n", 3, "malformed"),
        ("#odump 1\nfn (main)\n1\t1\tNOP\t\t\n1\t1\tNOP\t\t\n", 4, "op_index"),
        ("#odump 1\nfn f\n1\t0\tNOP\t\t\n", None, "(main)"),
        ("#odump 1\nfn (main)\n1\t0\tECHO\t'unterminated\t\n", 3, None),
        ("#odump 1\nfn (main)\n1\t0\tECHO\ta|b|c\t\n", 3, None),
        ("#odump 1\nfn (main)\n1\t0\tlower\t\t\n", 3, None),
    ],
)
def test_parse_errors(text, line, fragment):
    with pytest.raises(FormatError) as err:
        parse_dump(text)
    if line is not None:
        assert err.value.line_no == line
    if fragment is not None:
        assert fragment in str(err.value)


def test_duplicate_main_rejected():
    text = "#odump 1\nfn (main)\n1\t0\tNOP\t\t\nfn (main)\n2\t0\tNOP\t\t\n"
    with pytest.raises(FormatError, match="duplicate"):
        parse_dump(text)


def test_main_serialized_first():
    f = FunctionUnit("helper", [OpLine(1, 0, "RETURN", (Operand(OperandKind.CONST_NUMBER, "1"),))])
    m = FunctionUnit(MAIN, [OpLine(2, 0, "ECHO", (Operand(OperandKind.CONST_STRING, "x"),))])
    text = serialize_dump(OpcodeDump((f, m)))
    assert text.splitlines()[1] == "fn (main)"
    assert text.index("fn helper") > text.index("fn (main)")


def test_string_escapes_round_trip():
    s = "a'b\\c\td\ne\rf|g"
    dump = OpcodeDump((FunctionUnit(MAIN, [OpLine(1, 0, "ECHO", (Operand(OperandKind.CONST_STRING, s),))]),))
    text = serialize_dump(dump)
    assert "\n" not in text.splitlines()[2]
    assert parse_dump(text) == dump


def test_operand_kinds_from_text():
    text = "#odump 1\nfn (main)\n1\t0\tASSIGN\t!0|-1.5e3\t\n1\t1\tFETCH_R\t_GET\t$1\n1\t2\tADD\t~2|$1\t~3\n"
    ops = parse_dump(text).main.ops
    assert [o.kind for o in ops[0].operands] == [OperandKind.COMPILED_VAR, OperandKind.CONST_NUMBER]
    assert ops[1].operands[0].kind is OperandKind.NAME
    assert ops[1].result == Operand(OperandKind.VAR, "$1")
    assert [o.kind for o in ops[2].operands] == [OperandKind.TEMP_VAR, OperandKind.VAR]


def test_shipped_fixtures_round_trip(fixtures):
    for path in sorted(fixtures.glob("*.odump")):
        text = path.read_text(encoding="utf-8")
        assert serialize_dump(parse_dump(text)) == text, path.name


def test_eval_fixture_has_twelve_lines(fixtures):
    assert len((fixtures / "eval_b64.odump").read_text().splitlines()) == 12


@settings(max_examples=100, deadline=None)
@given(dumps())
def test_round_trip_property(dump):
    assert parse_dump(serialize_dump(dump)) == dump


def _mutate(rng: random.Random, text: str) -> str:
    chars = list(text)
    for _ in range(rng.randint(1, 6)):
        op = rng.random()
        pos = rng.randrange(len(chars) + 1)
        if op < 0.4 and chars:
            del chars[min(pos, len(chars) - 1)]
        elif op < 0.8:
            chars.insert(pos, rng.choice("\t\n|'\\!~$#0aZ-. é\x00"))
        elif chars:
            chars[min(pos, len(chars) - 1)] = chr(rng.randrange(0x20, 0x2FF))
    return "".join(chars)


def test_parse_fuzz_never_crashes(fixtures):
    """10^5 random and mutated inputs: either a dump or a FormatError, nothing else."""
    rng = random.Random(1234)
    seeds = [ONE_OP] + [p.read_text() for p in sorted(fixtures.glob("*.odump"))]
    alphabet = "#odump 1\nfn(main)\t|'\\!~$0123456789ABCZ_ -.e"
    accepted = 0
    for i in range(100_000):
        if i % 2:
            text = _mutate(rng, rng.choice(seeds))
        else:
            text = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 60)))
        try:
            dump = parse_dump(text)
        except FormatError:
            continue
        accepted += 1
        assert parse_dump(serialize_dump(dump)) == dump
    assert accepted > 0


# --- VLD adapter ----------------------------------------------------------------

def test_vld_single_row():
    text = (
        "function name:  (null)\n"
        "line      #* E I O op                           fetch          ext  return  operands\n"
        "-------------------------------------------------------------------------------------\n"
        "   2     0  E >   INIT_FCALL    'phpinfo'\n"
    )
    (op,) = import_vld(text).main.ops
    assert (op.src_line, op.op_index, op.opcode) == (2, 0, "INIT_FCALL")
    assert op.operands == (Operand(OperandKind.NAME, "phpinfo"),)


def test_vld_fixture_matches_frozen_output(fixtures):
    dump = import_vld((fixtures / "vld_hello.txt").read_text())
    assert serialize_dump(dump) == (fixtures / "vld_hello.odump").read_text()
    ops = dump.main.ops
    assert [o.opcode for o in ops][:2] == ["INIT_FCALL", "DO_ICALL"]
    assert ops[1].src_line == 2  # continuation rows inherit the line number
    assert ops[3].result == Operand(OperandKind.TEMP_VAR, "~2")


def test_vld_prose_rejected():
    with pytest.raises(FormatError):
        import_vld("This is just an English paragraph.\nNothing to see here.\n")


def test_vld_header_lines_are_not_instructions(fixtures):
    dump = import_vld((fixtures / "vld_hello.txt").read_text())
    assert all(o.opcode != "LINE" for o in dump.iter_ops())
    assert len(dump) == 8
