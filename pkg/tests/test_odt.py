import base64
import io
import math
import random
from collections import Counter

import pytest

from opshield.errors import EmptyInput, EmptySequence
from opshield.odt import (
    DEFAULT_POLICY,
    DEFAULT_RULES,
    DecodePolicy,
    Encoding,
    FilterRules,
    Label,
    Mode,
    Policy,
    TokenSequence,
    decode_operand,
    decode_trace,
    detect_encoding,
    extract_sequence,
    filter_ops,
    normalize_operand,
    read_jsonl,
    shannon_entropy,
    write_jsonl,
)
from opshield.opdump import MAIN, FunctionUnit, Operand, OperandKind, OpcodeDump, OpLine, parse_dump

S = OperandKind.CONST_STRING


def _dump(*opcodes):
    return OpcodeDump((FunctionUnit(MAIN, [OpLine(1, i, op) for i, op in enumerate(opcodes)]),))


def test_default_filter():
    kept = filter_ops(_dump("ECHO", "EXT_STMT", "INCLUDE_OR_EVAL"))
    assert [o.opcode for o in kept] == ["ECHO", "INCLUDE_OR_EVAL"]


def test_identity_and_annihilating_rules():
    dump = _dump("ECHO", "FOO", "NOP", "ADD")
    identity = FilterRules(frozenset(), frozenset(), Policy.KEEP_UNKNOWN)
    assert filter_ops(dump, identity) == list(dump.iter_ops())
    drop_all = FilterRules(frozenset(), frozenset({"ECHO", "FOO", "NOP", "ADD"}), Policy.KEEP_UNKNOWN)
    assert filter_ops(dump, drop_all) == []


def test_unknown_policy():
    dump = _dump("ECHO", "MYSTERY")
    assert [o.opcode for o in filter_ops(dump, DEFAULT_RULES)] == ["ECHO", "MYSTERY"]
    strict = FilterRules(DEFAULT_RULES.keep, DEFAULT_RULES.drop, Policy.DROP_UNKNOWN)
    assert [o.opcode for o in filter_ops(dump, strict)] == ["ECHO"]


def test_overlapping_rules_rejected():
    with pytest.raises(ValueError):
        FilterRules(frozenset({"ECHO"}), frozenset({"ECHO"}), Policy.KEEP_UNKNOWN)


@pytest.mark.parametrize(
    "s, enc",
    [("ZXZhbA==", Encoding.BASE64), ("%68%65%6C%6C%6F", Encoding.URL), ("hello", Encoding.PLAIN),
     ("abc%zz", Encoding.PLAIN), ("", Encoding.PLAIN), ("ZXZh", Encoding.PLAIN)],
)
def test_detect_encoding(s, enc):
    assert detect_encoding(s) is enc


@pytest.mark.parametrize("s, out", [("ZXZhbA==", "eval"), ("WlhaaGJBPT0=", "eval"), ("hello", "hello"),
                                    ("%68%65%6C%6C%6F", "hello")])
def test_decode_operand(s, out):
    assert decode_operand(s) == out


def test_decode_two_level_against_stdlib():
    inner = base64.b64encode(b"eval").decode()
    outer = base64.b64encode(inner.encode()).decode()
    assert outer == "WlhaaGJBPT0="
    assert decode_trace(outer) == ("eval", 2)


def test_decode_depth_capped():
    s = "system('id');"
    for _ in range(6):
        s = base64.b64encode(s.encode()).decode()
    text, depth = decode_trace(s, DecodePolicy(max_depth=3))
    assert depth == 3
    assert text != "system('id');"


def test_binary_base64_left_alone():
    blob = base64.b64encode(bytes(range(256))).decode()
    assert detect_encoding(blob) is Encoding.PLAIN
    assert decode_operand(blob) == blob


def test_decode_fuzz():
    """10^5 random strings: no exception, depth within the cap."""
    rng = random.Random(99)
    pools = ["ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/=", "%0123456789abcdefABCDEFgz",
             "".join(map(chr, range(32, 127))) + "\x00\n\té€"]
    for i in range(100_000):
        pool = pools[i % 3]
        s = "".join(rng.choice(pool) for _ in range(rng.randint(0, 40)))
        if i % 7 == 0:
            s = base64.b64encode(s.encode()).decode()
        detect_encoding(s)
        text, depth = decode_trace(s, DEFAULT_POLICY)
        assert 0 <= depth <= DEFAULT_POLICY.max_depth
        assert decode_operand(s) == text


def _reference_entropy(s: str) -> float:
    n = len(s)
    return -sum(c / n * math.log2(c / n) for c in Counter(s).values())


@pytest.mark.parametrize("s, h", [("aaaa", 0.0), ("ab", 1.0), ("abcd", 2.0)])
def test_entropy_values(s, h):
    assert shannon_entropy(s) == pytest.approx(h, abs=1e-12)


def test_entropy_matches_reference():
    rng = random.Random(5)
    for _ in range(500):
        s = "".join(rng.choice("abcdefghij0123456789") for _ in range(rng.randint(1, 80)))
        assert shannon_entropy(s) == pytest.approx(_reference_entropy(s), abs=1e-12)


def test_entropy_empty():
    with pytest.raises(EmptyInput):
        shannon_entropy("")


def test_normalize_operand():
    assert normalize_operand(Operand(S, "ZXZhbA==")) == "eval"
    assert normalize_operand(Operand(OperandKind.CONST_NUMBER, "42")) == "<num>"
    assert normalize_operand(Operand(OperandKind.TEMP_VAR, "~3")) == "<var>"
    assert normalize_operand(Operand(S, "MiXeD")) == "mixed"
    symbols = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_"
    high = "".join(symbols[i % 64] for i in range(128))  # uniform over 64 symbols: 6 bits/char
    assert _reference_entropy(high) == pytest.approx(6.0)
    assert normalize_operand(Operand(S, high)) == "<str:H>"
    assert normalize_operand(Operand(S, "ab" * 40)) == "<str:L>"
    assert normalize_operand(Operand(S, "the quick brown fox jumps over the lazy dog " * 2)) == "<str:M>"


def test_extract_fixture(fixtures):
    dump = parse_dump((fixtures / "eval_b64.odump").read_text())
    odt = extract_sequence(dump, mode=Mode.ODT).tokens
    assert odt[:5] == ["INIT_FCALL", "base64_decode", "SEND_VAL", "<str:H>", "DO_ICALL"]
    ost = extract_sequence(dump, mode=Mode.OST).tokens
    assert ost == ["INIT_FCALL", "SEND_VAL", "DO_ICALL", "INCLUDE_OR_EVAL", "FETCH_R", "FETCH_DIM_R",
                   "INIT_FCALL", "SEND_VAR", "DO_ICALL", "RETURN"]


def test_extract_small_example():
    text = "#odump 1\nfn (main)\n1\t0\tINIT_FCALL\tbase64_decode\t\n1\t1\tDO_ICALL\t\t$0\n"
    dump = parse_dump(text)
    assert extract_sequence(dump).tokens == ["INIT_FCALL", "base64_decode", "DO_ICALL"]
    assert extract_sequence(dump, mode=Mode.OST).tokens == ["INIT_FCALL", "DO_ICALL"]


def test_result_operand_not_tokenized():
    dump = parse_dump("#odump 1\nfn (main)\n1\t0\tCONCAT\t'a'|'b'\t~9\n")
    assert extract_sequence(dump).tokens == ["CONCAT", "a", "b"]


def test_all_dropped_is_empty_sequence():
    with pytest.raises(EmptySequence):
        extract_sequence(_dump("NOP", "EXT_STMT"))


def test_jsonl_round_trip():
    seqs = [TokenSequence(["ECHO", "hi\n"], Label.WEBSHELL, "a", Mode.ODT),
            TokenSequence(["ECHO"], None, "b", Mode.OST)]
    buf = io.StringIO()
    write_jsonl(seqs, buf)
    buf.seek(0)
    assert read_jsonl(buf) == seqs
