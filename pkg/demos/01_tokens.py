"""From opcode dump to token sequence.

Parses the bundled eval(base64_decode(...)) dump and prints what each stage
makes of it: the filtered instructions, the decoded operands and the two
token views (operand-aware ODT and opcode-only OST).

    python demos/01_tokens.py
"""

from pathlib import Path

from opshield import Mode, decode_operand, detect_encoding, extract_sequence, parse_dump
from opshield.odt import filter_ops, normalize_operand

FIXTURE = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "eval_b64.odump"

dump = parse_dump(FIXTURE.read_text())
print(f"{len(dump)} instructions in {len(dump.functions)} function unit(s)\n")

print("kept instructions and their normalized operands:")
for op in filter_ops(dump):
    toks = [normalize_operand(o) for o in op.operands]
    print(f"  {op.opcode:<16} {' '.join(t for t in toks if t is not None)}")

payload = next(o.raw for op in dump.iter_ops() for o in op.operands if len(o.raw) > 64)
print(f"\nlong operand: {payload[:40]}... ({len(payload)} chars)")
print(f"  detected as {detect_encoding(payload).name}, decodes to {len(decode_operand(payload))} chars")

for mode in Mode:
    seq = extract_sequence(dump, mode=mode)
    print(f"\n{mode.value.upper()} ({len(seq)} tokens):\n  " + " ".join(seq.tokens))

print("\nnested encodings unwind up to three levels:")
for s in ("ZXZhbA==", "WlhaaGJBPT0=", "%73%79%73%74%65%6d"):
    print(f"  {s:<22} -> {decode_operand(s)}")
