import warnings
from collections import Counter

import pytest

from opshield import serialize_dump
from opshield.config import RunConfig, SplitSpec
from opshield.errors import EmptyDataset, TooFewSamples
from opshield.evaluation import (
    Sample,
    canonical_malicious,
    gen_corpus,
    opcode_overlap,
    read_corpus,
    run_ablation,
    split_dataset,
    split_indices,
    write_corpus,
)
from opshield.odt import Encoding, Label, detect_encoding
from opshield.opdump import OperandKind, parse_dump


def test_split_sizes_ten():
    parts = split_indices([0, 1] * 5, SplitSpec(stratified=False))
    assert tuple(map(len, parts)) == (8, 1, 1)


def test_split_is_partition_and_deterministic():
    labels = [i % 3 == 0 for i in range(50)]
    a = split_indices(labels, SplitSpec(seed=3))
    assert sorted(sum(a, [])) == list(range(50))
    assert a == split_indices(labels, SplitSpec(seed=3))
    assert a != split_indices(labels, SplitSpec(seed=4))


def test_stratified_balance():
    labels = [0] * 6 + [1] * 6
    parts = split_indices(labels, SplitSpec(0.5, 0.25, 0.25))
    for part in parts:
        counts = Counter(labels[i] for i in part)
        assert counts[0] == counts[1]


def test_split_every_part_nonempty():
    parts = split_indices([0, 1, 0, 1], SplitSpec())
    assert all(parts)


@pytest.mark.parametrize("labels, spec", [([0, 1], SplitSpec()), ([1] * 10, SplitSpec())])
def test_split_too_few(labels, spec):
    with pytest.raises(TooFewSamples):
        split_indices(labels, spec)


def test_split_dataset_uses_labels():
    samples = [Sample(f"s{i}", canonical_malicious(), Label(i % 2)) for i in range(20)]
    train, val, test = split_dataset(samples)
    assert len(train) + len(val) + len(test) == 20
    assert {s.label for s in val} == {Label.BENIGN, Label.WEBSHELL}


def test_generator_deterministic():
    a, b = gen_corpus(7, 15, 15), gen_corpus(7, 15, 15)
    assert [s.source_id for s in a] == [s.source_id for s in b]
    assert [serialize_dump(s.dump) for s in a] == [serialize_dump(s.dump) for s in b]
    assert [serialize_dump(s.dump) for s in a] != [serialize_dump(s.dump) for s in gen_corpus(8, 15, 15)]


def test_generator_labels_and_shape():
    corpus = gen_corpus(1, 40, 25)
    assert Counter(int(s.label) for s in corpus) == {0: 40, 1: 25}
    for s in corpus:
        assert 20 <= len(list(s.dump.iter_ops())) <= 400
        # output is valid, canonical dump text
        assert parse_dump(serialize_dump(s.dump)) == s.dump


def test_every_webshell_carries_base64():
    for s in gen_corpus(2, 1, 60):
        if s.label is not Label.WEBSHELL:
            continue
        strings = [o.raw for op in s.dump.iter_ops() for o in op.operands if o.kind is OperandKind.CONST_STRING]
        assert any(detect_encoding(v) is Encoding.BASE64 for v in strings), s.source_id


def test_opcode_overlap_large_corpus():
    assert opcode_overlap(gen_corpus(42, 500, 500)) >= 0.8


def test_corpus_round_trip(tmp_path):
    corpus = gen_corpus(5, 4, 4)
    write_corpus(corpus, tmp_path)
    assert (tmp_path / "labels.csv").read_text().splitlines()[0] == "source_id,label"
    assert read_corpus(tmp_path) == corpus


def test_ablation_guards():
    with pytest.raises(EmptyDataset):
        run_ablation([])


@pytest.mark.slow
def test_identical_modes_warn():
    cfg = RunConfig().with_seed(1)
    from opshield.config import from_mapping
    cfg = from_mapping({"train.epochs": "1", "embed.epochs": "1"}, cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = run_ablation(gen_corpus(3, 10, 10), cfg, modes=("odt", "odt"))
    assert any("identical" in str(w.message) for w in caught)
    assert report.delta == 0.0
