import math

import numpy as np
import pytest

from opshield import fasttext as ft
from opshield.errors import EmptyCorpus, EmptySequence, FormatError, InvalidConfig


def fnv1a_reference(data: bytes) -> int:
    # written from the published constants, independent of the module under test
    h = 0x811C9DC5
    for byte in data:
        h ^= byte
        h = (h * 0x01000193) % 2**32
    return h


def test_ngrams_eval():
    assert ft.char_ngrams("eval", 3, 3) == ["<ev", "eva", "val", "al>", "<eval>"]


def test_ngrams_short_token():
    assert ft.char_ngrams("ab", 3, 3) == ["<ab", "ab>", "<ab>"]


def test_ngrams_nothing_fits():
    assert ft.char_ngrams("ab", 5, 6) == ["<ab>"]


def test_ngrams_whole_token_counted_once():
    grams = ft.char_ngrams("abc", 3, 5)
    assert grams.count("<abc>") == 1


def test_fnv_constants():
    assert ft.hash_ngram("", 2**32) == 2166136261
    assert ft.hash_ngram("abc", 2**32) == 0x1A47E90B == fnv1a_reference(b"abc")
    assert all(ft.hash_ngram(s, 1) == 0 for s in ["", "a", "<eval>", "é"])


def test_fnv_matches_reference():
    rng = np.random.default_rng(3)
    for _ in range(300):
        s = "".join(chr(c) for c in rng.integers(32, 0x3FF, rng.integers(0, 12)))
        assert ft.hash_ngram(s, 2**32) == fnv1a_reference(s.encode("utf-8"))
        assert ft.hash_ngram(s, 1000) == fnv1a_reference(s.encode("utf-8")) % 1000


def _toy_model(rows: dict, dim=3, buckets=7):
    cfg = ft.SubwordConfig(buckets=buckets, dim=dim, epochs=0)
    model = ft.init_model([["A", "B"]], cfg)
    model.input_vectors[:] = 0.0
    for r, v in rows.items():
        model.input_vectors[r] = v
    return model


def test_token_vector_is_row_mean():
    model = _toy_model({})
    rows = model.rows_for("A")
    model.input_vectors[rows[0]] = [3.0, 0.0, 3.0]
    model.input_vectors[rows[1]] = [0.0, 6.0, 0.0]
    assert rows[0] == model.vocab["A"] and rows[1] >= model.vocab_size
    k = int((rows == rows[1]).sum())
    expected = (np.array([3.0, 0.0, 3.0]) + k * np.array([0.0, 6.0, 0.0])) / len(rows)
    np.testing.assert_allclose(ft.token_vector(model, "A"), expected)


def test_token_vector_zero_rows():
    model = _toy_model({})
    assert not ft.token_vector(model, "A").any()


def test_unseen_token_uses_same_ngrams():
    model = ft.init_model([["eval", "x"]], ft.SubwordConfig(buckets=101, dim=4, epochs=0))
    a = ft.token_vector(model, "evalz")
    b = ft.token_vector(model, "evalz")
    np.testing.assert_array_equal(a, b)
    # an unseen token has only its bucket rows
    assert len(model.rows_for("evalz")) == len(ft.char_ngrams("evalz", 3, 5))
    assert len(model.rows_for("eval")) == len(ft.char_ngrams("eval", 3, 5)) + 1


def test_doc_vector_properties():
    model = ft.init_model([["a1", "b2", "c3"]], ft.SubwordConfig(buckets=53, dim=5, epochs=0))
    np.testing.assert_allclose(ft.doc_vector(model, ["a1"]), ft.token_vector(model, "a1"))
    toks = ["a1", "b2", "c3", "a1"]
    np.testing.assert_allclose(ft.doc_vector(model, toks), ft.doc_vector(model, toks[::-1]), atol=1e-15)
    with pytest.raises(EmptySequence):
        ft.doc_vector(model, [])


def test_doc_vector_cancels():
    model = _toy_model({})
    ra, rb = model.rows_for("A"), model.rows_for("B")
    if set(ra.tolist()) & set(rb.tolist()):
        pytest.skip("hash collision between toy tokens")
    model.input_vectors[ra] = 1.0
    model.input_vectors[rb] = -1.0
    assert not ft.doc_vector(model, ["A", "B"]).any()


def test_init_ranges():
    cfg = ft.SubwordConfig(buckets=1000, dim=16, epochs=0)
    model = ft.train_skipgram([["a", "b", "c"]], cfg)
    assert np.abs(model.input_vectors).max() <= 1 / 16
    assert not model.output_vectors.any()
    np.testing.assert_array_equal(model.input_vectors, ft.init_model([["a", "b", "c"]], cfg).input_vectors)


def test_pair_scores_after_training():
    cfg = ft.SubwordConfig(dim=8, buckets=1000, epochs=5, window=1, negatives=5)
    model = ft.train_skipgram([["A", "B"]] * 500, cfg)
    u_b = model.output_vectors[model.vocab["B"]]
    v_a = ft.token_vector(model, "A")
    sigma = 1 / (1 + math.exp(-u_b @ v_a))
    assert sigma > 0.9
    assert model.loss_history[-1] < math.log(2)
    assert all(math.isfinite(x) for x in model.loss_history)


def test_training_is_deterministic():
    cfg = ft.SubwordConfig(dim=8, buckets=500, epochs=2)
    docs = [["x", "y", "z", "x"], ["y", "z"]] * 20
    a, b = ft.train_skipgram(docs, cfg), ft.train_skipgram(docs, cfg)
    np.testing.assert_array_equal(a.input_vectors, b.input_vectors)
    np.testing.assert_array_equal(a.output_vectors, b.output_vectors)
    assert a.loss_history == b.loss_history


def test_loss_decreases_on_synthetic_corpus():
    from opshield.config import RunConfig
    from opshield.evaluation import extract_corpus, gen_corpus

    seqs = extract_corpus(gen_corpus(0, 20, 20), RunConfig())
    model = ft.train_skipgram(seqs, ft.SubwordConfig(dim=16, buckets=5000, epochs=5))
    assert len(model.loss_history) == 5
    assert all(math.isfinite(x) for x in model.loss_history)
    assert model.loss_history[-1] < model.loss_history[0]


def test_empty_corpus():
    with pytest.raises(EmptyCorpus):
        ft.train_skipgram([[], []])


def test_bad_config():
    with pytest.raises(InvalidConfig):
        ft.SubwordConfig(minn=4, maxn=3)


def test_zero_output_loss_is_ln2():
    rng = np.random.default_rng(0)
    inp = rng.normal(size=(10, 4))
    out = np.zeros((3, 4))
    loss, _, _ = ft.pair_loss_and_grads(inp, out, [0, 5, 6], 1, [2, 0])
    assert loss == pytest.approx(3 * math.log(2))


def test_pair_gradient_check():
    rng = np.random.default_rng(1)
    inp = rng.normal(scale=0.5, size=(12, 5))
    out = rng.normal(scale=0.5, size=(4, 5))
    rows, target, negs = [0, 7, 9, 9], 2, [1, 3]
    _, d_inp, d_out = ft.pair_loss_and_grads(inp, out, rows, target, negs)
    h = 1e-5
    coords = [("inp", i, j) for i in (0, 7, 9, 3) for j in range(5)] + [("out", i, j) for i in range(4) for j in range(5)]
    for name, i, j in coords:
        arr = inp if name == "inp" else out
        old = arr[i, j]
        arr[i, j] = old + h
        lp = ft.pair_loss_and_grads(inp, out, rows, target, negs)[0]
        arr[i, j] = old - h
        lm = ft.pair_loss_and_grads(inp, out, rows, target, negs)[0]
        arr[i, j] = old
        num = (lp - lm) / (2 * h)
        ana = (d_inp if name == "inp" else d_out)[i, j]
        assert abs(num - ana) <= 1e-4 * max(1.0, abs(num), abs(ana)), (name, i, j, num, ana)


def test_kernel_matches_reference_sgd():
    """With no negatives and window 1 the training loop is fully determined; replay it with plain SGD."""
    docs = [["A", "B", "A", "C"], ["C", "B"]]
    cfg = ft.SubwordConfig(dim=4, buckets=31, window=1, negatives=0, epochs=3, lr=0.2)
    trained = ft.train_skipgram(docs, cfg)

    ref = ft.init_model(docs, cfg)
    inp, out = ref.input_vectors.copy(), ref.output_vectors.copy()
    total = cfg.epochs * sum(map(len, docs))
    step = 0
    for _ in range(cfg.epochs):
        for doc in docs:
            for i, tok in enumerate(doc):
                lr = cfg.lr * (1 - step / total)
                step += 1
                for j in (i - 1, i + 1):
                    if 0 <= j < len(doc):
                        _, d_inp, d_out = ft.pair_loss_and_grads(inp, out, ref.rows_for(tok), ref.vocab[doc[j]], [])
                        inp -= lr * d_inp
                        out -= lr * d_out
    np.testing.assert_allclose(trained.input_vectors, inp, atol=1e-12)
    np.testing.assert_allclose(trained.output_vectors, out, atol=1e-12)


def test_vec_round_trip():
    cfg = ft.SubwordConfig(dim=3, buckets=11, epochs=1)
    model = ft.train_skipgram([["a b", "x\\y", "tab\t", "plain"]] * 3, cfg)
    text = ft.save_vec(model)
    assert len(text.splitlines()) == model.vocab_size + 1
    vocab, vectors = ft.load_vec(text)
    assert vocab == model.vocab
    np.testing.assert_allclose(vectors, model.input_vectors[: model.vocab_size], atol=5e-7)
    restored = ft.load_model(text, ft.save_buckets(model), cfg)
    np.testing.assert_allclose(ft.doc_vector(restored, ["a b", "unseen"]),
                               ft.doc_vector(model, ["a b", "unseen"]), atol=1e-6)


def test_vec_two_tokens_three_lines():
    model = ft.init_model([["p", "q"]], ft.SubwordConfig(dim=3, buckets=5, epochs=0))
    assert len(ft.save_vec(model).splitlines()) == 3


@pytest.mark.parametrize(
    "text",
    ["", "2 3\na 1 2 3 4\nb 1 2 3\n", "2 3\na 1 2 3\n", "x y\n", "1 2\na 1 zz\n", "1 1\na\\q 1\n",
     "2 1\na 1\na 2\n"],
)
def test_vec_format_errors(text):
    with pytest.raises(FormatError):
        ft.load_vec(text)


def test_bucket_format_errors():
    with pytest.raises(FormatError):
        ft.load_buckets(b"NOPE" + bytes(12))
    good = ft.save_buckets(ft.init_model([["a"]], ft.SubwordConfig(dim=2, buckets=3, epochs=0)))
    with pytest.raises(FormatError):
        ft.load_buckets(good[:-1])
