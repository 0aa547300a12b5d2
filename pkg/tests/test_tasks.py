import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridssm.model import HybridModel, ModelConfig
from hybridssm.numerics import Tensor, cross_entropy
from hybridssm.tasks import (
    Sample,
    TaskSpec,
    Tokenizer,
    edit_distance,
    gen_copy,
    gen_kv_recall,
    generate,
    load_dataset,
    load_text,
    make_batch,
    save_dataset,
    token_error_rate,
)

# -- tokenizer ---------------------------------------------------------------------------------


def test_tokenizer_specials_outside_data_range():
    for tok in (Tokenizer("symbol", 10), Tokenizer("byte")):
        specials = {tok.PAD, tok.BOS, tok.SEP, tok.EOS}
        assert len(specials) == 4 and min(specials) >= tok.data_size
        assert max(specials) == tok.vocab_size - 1


def test_tokenizer_round_trip():
    tok = Tokenizer("byte")
    text = "héllo\x00\xff".encode("utf-8")
    assert tok.decode(tok.encode(text)) == text
    sym = Tokenizer("symbol", 5)
    assert sym.decode(sym.encode([0, 4, 2])) == [0, 4, 2]
    with pytest.raises(ValueError):
        sym.encode([5])
    with pytest.raises(ValueError):
        Tokenizer("words")


# -- copy ------------------------------------------------------------------------------------


def test_copy_definition():
    spec = TaskSpec(kind="copy", n_samples=50, seed=0, n_symbols=6, min_len=1, max_len=5)
    tok = spec.tokenizer()
    for s in gen_copy(spec):
        payload = s.prompt[1:-1]
        assert s.prompt[0] == tok.BOS and s.prompt[-1] == tok.SEP
        assert np.array_equal(s.target, np.append(payload, tok.EOS))
        assert 1 <= len(payload) <= 5
        assert len(s.prompt) + len(s.target) <= spec.max_seq_len()


def test_copy_is_pure_function_of_spec():
    spec = TaskSpec(kind="copy", n_samples=20, seed=9)
    a, b = gen_copy(spec), gen_copy(spec)
    assert all(np.array_equal(x.prompt, y.prompt) and np.array_equal(x.target, y.target) for x, y in zip(a, b))
    c = gen_copy(replace(spec, seed=10))
    assert any(not np.array_equal(x.prompt, y.prompt) for x, y in zip(a, c))


def test_copy_rejects_empty_payload():
    with pytest.raises(ValueError):
        gen_copy(TaskSpec(kind="copy", min_len=0))


def test_copy_symbol_frequencies_within_3_sigma():
    spec = TaskSpec(kind="copy", n_samples=20_000, seed=3, n_symbols=16, min_len=5, max_len=5)
    counts = np.zeros(16)
    for s in gen_copy(spec):
        counts += np.bincount(s.prompt[1:-1], minlength=16)
    n = counts.sum()
    assert n == 100_000
    p = 1 / 16
    sigma = math.sqrt(n * p * (1 - p))
    assert np.abs(counts - n * p).max() < 3 * sigma


# -- kv recall -----------------------------------------------------------------------------


def test_kv_recall_single_pair():
    spec = TaskSpec(kind="kv_recall", n_samples=30, seed=0, n_pairs=1, n_keys=4, n_values=4)
    for s in gen_kv_recall(spec):
        assert s.target[0] == s.prompt[2]


def test_kv_recall_well_posed():
    spec = TaskSpec(kind="kv_recall", n_samples=200, seed=1, n_pairs=4, n_keys=6, n_values=5)
    tok = spec.tokenizer()
    for s in gen_kv_recall(spec):
        body = s.prompt[1:-2]
        keys, values = body[0::2], body[1::2]
        assert len(set(keys.tolist())) == 4
        q = s.prompt[-1]
        assert q in keys
        assert s.target.tolist() == [values[list(keys).index(q)], tok.EOS]
        assert len(s.prompt) + len(s.target) <= spec.max_seq_len()


def test_kv_recall_needs_enough_keys():
    with pytest.raises(ValueError):
        gen_kv_recall(TaskSpec(kind="kv_recall", n_pairs=5, n_keys=4))
    with pytest.raises(ValueError):
        gen_kv_recall(TaskSpec(kind="kv_recall", n_pairs=0))


def test_kv_recall_chance_accuracy_monte_carlo():
    spec = TaskSpec(kind="kv_recall", n_samples=20_000, seed=2, n_pairs=4, n_keys=8, n_values=8)
    data = gen_kv_recall(spec)
    answers = np.array([s.target[0] for s in data])
    # a predictor that samples from the value marginal (independent of the prompt)
    guesses = np.random.default_rng(0).choice(answers, size=answers.size)
    acc = float((guesses == answers).mean())
    assert abs(acc - 1 / 8) < 0.01


# -- text ----------------------------------------------------------------------------------


def test_text_one_byte_file_is_error(tmp_path):
    p = tmp_path / "one.txt"
    p.write_bytes(b"a")
    with pytest.raises(ValueError):
        load_text(p, 4)
    with pytest.raises(ValueError):
        load_text(tmp_path / "missing.txt", 4)


@pytest.mark.parametrize("n,c", [(2, 1), (10, 3), (33, 8), (100, 7)])
def test_text_window_count_and_round_trip(tmp_path, n, c):
    data = bytes(np.random.default_rng(n).integers(0, 256, n).astype(np.uint8))
    p = tmp_path / "t.bin"
    p.write_bytes(data)
    windows = load_text(p, c)
    assert len(windows) == (n - 1) // c
    tok = Tokenizer("byte")
    joined = b"".join(tok.decode(w.prompt) + tok.decode(w.target[:-1]) for w in windows)
    joined += tok.decode(windows[-1].target[-1:])
    assert data.startswith(joined)
    for w in windows:
        assert len(w.prompt) == 1 and len(w.target) == c


# -- error rate ----------------------------------------------------------------------------


def test_error_rate_examples():
    assert token_error_rate([1, 2, 3], [1, 2, 3]).rate == 0.0
    assert token_error_rate([], [1, 2, 3, 4, 5]).rate == 1.0
    er = token_error_rate(list("abcd"), list("axc"))
    assert er.edits == 2 and math.isclose(er.rate, 2 / 3)
    with pytest.raises(ValueError):
        token_error_rate([1], [])


_seqs = st.lists(st.integers(0, 3), max_size=8)


@settings(max_examples=200, deadline=None)
@given(_seqs, _seqs, _seqs)
def test_edit_distance_is_a_metric(a, b, c):
    assert edit_distance(a, b) == edit_distance(b, a)
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)
    assert (edit_distance(a, b) == 0) == (a == b)


# -- batching and loss masking ------------------------------------------------------------------


def test_batch_layout():
    tok = Tokenizer("symbol", 4)
    s = Sample(np.array([tok.BOS, 1, 2, tok.SEP]), np.array([1, 2, tok.EOS]))
    short = Sample(np.array([tok.BOS, 3, tok.SEP]), np.array([3, tok.EOS]))
    b = make_batch([s, short], tok.PAD)
    assert b.inputs[0].tolist() == [tok.BOS, 1, 2, tok.SEP, 1, 2]
    assert b.labels[0].tolist() == [1, 2, tok.SEP, 1, 2, tok.EOS]
    assert b.loss_mask[0].tolist() == [0, 0, 0, 1, 1, 1]
    assert b.loss_mask[1].tolist() == [0, 0, 1, 1, 0, 0]
    assert b.valid[1].tolist() == [1, 1, 1, 1, 0, 0]


def test_prompt_logits_do_not_affect_loss():
    spec = TaskSpec(kind="copy", n_samples=6, seed=4, n_symbols=8, min_len=2, max_len=5)
    tok = spec.tokenizer()
    batch = make_batch(generate(spec), tok.PAD)
    cfg = ModelConfig(vocab=tok.vocab_size, d=16, depth=1, h=2, h_kv=1, d_k=4, d_v=4, d_ff=16, max_len=16)
    logits = HybridModel.init(cfg, seed=0).forward(batch.inputs).logits.data
    base = float(cross_entropy(logits, batch.labels, batch.loss_mask).data)
    noisy = logits.copy()
    outside = batch.loss_mask == 0
    noisy[outside] += np.random.default_rng(0).standard_normal(noisy[outside].shape).astype(np.float32) * 10
    assert float(cross_entropy(Tensor(noisy), batch.labels, batch.loss_mask).data) == base
    noisy[batch.loss_mask > 0] += 1.0
    noisy[0, int(np.argmax(batch.loss_mask[0])), 0] += 5.0
    assert float(cross_entropy(Tensor(noisy), batch.labels, batch.loss_mask).data) != base


# -- disk cache ------------------------------------------------------------------------------


def test_dataset_cache_round_trip(tmp_path):
    data = generate(TaskSpec(kind="kv_recall", n_samples=25, seed=5))
    path = tmp_path / "ds.bin"
    save_dataset(data, path)
    raw = path.read_bytes()
    assert int.from_bytes(raw[:4], "little") == 25
    back = load_dataset(path)
    assert all(np.array_equal(a.prompt, b.prompt) and np.array_equal(a.target, b.target) for a, b in zip(data, back))
    path.write_bytes(raw[:-3])
    with pytest.raises(ValueError):
        load_dataset(path)
