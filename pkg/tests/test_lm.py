import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dense_reference import dense_run
from egrusim.lm import (
    EmbeddingTable,
    LanguageModel,
    PerplexityAccumulator,
    embed,
    evaluate_lm,
    generate,
    log_softmax,
    ppl_update,
    ppl_value,
    readout_logits,
    softmax,
)
from egrusim.sparse import DimensionError, EventVector
from egrusim.synth import synth_lm


def silent(model):
    """Same model with thresholds no state can reach."""
    layers = [dataclasses.replace(p, theta=np.full(p.n_units, 1e9, np.float32)) for p in model.layers]
    return dataclasses.replace(model, layers=layers)


def tiny_lm(seed=0, vocab=20, theta=0.1):
    return synth_lm((8, 12, 8), vocab_size=vocab, sparsity=0.5, seed=seed, theta=theta)


class TestEmbed:
    def test_row_lookup(self, rng):
        t = EmbeddingTable(rng.standard_normal((5, 3)))
        assert embed(0, t).tolist() == t.vectors[0].tolist()

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            embed(4, EmbeddingTable(np.eye(4)))

    def test_one_hot_rows(self):
        t = EmbeddingTable(np.eye(6))
        assert np.argmax(embed(3, t)) == 3 and embed(3, t).sum() == 1


class TestReadout:
    def test_zero_output(self, rng):
        t = EmbeddingTable(rng.standard_normal((7, 4)))
        assert readout_logits(np.zeros(4), t).tolist() == [0.0] * 7

    def test_orthonormal_table(self):
        t = EmbeddingTable(np.eye(5))
        assert readout_logits(t.vectors[2], t).tolist() == [0, 0, 1, 0, 0]

    def test_matches_brute_force_dot_products(self, rng):
        t = EmbeddingTable(rng.standard_normal((30, 16)))
        h = EventVector.from_dense(np.where(rng.random(16) < 0.4, rng.standard_normal(16), 0).astype(np.float32))
        expected = np.zeros(30, np.float32)
        for k in range(30):
            acc = np.float32(0)
            for i, v in zip(h.indices, h.values):
                acc = np.float32(acc + v * t.vectors[k, i])
            expected[k] = acc
        assert readout_logits(h, t).tobytes() == expected.tobytes()

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            readout_logits(np.ones(3), EmbeddingTable(np.eye(4)))


class TestSoftmax:
    def test_equal_logits(self):
        assert softmax([0, 0]).tolist() == [0.5, 0.5]

    def test_no_overflow(self):
        assert softmax([1000, 1000]).tolist() == [0.5, 0.5]

    def test_exact_ratio(self):
        assert softmax([math.log(1), math.log(3)]) == pytest.approx([0.25, 0.75], abs=1e-12)

    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-50, 50)), st.floats(-1e3, 1e3))
    def test_distribution_and_shift_invariance(self, z, shift):
        p = softmax(z)
        assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-6
        assert np.allclose(softmax(z + shift), p, rtol=1e-9, atol=1e-12)
        assert p[np.argmax(z)] == p.max()
        assert np.allclose(np.exp(log_softmax(z)), p, rtol=1e-9, atol=1e-15)


class TestPerplexity:
    def test_uniform_predictor(self):
        acc = PerplexityAccumulator()
        for t in (0, 3, 1, 1, 2):
            ppl_update(acc, np.full(4, 0.25), t)
        assert ppl_value(acc) == pytest.approx(4.0, rel=1e-12)

    def test_perfect_predictions(self):
        acc = PerplexityAccumulator()
        for t in (2, 0):
            ppl_update(acc, np.eye(3)[t], t)
        assert ppl_value(acc) == 1.0

    def test_two_token_arithmetic(self):
        acc = PerplexityAccumulator()
        ppl_update(acc, [0.5, 0.5], 0)
        ppl_update(acc, [0.125, 0.875], 0)
        assert ppl_value(acc) == pytest.approx(4.0, rel=1e-12)

    def test_zero_probability_reported_as_infinite(self):
        acc = PerplexityAccumulator()
        ppl_update(acc, [1.0, 0.0], 1)
        assert acc.zero_probability_count == 1 and ppl_value(acc) == math.inf

    def test_undefined_without_tokens(self):
        with pytest.raises(ValueError):
            ppl_value(PerplexityAccumulator())


class TestEvaluate:
    def test_silent_model_scores_vocab_size(self, rng):
        m = silent(tiny_lm(vocab=37))
        res = evaluate_lm(m, rng.integers(0, 37, 90))
        assert res.ppl == pytest.approx(37, rel=1e-9)
        assert res.layer_sparsity == [1.0, 1.0] and res.token_count == 89

    def test_single_chunk_matches_manual_oracle(self, rng):
        m = tiny_lm(1)
        toks = rng.integers(0, 20, 30)
        res = evaluate_lm(m, toks)
        outs = dense_run(m.layers, [m.embedding.vectors[t] for t in toks[:-1]])
        loss = 0.0
        for step, nxt in zip(outs, toks[1:]):
            logits = m.embedding.vectors.astype(np.float64) @ step[-1].astype(np.float64)
            loss -= log_softmax(logits)[nxt]
        assert res.ppl == pytest.approx(math.exp(loss / 29), rel=1e-5)
        assert 0 < res.layer_sparsity[0] < 1

    def test_deterministic(self, rng):
        m, toks = tiny_lm(2), rng.integers(0, 20, 50)
        assert evaluate_lm(m, toks).ppl == evaluate_lm(m, toks).ppl

    def test_chunking_invisible_with_carry_over(self, rng):
        m, toks = tiny_lm(3), rng.integers(0, 20, 160)
        assert evaluate_lm(m, toks, chunk_len=70).ppl == evaluate_lm(m, toks, chunk_len=35).ppl

    def test_reset_changes_later_chunks(self, rng):
        m, toks = tiny_lm(4), rng.integers(0, 20, 100)
        assert evaluate_lm(m, toks, chunk_len=10, reset_state=True).ppl != evaluate_lm(m, toks, chunk_len=10).ppl

    def test_pe_count_invisible(self, rng):
        m, toks = tiny_lm(5), rng.integers(0, 20, 40)
        assert evaluate_lm(m, toks, pes=[3, 2]).ppl == evaluate_lm(m, toks).ppl

    def test_needs_two_tokens(self):
        with pytest.raises(ValueError):
            evaluate_lm(tiny_lm(), [1])

    @given(st.integers(0, 2**16), st.integers(1, 80))
    def test_chunk_size_property(self, seed, chunk):
        rng = np.random.default_rng(seed)
        m, toks = tiny_lm(seed % 7), rng.integers(0, 20, 60)
        assert evaluate_lm(m, toks, chunk_len=chunk).ppl == evaluate_lm(m, toks).ppl


class TestGenerate:
    def test_zero_length(self):
        assert generate(tiny_lm(), [1, 2], 0) == []

    def test_same_seed_same_text(self):
        m = tiny_lm()
        assert generate(m, [3], 15, 1.0, seed=11) == generate(m, [3], 15, 1.0, seed=11)

    def test_seed_matters_at_high_temperature(self):
        m = tiny_lm()
        runs = {tuple(generate(m, [3], 15, 5.0, seed=s)) for s in range(4)}
        assert len(runs) > 1

    def test_greedy_is_seed_independent_and_equals_argmax(self):
        m = tiny_lm(6)
        out = generate(m, [4, 5], 10, 1e-9, seed=1)
        assert out == generate(m, [4, 5], 10, 1e-9, seed=99)
        sim = m.simulator()
        tok, expected = 5, []
        sim.step(embed(4, m.embedding))
        for _ in range(10):
            tok = int(np.argmax(readout_logits(sim.step(embed(tok, m.embedding))[-1], m.embedding)))
            expected.append(tok)
        assert out == expected

    def test_empty_prompt_uses_start_token(self):
        m = tiny_lm()
        assert generate(m, [], 5, 1e-9) == generate(m, [m.token_id("<eos>")], 5, 1e-9)

    def test_empty_prompt_without_start_token(self):
        m = dataclasses.replace(tiny_lm(), start_token=None)
        with pytest.raises(ValueError):
            generate(m, [], 3)

    @pytest.mark.parametrize("kw", [dict(temperature=0.0), dict(length=-1)])
    def test_bad_arguments(self, kw):
        args = dict(length=3, temperature=1.0) | kw
        with pytest.raises(ValueError):
            generate(tiny_lm(), [1], **args)


def test_model_checks_tied_dims(rng):
    m = tiny_lm()
    with pytest.raises(DimensionError):
        LanguageModel(m.layers, EmbeddingTable(rng.standard_normal((20, 5))), m.vocab)
