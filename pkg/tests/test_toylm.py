"""Tests for the Markov-chain model, prompt pools and generation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from wmobserve.errors import InvalidLength, InvalidSpec
from wmobserve.prf import RandomStream, derive_seed
from wmobserve.schemes import KGWSampler, SchemeConfig
from wmobserve.toylm import (
    DENSE_LIMIT,
    Model,
    ModelSpec,
    PlainSampler,
    Prompt,
    build_model,
    build_prompt_pool,
    generate,
    generate_batch,
    next_dist,
    sample_index,
)


def entropy(p):
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def oracle_row(seed, ctx, vocab, conc, smoothing):
    """Second implementation of the row construction (Gamma draws, normalize, mix)."""
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *ctx])))
    g = gen.gamma(conc, 1.0, size=vocab)
    return (1 - smoothing) * g / g.sum() + smoothing / vocab


@pytest.fixture(scope="module")
def small_model():
    return build_model(ModelSpec(vocab_size=16, order=1, concentration=0.5, smoothing=0.1), seed=3)


class TestBuildModel:
    """Model construction."""

    def test_smoothing_one_is_uniform(self):
        m = build_model(ModelSpec(vocab_size=8, order=0, smoothing=1.0), seed=123)
        np.testing.assert_allclose(m.next_dist([]), np.full(8, 1 / 8), rtol=0, atol=1e-15)

    def test_deterministic(self):
        spec = ModelSpec(vocab_size=32, order=2)
        a, b = build_model(spec, 9), build_model(spec, 9)
        np.testing.assert_array_equal(a.dense_table, b.dense_table)

    def test_seed_changes_table(self):
        spec = ModelSpec(vocab_size=32, order=1)
        assert not np.array_equal(build_model(spec, 1).dense_table, build_model(spec, 2).dense_table)

    @pytest.mark.parametrize("field,value", [("vocab_size", 1), ("order", -1), ("concentration", 0.0),
                                             ("smoothing", 1.5)])
    def test_invalid_spec(self, field, value):
        with pytest.raises(InvalidSpec):
            build_model(ModelSpec(**{field: value}), 0)

    def test_large_model_is_lazy(self):
        m = build_model(ModelSpec(vocab_size=512, order=2), 7)
        assert 512**3 > DENSE_LIMIT
        assert m.dense_table is None

    def test_row_entropy_matches_independent_derivation(self):
        """V=512, order 2, alpha 0.5, seed 7: mean entropy over 1000 contexts equals the oracle's."""
        spec = ModelSpec(vocab_size=512, order=2, concentration=0.5, smoothing=0.1)
        m = build_model(spec, 7)
        rng = np.random.default_rng(0)
        ctxs = rng.integers(0, 512, size=(1000, 2))
        got = np.mean([entropy(m.next_dist(c.tolist())) for c in ctxs])
        want = np.mean([entropy(oracle_row(7, tuple(int(t) for t in c), 512, 0.5, 0.1)) for c in ctxs])
        assert got == pytest.approx(want, rel=1e-12)

    def test_row_entropy_matches_dirichlet_expectation(self):
        """Without smoothing rows are Dirichlet(alpha): E[H] = psi(V alpha + 1) - psi(alpha + 1)."""
        v, alpha = 512, 0.5
        m = build_model(ModelSpec(vocab_size=v, order=2, concentration=alpha, smoothing=0.0), 7)
        rng = np.random.default_rng(1)
        h = np.array([entropy(m.next_dist(c.tolist())) for c in rng.integers(0, v, size=(1000, 2))])
        expected = special.digamma(v * alpha + 1) - special.digamma(alpha + 1)
        assert abs(h.mean() - expected) < 5 * h.std(ddof=1) / np.sqrt(len(h))

    def test_rows_follow_dirichlet_marginal(self):
        """Each coordinate of a Dirichlet(alpha 1_V) row is Beta(alpha, (V-1) alpha)."""
        v, alpha = 16, 0.5
        m = build_model(ModelSpec(vocab_size=v, order=3, concentration=alpha, smoothing=0.0), 5)
        first = m.dense_table[:, 0]
        assert stats.kstest(first, stats.beta(alpha, (v - 1) * alpha).cdf).pvalue > 0.001


class TestNextDist:
    """Context lookup."""

    def test_order_zero_ignores_context(self):
        m = build_model(ModelSpec(vocab_size=8, order=0), 1)
        np.testing.assert_array_equal(m.next_dist([1, 2]), m.next_dist([7]))

    def test_hand_built_chain(self):
        m = Model.from_table({(0,): [0.3, 0.7], (1,): [1.0, 0.0]}, vocab_size=2, order=1)
        np.testing.assert_array_equal(next_dist(m, [1, 0]), [0.3, 0.7])

    def test_unseen_context_uniform(self):
        m = Model.from_table({(0,): [0.3, 0.7]}, vocab_size=2, order=1)
        np.testing.assert_array_equal(m.next_dist([1]), [0.5, 0.5])

    def test_short_context_uniform(self, small_model):
        np.testing.assert_array_equal(small_model.next_dist([]), np.full(16, 1 / 16))

    def test_truncates_to_order(self, small_model):
        np.testing.assert_array_equal(small_model.next_dist([4, 9, 2]), small_model.next_dist([2]))

    @settings(max_examples=200)
    @given(st.lists(st.integers(0, 511), min_size=2, max_size=2))
    def test_valid_distribution_lazy(self, ctx):
        m = _lazy_model()
        p = m.next_dist(ctx)
        assert (p >= 0).all()
        assert abs(p.sum() - 1) < 1e-9

    def test_valid_distribution_fuzz_10k(self):
        m = build_model(ModelSpec(vocab_size=64, order=2), 4)
        rng = np.random.default_rng(2)
        table = np.array([m.next_dist(c.tolist()) for c in rng.integers(0, 64, size=(10_000, 2))])
        assert (table >= 0).all()
        assert np.abs(table.sum(axis=1) - 1).max() < 1e-9

    def test_lazy_matches_dense(self):
        spec = ModelSpec(vocab_size=8, order=2)
        dense = build_model(spec, 3)
        lazy = Model(8, 2, smoothing=spec.smoothing, spec=spec, seed=3)
        lazy._dense = None
        for c in range(64):
            ctx = dense.decode_context(c)
            np.testing.assert_array_equal(lazy._row_for(ctx), dense.next_dist(ctx))


_LAZY = {}


def _lazy_model():
    if "m" not in _LAZY:
        _LAZY["m"] = build_model(ModelSpec(vocab_size=512, order=2), 11)
    return _LAZY["m"]


class TestSampleIndex:
    """Inverse-CDF sampling."""

    def test_boundaries(self):
        w = np.array([0.25, 0.25, 0.5])
        assert sample_index(w, 0.0) == 0
        assert sample_index(w, 0.2499) == 0
        assert sample_index(w, 0.25) == 1
        assert sample_index(w, 0.9999) == 2

    def test_zero_weight_never_chosen(self):
        w = np.array([0.5, 0.0, 0.5, 0.0])
        for u in np.linspace(0, 1, 101, endpoint=False):
            assert sample_index(w, u) in (0, 2)

    def test_unnormalized_weights(self):
        assert sample_index(np.array([1.0, 3.0]), 0.3) == 1


class TestPromptPool:
    """Prompt pools."""

    def test_single_prompt(self, small_model):
        pool = build_prompt_pool(1, 4, small_model, 0)
        assert len(pool) == 1 and pool[0].id == 0

    def test_deterministic(self, small_model):
        assert build_prompt_pool(20, 8, small_model, 5) == build_prompt_pool(20, 8, small_model, 5)

    def test_shape_and_ids(self, small_model):
        pool = build_prompt_pool(200, 8, small_model, 5)
        assert all(len(p.tokens) == 8 for p in pool)
        assert len({p.id for p in pool}) == 200
        assert all(0 <= t < 16 for p in pool for t in p.tokens)

    def test_invalid(self, small_model):
        with pytest.raises(InvalidSpec):
            build_prompt_pool(0, 8, small_model, 0)


class TestGenerate:
    """Token generation."""

    def test_forced_token(self):
        m = Model.from_table({(0,): [0, 0, 1.0, 0], (2,): [1.0, 0, 0, 0]}, vocab_size=4, order=1)
        seq = generate(m, Prompt(0, (0,)), 1, PlainSampler(), RandomStream(1))
        assert seq.tokens == (2,)

    def test_excludes_prompt_and_tags(self, small_model):
        seq = generate(small_model, Prompt(3, (1, 2, 3)), 10, PlainSampler(), RandomStream(1), true_entity=2)
        assert len(seq) == 10 and seq.prompt_id == 3 and seq.true_entity == 2 and seq.scheme_tag == "none"

    def test_deterministic(self, small_model):
        p = Prompt(0, (1, 2))
        a = generate(small_model, p, 50, PlainSampler(), RandomStream(77))
        b = generate(small_model, p, 50, PlainSampler(), RandomStream(77))
        assert a == b

    def test_invalid_length(self, small_model):
        with pytest.raises(InvalidLength):
            generate(small_model, Prompt(0, (1,)), 0, PlainSampler(), RandomStream(0))

    def test_delta_zero_equals_plain(self, small_model):
        """A zero-bias KGW sampler consumes the same stream and leaves rows untouched."""
        cfg = SchemeConfig(kind="KGW", gamma=0.25, delta=0.0, context_h=1, vocab_size=16)
        p = Prompt(0, (5, 6))
        for seed in range(20):
            a = generate(small_model, p, 64, PlainSampler(), RandomStream(seed))
            b = generate(small_model, p, 64, KGWSampler(123, cfg), RandomStream(seed))
            assert a.tokens == b.tokens

    def test_fast_path_matches_reference(self, small_model):
        cfg = SchemeConfig(kind="KGW", gamma=0.25, delta=2.0, context_h=1, vocab_size=16)
        prompts = [Prompt(i, (i % 16, (3 * i) % 16)) for i in range(30)]
        seeds = [derive_seed(1, i) for i in range(30)]
        for sampler in (PlainSampler(), KGWSampler(99, cfg)):
            fast = generate_batch(small_model, prompts, 40, sampler, seeds)
            slow = generate_batch(small_model, prompts, 40, sampler, seeds, use_fast=False)
            np.testing.assert_array_equal(fast, slow)

    def test_resuming_stream_continues_sequence(self, small_model):
        """Two generate calls on one stream equal one longer call over the same draws."""
        m = build_model(ModelSpec(vocab_size=16, order=0), 2)
        s = RandomStream(8)
        first = generate(m, Prompt(0, ()), 5, PlainSampler(), s)
        second = generate(m, Prompt(0, ()), 5, PlainSampler(), s)
        whole = generate(m, Prompt(0, ()), 10, PlainSampler(), RandomStream(8))
        assert first.tokens + second.tokens == whole.tokens

    def test_order_zero_unigram_frequencies(self):
        """100k plain tokens from an order-0 model match its row (chi-square p > 0.001)."""
        m = build_model(ModelSpec(vocab_size=32, order=0, concentration=2.0), 6)
        toks = generate_batch(m, [Prompt(0, ())], 100_000, PlainSampler(), [12345])[0]
        observed = np.bincount(toks, minlength=32)
        expected = m.next_dist([]) * len(toks)
        assert stats.chisquare(observed, expected).pvalue > 0.001
