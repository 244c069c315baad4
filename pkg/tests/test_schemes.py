"""Tests for green-list and exponential-minimum watermarks and the multi-bit wrapper."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from wmobserve import _kernels
from wmobserve.errors import DegenerateDist, EmptyMessage, InvalidSpec, TooShort, WrongScheme
from wmobserve.prf import MASK64, RandomStream, derive_seed, fnv1a64, prf_uniform, splitmix64
from wmobserve.schemes import (
    EXPSampler,
    KGWSampler,
    MessageBits,
    MultibitSampler,
    SchemeConfig,
    derived_key,
    exp_embed_step,
    exp_score,
    exp_select,
    exp_z,
    green_indicators,
    green_set,
    green_table,
    kgw_embed_step,
    kgw_score,
    multibit_decode,
    multibit_decode_batch,
    multibit_embed,
    score,
    slot_of,
    z_from_hits,
    z_matrix,
)
from wmobserve.toylm import ModelSpec, PlainSampler, Prompt, build_model, generate, generate_batch

KGW = SchemeConfig(kind="KGW", gamma=0.25, delta=2.0, context_h=1, vocab_size=512)
EXP = SchemeConfig.for_kind("EXP", vocab_size=512)


def oracle_green(key, context, gamma, vocab):
    """Green list from the definition: rank tokens by keyed hash, ties to the lower id."""
    scored = sorted((prf_uniform(key, context, t), t) for t in range(vocab))
    return {t for _, t in scored[: int(math.floor(gamma * vocab))]}


@pytest.fixture(scope="module")
def model():
    return build_model(ModelSpec(vocab_size=512, order=1), 21)


@pytest.fixture(scope="module")
def prompts(model):
    rng = np.random.default_rng(5)
    return [Prompt(i, tuple(int(t) for t in rng.integers(0, 512, 8))) for i in range(1000)]


class TestSchemeConfig:
    def test_defaults_valid(self):
        SchemeConfig().validate()

    @pytest.mark.parametrize("kw", [{"gamma": 0.0}, {"gamma": 1.0}, {"delta": -1.0}, {"kind": "XYZ"},
                                    {"kind": "UNIGRAM", "context_h": 1}, {"context_h": -1}])
    def test_invalid(self, kw):
        with pytest.raises(InvalidSpec):
            SchemeConfig(**kw).validate()

    def test_for_kind_context(self):
        assert SchemeConfig.for_kind("UNIGRAM").context_h == 0


class TestGreenSet:
    """Rank-selection green lists."""

    def test_size_small(self):
        cfg = SchemeConfig(gamma=0.5, vocab_size=4, context_h=1)
        assert green_set(1, [2], cfg).sum() == 2

    @settings(max_examples=200)
    @given(st.integers(0, MASK64), st.lists(st.integers(0, 99), min_size=1, max_size=3),
           st.floats(0.01, 0.99), st.integers(2, 100))
    def test_size_exact(self, key, ctx, gamma, vocab):
        cfg = SchemeConfig(gamma=gamma, vocab_size=vocab, context_h=1)
        if cfg.n_green < 1:
            return
        assert green_set(key, ctx, cfg).sum() == math.floor(gamma * vocab)

    @settings(max_examples=30)
    @given(st.integers(0, MASK64), st.integers(0, 63))
    def test_matches_oracle(self, key, prev):
        cfg = SchemeConfig(gamma=0.25, vocab_size=64, context_h=1)
        assert set(np.flatnonzero(green_set(key, [prev], cfg)).tolist()) == oracle_green(key, [prev], 0.25, 64)

    def test_unigram_ignores_context(self):
        cfg = SchemeConfig(kind="UNIGRAM", context_h=0, vocab_size=64)
        np.testing.assert_array_equal(green_set(5, [1, 2, 3], cfg), green_set(5, [9], cfg))

    def test_wrong_scheme(self):
        with pytest.raises(WrongScheme):
            green_set(1, [0], EXP)

    def test_table_matches_green_set(self):
        cfg = SchemeConfig(gamma=0.25, vocab_size=32, context_h=2)
        table = green_table(77, cfg)
        for c in (0, 5, 31 * 32 + 7, 1023):
            np.testing.assert_array_equal(table[c], green_set(77, [c // 32, c % 32], cfg))

    def test_onfly_matches_table(self):
        cfg = SchemeConfig(gamma=0.3, vocab_size=32, context_h=2)
        toks = np.random.default_rng(0).integers(0, 32, size=(20, 40))
        via_table = green_indicators(9, toks, cfg)
        onfly = _kernels.green_indicators_onfly(np.uint64(9), toks, 2, 32, cfg.n_green)
        np.testing.assert_array_equal(via_table, onfly)

    def test_overlap_between_keys(self):
        """Two keys share gamma * floor(gamma V) = 32 green tokens on average (hypergeometric mean)."""
        rng = np.random.default_rng(3)
        overlaps = []
        for _ in range(1000):
            k1, k2 = (int(k) for k in rng.integers(0, 2**63, size=2))
            ctx = [int(rng.integers(0, 512))]
            overlaps.append(int((green_set(k1, ctx, KGW) & green_set(k2, ctx, KGW)).sum()))
        n, k = 512, 128
        sd = math.sqrt(k * (k / n) * (1 - k / n) * (n - k) / (n - 1))
        assert abs(np.mean(overlaps) - 32) < 5 * sd / math.sqrt(1000)


class TestKgwEmbed:
    def test_delta_zero_identity(self):
        p = np.array([0.2, 0.3, 0.5])
        assert kgw_embed_step(p, np.array([True, False, True]), 0.0) is p

    def test_closed_form(self):
        out = kgw_embed_step(np.array([0.5, 0.5]), np.array([True, False]), math.log(3))
        np.testing.assert_allclose(out, [0.75, 0.25], rtol=1e-15)

    @given(st.lists(st.floats(0.001, 1.0), min_size=2, max_size=50), st.floats(0.0, 10.0), st.data())
    def test_normalized(self, w, delta, data):
        p = np.array(w) / sum(w)
        green = np.array(data.draw(st.lists(st.booleans(), min_size=len(w), max_size=len(w))))
        out = kgw_embed_step(p, green, delta)
        assert (out >= 0).all() and abs(out.sum() - 1) < 1e-9


class TestKgwScore:
    def test_z_centered(self):
        assert z_from_hits(25, 100, 0.25) == 0.0

    def test_all_green_closed_form(self):
        assert z_from_hits(100, 100, 0.5) == pytest.approx(10.0, abs=1e-12)

    def test_all_green_sequence(self):
        """A sequence built to be all-green under gamma 0.5 scores sqrt(T') = 10."""
        cfg = SchemeConfig(gamma=0.5, vocab_size=64, context_h=1)
        toks = [0]
        for _ in range(100):
            toks.append(int(np.flatnonzero(green_set(4, [toks[-1]], cfg))[0]))
        s = kgw_score(4, toks, cfg)
        assert s.positions_scored == 100 and s.raw == 100 and s.z == pytest.approx(10.0, abs=1e-12)

    @settings(max_examples=20)
    @given(st.integers(0, MASK64), st.lists(st.integers(0, 63), min_size=2, max_size=30))
    def test_matches_oracle(self, key, toks):
        cfg = SchemeConfig(gamma=0.25, vocab_size=64, context_h=1)
        g = sum(toks[t] in oracle_green(key, [toks[t - 1]], 0.25, 64) for t in range(1, len(toks)))
        n = len(toks) - 1
        s = kgw_score(key, toks, cfg)
        assert s.raw == g
        assert s.z == pytest.approx((g - 0.25 * n) / math.sqrt(n * 0.25 * 0.75), abs=1e-12)

    def test_too_short(self):
        with pytest.raises(TooShort):
            kgw_score(1, [5], KGW)
        assert kgw_score(1, [5], SchemeConfig(kind="UNIGRAM", context_h=0)).positions_scored == 1

    def test_null_moments(self, model, prompts):
        """Unwatermarked outputs under random keys: z has mean ~0 and variance ~1."""
        seeds = [derive_seed(2, i) for i in range(1000)]
        toks = generate_batch(model, prompts, 256, PlainSampler(), seeds)
        rng = np.random.default_rng(8)
        z = np.array([kgw_score(int(k), row, KGW).z for k, row in zip(rng.integers(0, 2**63, 1000), toks)])
        assert abs(z.mean()) < 5 / math.sqrt(1000)
        assert 0.8 < z.var(ddof=1) < 1.25

    def test_separation(self, model, prompts):
        """Matched-key mean z beats mismatched mean z by >= 5 at T=256."""
        k_on, k_off = 1111, 2222
        toks = generate_batch(model, prompts, 256, KGWSampler(k_on, KGW), [derive_seed(3, i) for i in range(1000)])
        z = z_matrix([k_on, k_off], toks, KGW)
        assert z[:, 0].mean() - z[:, 1].mean() >= 5

    def test_z_matrix_matches_score(self, model, prompts):
        toks = generate_batch(model, prompts[:20], 64, PlainSampler(), list(range(20)))
        z = z_matrix([3, 4], toks, KGW)
        assert z[7, 1] == kgw_score(4, toks[7], KGW).z


class TestExpSelect:
    def test_example(self):
        assert exp_select(np.array([0.5, 0.5]), np.array([0.9, 0.4])) == 0

    def test_one_hot(self):
        for u in (np.array([0.99, 0.01, 0.5]), np.array([0.01, 0.99, 0.98])):
            assert exp_select(np.array([0.0, 0.0, 1.0]), u) == 2

    def test_degenerate(self):
        with pytest.raises(DegenerateDist):
            exp_select(np.zeros(3), np.array([0.1, 0.2, 0.3]))

    @settings(max_examples=50)
    @given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=20), st.integers(0, MASK64),
           st.lists(st.integers(0, 50), max_size=4))
    def test_kernel_matches_numpy(self, w, key, ctx):
        p = np.array(w)
        if p.sum() == 0:
            return
        p = p / p.sum()
        want = exp_embed_step(p, key, ctx)
        assert _kernels.exp_choose(p, np.uint64(key), np.uint64(fnv1a64(ctx))) == want

    def test_distribution_preserved(self):
        """Over 100k random keys a single step reproduces the model row (chi-square p > 0.001)."""
        p = np.array([0.3, 0.2, 0.15, 0.1, 0.1, 0.08, 0.05, 0.02])
        rng = np.random.default_rng(4)
        keys = rng.integers(0, 2**63, size=100_000)
        counts = np.bincount([_kernels.exp_choose(p, np.uint64(int(k)), np.uint64(fnv1a64([1, 2])))
                              for k in keys], minlength=8)
        assert stats.chisquare(counts, p * len(keys)).pvalue > 0.001


class TestExpScore:
    def test_unit_terms_give_zero(self):
        assert exp_z(100.0, 100) == 0.0

    def test_small_terms_limit(self):
        assert exp_z(0.0, 64) == -8.0

    @settings(max_examples=20)
    @given(st.integers(0, MASK64), st.lists(st.integers(0, 511), min_size=5, max_size=30))
    def test_matches_oracle(self, key, toks):
        h = EXP.context_h
        s = sum(-math.log1p(-prf_uniform(key, toks[t - h:t], toks[t])) for t in range(h, len(toks)))
        n = len(toks) - h
        got = exp_score(key, toks, EXP)
        assert got.raw == pytest.approx(s, rel=1e-12)
        assert got.z == pytest.approx((s - n) / math.sqrt(n), rel=1e-9, abs=1e-12)

    def test_too_short(self):
        with pytest.raises(TooShort):
            exp_score(1, [1, 2, 3, 4], EXP)

    def test_watermarked_scores_high(self, model, prompts):
        toks = generate_batch(model, prompts[:50], 256, EXPSampler(5, EXP), list(range(50)))
        z = z_matrix([5, 6], toks, EXP)
        assert z[:, 0].min() > 3 > z[:, 1].max()

    def test_fast_generation_matches_reference(self, model, prompts):
        sampler = EXPSampler(17, EXP)
        fast = generate_batch(model, prompts[:10], 30, sampler, list(range(10)))
        slow = generate_batch(model, prompts[:10], 30, sampler, list(range(10)), use_fast=False)
        np.testing.assert_array_equal(fast, slow)

    def test_score_dispatch(self):
        toks = list(range(20))
        assert score(3, toks, EXP) == exp_score(3, toks, EXP)
        assert score(3, toks, KGW) == kgw_score(3, toks, KGW)


class TestMultibit:
    cfg = SchemeConfig(kind="KGW", gamma=0.25, delta=4.0, context_h=1, vocab_size=512)

    def test_derived_key_definition(self):
        assert derived_key(10, 3, 1) == splitmix64(10 ^ fnv1a64([3, 1]))

    def test_slot_assignment(self):
        assert [slot_of(t, 2, 3) for t in range(8)] == [0, 0, 1, 1, 2, 2, 0, 0]

    def test_empty_message(self):
        with pytest.raises(EmptyMessage):
            MessageBits(())

    def test_num_bits_zero(self):
        with pytest.raises(InvalidSpec):
            multibit_decode(1, list(range(100)), 0, 32, self.cfg)

    def test_too_short_for_slots(self):
        with pytest.raises(TooShort):
            multibit_decode(1, list(range(40)), 4, 32, self.cfg)

    def test_single_slot_reduces_to_zero_bit(self, model):
        p = Prompt(0, (1, 2, 3))
        msg = MessageBits((0,), block_len=8)
        a = multibit_embed(model, p, 55, msg, self.cfg, 64, RandomStream(9))
        b = generate(model, p, 64, KGWSampler(derived_key(55, 0, 0), self.cfg), RandomStream(9))
        assert a.tokens == b.tokens

    def test_fast_matches_reference(self, model, prompts):
        sampler = MultibitSampler(7, MessageBits((1, 0, 1), block_len=4), self.cfg)
        fast = generate_batch(model, prompts[:5], 48, sampler, list(range(5)))
        slow = generate_batch(model, prompts[:5], 48, sampler, list(range(5)), use_fast=False)
        np.testing.assert_array_equal(fast, slow)

    def test_single_bit_recovered(self, model):
        seq = multibit_embed(model, Prompt(0, (4,)), 31, MessageBits((1,), block_len=256), self.cfg, 256,
                             RandomStream(2))
        bits, conf = multibit_decode(31, seq, 1, 256, self.cfg)
        assert bits == [1] and conf[0] > 5

    def test_message_recovered(self, model, prompts):
        msg = MessageBits(tuple(int(b) for b in np.random.default_rng(1).integers(0, 2, 16)), block_len=32)
        sampler = MultibitSampler(99, msg, self.cfg)
        toks = generate_batch(model, prompts[:20], 512, sampler, list(range(20)))
        bits, _ = multibit_decode_batch(99, toks, 16, 32, self.cfg)
        assert (bits == np.array(msg.bits)).all(axis=1).mean() >= 0.95

    def test_unwatermarked_decode_is_coin(self):
        """Across fresh base keys, decoded bits of plain text are fair coins."""
        cfg = SchemeConfig(kind="KGW", gamma=0.25, delta=4.0, context_h=1, vocab_size=64)
        small = build_model(ModelSpec(vocab_size=64, order=1), 8)
        prompts = [Prompt(i, (i % 64,)) for i in range(500)]
        toks = generate_batch(small, prompts, 512, PlainSampler(), [derive_seed(4, i) for i in range(500)])
        keys = np.random.default_rng(6).integers(0, 2**63, size=500)
        decoded = [multibit_decode_batch(int(k), row[None, :], 16, 32, cfg) for k, row in zip(keys, toks)]
        bits = np.concatenate([b for b, _ in decoded])
        conf = np.concatenate([c for _, c in decoded])
        # Oracle: per scored position the two keys' hits differ by +1 or -1 with probability
        # gamma (1 - gamma) each; the bit is 1 iff the summed difference is positive.
        g = cfg.gamma
        step = np.array([g * (1 - g), 1 - 2 * g * (1 - g), g * (1 - g)])
        p_one, mean_conf = [], []
        for n_pos in [31] + [32] * 15:
            d = np.array([1.0])
            for _ in range(n_pos):
                d = np.convolve(d, step)
            diffs = np.arange(-n_pos, n_pos + 1)
            p_one.append(d[diffs > 0].sum())
            mean_conf.append((d * np.abs(diffs)).sum() / math.sqrt(n_pos * g * (1 - g)))
        p1 = float(np.mean(p_one))
        assert abs(bits.mean() - p1) < 5 * math.sqrt(p1 * (1 - p1) / bits.size)
        assert conf.mean() == pytest.approx(float(np.mean(mean_conf)), rel=0.05)

    def test_tie_breaks_to_zero(self):
        cfg = SchemeConfig(kind="UNIGRAM", gamma=0.5, context_h=0, vocab_size=2)
        k0, k1 = derived_key(0, 0, 0), derived_key(0, 0, 1)
        g0, g1 = green_set(k0, [], cfg), green_set(k1, [], cfg)
        tok = int(np.flatnonzero(g0 == g1)[0]) if (g0 == g1).any() else None
        if tok is None:
            pytest.skip("derived keys disagree on every token")
        bits, conf = multibit_decode(0, [tok] * 4, 1, 4, cfg)
        assert bits == [0] and conf == [0.0]
