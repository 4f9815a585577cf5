"""Scoring-head tests against straight-line re-implementations (explicit loops)."""

import math

import numpy as np
import pytest
import torch

from patchpoint.geometry import build_grid
from patchpoint.heads import (
    GroundingParams,
    ImageContext,
    location_logits,
    patch_feedback_embedding,
    patch_scores,
    prefill_cache,
    rotary_rotate,
    subpatch_feedback_embedding,
    subpatch_scores,
)

EPS = 1e-5


def np_layer_norm(x, gain, bias):
    mean = x.mean()
    var = ((x - mean) ** 2).mean()
    return (x - mean) / math.sqrt(var + EPS) * gain + bias


def np_rotate(v, position, base=10000.0):
    m = len(v)
    out = np.empty(m)
    for j in range(m // 2):
        theta = position * base ** (-2 * j / m)
        c, s = math.cos(theta), math.sin(theta)
        out[2 * j] = v[2 * j] * c - v[2 * j + 1] * s
        out[2 * j + 1] = v[2 * j] * s + v[2 * j + 1] * c
    return out


def seeded_params(d=8, t=6, m=4, **kw) -> GroundingParams:
    torch.manual_seed(7)
    p = GroundingParams(hidden_size=d, vit_size=t, head_width=m, **kw).double()
    with torch.no_grad():
        for w in p.parameters():
            w.copy_(torch.randn_like(w))
    return p


def seeded_ctx(params, i=3, k=4, grid=None, seed=3) -> ImageContext:
    g = torch.Generator().manual_seed(seed)
    mk = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64)
    return ImageContext(mk(params.D, i), mk(params.D, i), mk(i, params.T, k), grid)


def oracle_patch_scores(h_p, ctx, p, prev_selected):
    d, m, i = p.D, p.M, ctx.n_tokens
    gain = p.patch_norm_gain.detach().numpy()
    bias = p.patch_norm_bias.detach().numpy()
    w_pq = p.W_pq.detach().numpy()
    w_pk = p.W_pk.detach().numpy()
    q = w_pq @ np_layer_norm(h_p.detach().numpy(), gain, bias)
    q = np_rotate(q, prev_selected or 0, p.rope_base)
    out = []
    for col in range(i):
        key = w_pk @ np_layer_norm(ctx.H_i[:, col].detach().numpy(), gain, bias)
        key = np_rotate(key, col, p.rope_base)
        out.append(sum(key[a] * q[a] for a in range(m)) / math.sqrt(m))
    done = p.h_done.detach().numpy()
    out.append(sum(done[a] * q[a] for a in range(m)) / math.sqrt(m))
    return np.array(out)


class TestPatchScores:
    def test_matches_straight_line_oracle(self):
        p = seeded_params()
        ctx = seeded_ctx(p)
        h = torch.randn(p.D, dtype=torch.float64, generator=torch.Generator().manual_seed(9))
        got = patch_scores(h, ctx, p, prev_selected=1).detach().numpy()
        want = oracle_patch_scores(h, ctx, p, 1)
        assert np.max(np.abs(got - want)) < 1e-12

    def test_prev_none_equals_prev_zero(self):
        p = seeded_params()
        ctx = seeded_ctx(p)
        h = torch.randn(p.D, dtype=torch.float64)
        assert torch.equal(patch_scores(h, ctx, p, None), patch_scores(h, ctx, p, 0))

    def test_m512_denominator(self):
        # scores scale with 1/sqrt(M): doubling every key/query entry via the
        # raw dot is checked against the explicit normalization
        p = seeded_params(d=8, t=6, m=512)
        ctx = seeded_ctx(p, i=2)
        h = torch.randn(p.D, dtype=torch.float64)
        got = patch_scores(h, ctx, p)
        want = oracle_patch_scores(h, ctx, p, None)
        assert np.allclose(got.detach().numpy(), want, atol=1e-11)

    def test_dimension_mismatch(self):
        p = seeded_params()
        ctx = seeded_ctx(p)
        with pytest.raises(ValueError):
            patch_scores(torch.zeros(p.D + 1, dtype=torch.float64), ctx, p)

    def test_non_finite(self):
        p = seeded_params()
        ctx = seeded_ctx(p)
        bad = torch.full((p.D,), float("nan"), dtype=torch.float64)
        with pytest.raises(FloatingPointError):
            patch_scores(bad, ctx, p)

    def test_rotary_relativity(self):
        p = seeded_params()
        rng = np.random.default_rng(0)
        q = torch.randn(p.M, dtype=torch.float64)
        k = torch.randn(p.M, dtype=torch.float64)
        for _ in range(100):
            i, pq, c = (int(v) for v in rng.integers(0, 500, 3))
            s1 = float(rotary_rotate(k, i) @ rotary_rotate(q, pq))
            s2 = float(rotary_rotate(k, i + c) @ rotary_rotate(q, pq + c))
            assert abs(s1 - s2) <= 1e-8 * max(abs(s1), 1.0)

    def test_scale_contract(self):
        p = seeded_params()
        ctx = seeded_ctx(p)
        h = torch.randn(p.D, dtype=torch.float64)
        base = patch_scores(h, ctx, p, prev_selected=2)
        with torch.no_grad():
            p.W_pq.mul_(2.0)
            p.W_pk.mul_(2.0)
        scaled = patch_scores(h, ctx, p, prev_selected=2)
        i = ctx.n_tokens
        assert torch.equal(scaled[:i], base[:i] * 4.0)  # lambda=2: exact in floats
        assert torch.equal(scaled[i], base[i] * 2.0)  # done key is not scaled

    def test_layer_norm_invariance(self):
        # exact only at eps=0; use inputs large enough that eps is negligible
        p = seeded_params()
        ctx = seeded_ctx(p)
        h = 100.0 * torch.randn(p.D, dtype=torch.float64)
        a = patch_scores(h, ctx, p)
        b = patch_scores(3.0 * h + 0.7, ctx, p)
        assert torch.allclose(a, b, atol=1e-6)

    def test_argmax_shift_stability(self):
        p = seeded_params()
        ctx = seeded_ctx(p)
        h = torch.randn(p.D, dtype=torch.float64)
        s = patch_scores(h, ctx, p)
        assert int(torch.argmax(s)) == int(torch.argmax(s + 123.456))


class TestSubpatchScores:
    def test_arity_matches_pooling(self):
        p = seeded_params()
        ctx = seeded_ctx(p, k=4)
        h = torch.randn(p.D, dtype=torch.float64)
        assert subpatch_scores(h, ctx.U[0], p).shape == (4,)

    def test_zero_query(self):
        p = seeded_params()
        with torch.no_grad():
            p.subq_norm_bias.zero_()
        ctx = seeded_ctx(p)
        scores = subpatch_scores(torch.zeros(p.D, dtype=torch.float64), ctx.U[0], p)
        assert torch.all(scores == 0)

    def test_matches_straight_line_oracle(self):
        p = seeded_params()
        ctx = seeded_ctx(p)
        h = torch.randn(p.D, dtype=torch.float64, generator=torch.Generator().manual_seed(4))
        got = subpatch_scores(h, ctx.U[1], p).detach().numpy()
        qg = p.subq_norm_gain.detach().numpy()
        qb = p.subq_norm_bias.detach().numpy()
        kg = p.subk_norm_gain.detach().numpy()
        kb = p.subk_norm_bias.detach().numpy()
        q = p.W_sq.detach().numpy() @ np_layer_norm(h.numpy(), qg, qb)
        for j in range(4):
            key = p.W_sk.detach().numpy() @ np_layer_norm(
                ctx.U[1][:, j].detach().numpy(), kg, kb
            )
            want = sum(key[a] * q[a] for a in range(p.M_s)) / math.sqrt(p.M_s)
            assert abs(got[j] - want) < 1e-12


class TestLocationLogits:
    def test_uniform_when_zero(self):
        p = seeded_params()
        with torch.no_grad():
            p.W_loc.zero_()
            p.b_loc.zero_()
        logits = location_logits(torch.randn(p.D, dtype=torch.float64), p)
        assert torch.all(logits == logits[0])
        assert int(torch.argmax(logits)) == 0

    def test_arity_is_nine(self):
        p = seeded_params()
        assert location_logits(torch.randn(p.D, dtype=torch.float64), p).shape == (9,)

    def test_matrix_vector_oracle(self):
        p = seeded_params()
        h = torch.randn(p.D, dtype=torch.float64)
        got = location_logits(h, p).detach().numpy()
        w = p.W_loc.detach().numpy()
        b = p.b_loc.detach().numpy()
        want = np.array(
            [sum(w[r, c] * float(h[c]) for c in range(p.D)) + b[r] for r in range(9)]
        )
        assert np.max(np.abs(got - want)) < 1e-12


class TestRotary:
    def test_position_zero_identity(self):
        v = torch.randn(8, dtype=torch.float64)
        assert torch.equal(rotary_rotate(v, 0), v)

    def test_inner_product_preserved(self):
        q = torch.randn(16, dtype=torch.float64)
        k = torch.randn(16, dtype=torch.float64)
        for pos in [1, 17, 333]:
            a = float(rotary_rotate(q, pos) @ rotary_rotate(k, pos))
            assert abs(a - float(q @ k)) < 1e-10

    def test_m2_trigonometry(self):
        r = rotary_rotate(torch.tensor([1.0, 0.0], dtype=torch.float64), 1)
        assert float(r[0]) == pytest.approx(math.cos(1.0), abs=1e-12)
        assert float(r[1]) == pytest.approx(math.sin(1.0), abs=1e-12)

    def test_odd_dimension_rejected(self):
        with pytest.raises(ValueError):
            rotary_rotate(torch.randn(3), 1)


class TestFeedbackEmbeddings:
    def test_zero_vocab_embedding(self):
        p = seeded_params()
        ctx = seeded_ctx(p)
        out = patch_feedback_embedding(torch.zeros(p.D, dtype=torch.float64), ctx, 1)
        assert torch.equal(out, ctx.E_i[:, 1])

    def test_additivity(self):
        p = seeded_params()
        ctx = seeded_ctx(p)
        a = torch.randn(p.D, dtype=torch.float64)
        b = torch.randn(p.D, dtype=torch.float64)
        lhs = patch_feedback_embedding(a + b, ctx, 2)
        rhs = patch_feedback_embedding(a, ctx, 2) + b
        assert torch.allclose(lhs, rhs, atol=0)

    def test_patch_hand_summed(self):
        p = seeded_params()
        ctx = seeded_ctx(p)
        emb = torch.randn(p.D, dtype=torch.float64)
        got = patch_feedback_embedding(emb, ctx, 0)
        want = np.array([float(emb[i]) + float(ctx.E_i[i, 0]) for i in range(p.D)])
        assert np.max(np.abs(got.numpy() - want)) == 0

    def test_out_of_range(self):
        p = seeded_params()
        ctx = seeded_ctx(p)
        with pytest.raises(ValueError):
            patch_feedback_embedding(torch.zeros(p.D, dtype=torch.float64), ctx, 3)

    def test_subpatch_zero_cases(self):
        p = seeded_params()
        ctx = seeded_ctx(p)
        emb = torch.randn(p.D, dtype=torch.float64)
        zero_u = torch.zeros_like(ctx.U[0])
        assert torch.equal(subpatch_feedback_embedding(emb, zero_u, 1, p), emb)
        with torch.no_grad():
            p.W_se.zero_()
        assert torch.equal(subpatch_feedback_embedding(emb, ctx.U[0], 1, p), emb)

    def test_subpatch_oracle(self):
        p = seeded_params()
        ctx = seeded_ctx(p)
        emb = torch.randn(p.D, dtype=torch.float64)
        got = subpatch_feedback_embedding(emb, ctx.U[2], 3, p)
        w = p.W_se.detach().numpy()
        u = ctx.U[2][:, 3].numpy()
        want = emb.numpy() + np.array(
            [sum(w[r, c] * u[c] for c in range(p.T)) for r in range(p.D)]
        )
        assert np.max(np.abs(got.detach().numpy() - want)) < 1e-12


class TestPrefillCache:
    def test_bitwise_equivalence(self):
        p = seeded_params()
        grid = build_grid(56, 56)
        ctx = seeded_ctx(p, i=4, grid=grid)
        cache = prefill_cache(ctx, p)
        rng = torch.Generator().manual_seed(11)
        for trial in range(50):
            h = torch.randn(p.D, dtype=torch.float64, generator=rng)
            prev = trial % 4
            assert torch.equal(
                patch_scores(h, ctx, p, prev),
                patch_scores(h, ctx, p, prev, cache=cache),
            )
            tok = trial % ctx.n_tokens
            assert torch.equal(
                subpatch_scores(h, ctx.U[tok], p),
                subpatch_scores(h, ctx.U[tok], p, cached_keys=cache.subpatch_keys[tok]),
            )

    def test_empty_context(self):
        p = seeded_params()
        ctx = ImageContext.empty(p.D, p.T, dtype=torch.float64)
        cache = prefill_cache(ctx, p)
        h = torch.randn(p.D, dtype=torch.float64)
        scores = patch_scores(h, ctx, p, cache=cache)
        assert scores.shape == (1,)  # only the done score

    def test_memory_accounting(self):
        assert 512 * 1024 + 512 * 4 * 1024 == 2_621_440
        p = seeded_params(d=8, t=6, m=4)
        ctx = seeded_ctx(p, i=3, k=4)
        cache = prefill_cache(ctx, p)
        assert cache.n_scalars == 4 * 3 + 4 * 4 * 3 + 4
