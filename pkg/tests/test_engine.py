import math

import numpy as np
import pytest

from conftest import tiny_config
from mdlm_sparse.cache import CacheSet, CacheStateError, SaliencyIndex
from mdlm_sparse.engine import (
    EngineConfig,
    EngineConfigError,
    InputModeError,
    StepInput,
    approximate_attention,
    exact_attention_rows,
    full_step,
    generate,
    select_salient,
    sparse_step,
    step_plan,
)
from mdlm_sparse.model import init_weights
from mdlm_sparse.sampler import SamplerConfig

SAMPLER = SamplerConfig(n_u=1, block_size=8)


def ref_attention(q, k, v, n_heads, n_kv):
    d_head = q.shape[1] // n_heads
    group = n_heads // n_kv
    out = np.zeros_like(q)
    for h in range(n_heads):
        g = h // group
        qh = q[:, h * d_head : (h + 1) * d_head]
        kh = k[:, g * d_head : (g + 1) * d_head]
        vh = v[:, g * d_head : (g + 1) * d_head]
        for i in range(q.shape[0]):
            s = np.array([qh[i] @ kh[j] for j in range(k.shape[0])]) / math.sqrt(d_head)
            p = np.exp(s - s.max())
            p /= p.sum()
            out[i, h * d_head : (h + 1) * d_head] = sum(p[j] * vh[j] for j in range(k.shape[0]))
    return out


def ref_forward(w, ids):
    """Dense forward pass written without any engine helpers."""
    c = w.config

    def norm(x, g):
        return x / np.sqrt((x * x).mean(axis=1, keepdims=True) + 1e-6) * g

    def rope(x, pos):
        out = x.copy()
        for i, p in enumerate(pos):
            for h in range(x.shape[1] // c.d_head):
                for j in range(c.d_head // 2):
                    ang = p * c.rope_theta ** (-2 * j / c.d_head)
                    a, b = x[i, h * c.d_head + 2 * j], x[i, h * c.d_head + 2 * j + 1]
                    out[i, h * c.d_head + 2 * j] = a * math.cos(ang) - b * math.sin(ang)
                    out[i, h * c.d_head + 2 * j + 1] = a * math.sin(ang) + b * math.cos(ang)
        return out

    def ffn(x, lw):
        u = x @ lw.w1
        return (0.5 * u * (1 + np.tanh(math.sqrt(2 / math.pi) * (u + 0.044715 * u**3)))) @ lw.w2

    pos = np.arange(len(ids))
    h = w.embedding[ids]
    for lw in w.layers:
        a = norm(h, lw.attn_gain)
        C = ref_attention(rope(a @ lw.wq, pos), rope(a @ lw.wk, pos), a @ lw.wv, c.n_heads, c.n_kv_heads)
        if c.residual_mode == "residual":
            mid = h + C @ lw.wo
            h = mid + ffn(norm(mid, lw.ffn_gain), lw)
        else:
            h = ffn(norm(C @ lw.wo, lw.ffn_gain), lw)
    return norm(h, w.final_gain) @ w.lm_head


def fresh_caches(w, prompt, response):
    caches = CacheSet.allocate(w.config, len(prompt), len(response))
    out = full_step(w, StepInput.full_sequence(prompt, response), caches)
    return caches, out


class TestAttention:
    @pytest.mark.parametrize("n_kv", [4, 2, 1])
    def test_exact_matches_reference(self, rng, n_kv):
        q = rng.standard_normal((3, 16))
        k = rng.standard_normal((7, 4 * n_kv))
        v = rng.standard_normal((7, 4 * n_kv))
        np.testing.assert_allclose(exact_attention_rows(q, k, v, 4, n_kv), ref_attention(q, k, v, 4, n_kv), atol=1e-12)

    def test_zero_scores_average_values(self, rng):
        v = rng.standard_normal((5, 8))
        out = exact_attention_rows(np.zeros((2, 8)), np.zeros((5, 8)), v, 2, 2)
        np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (2, 1)), atol=1e-15)

    def test_exact_row_subset(self, rng):
        q = rng.standard_normal((9, 16))
        k = rng.standard_normal((9, 8))
        v = rng.standard_normal((9, 8))
        full = exact_attention_rows(q, k, v, 4, 2)
        for idx in ([0], [3, 8], [1, 2, 4, 5]):
            assert np.array_equal(exact_attention_rows(q[idx], k, v, 4, 2), full[idx])

    def test_approximate_matches_reference(self, rng):
        q = rng.standard_normal((4, 16))
        k = rng.standard_normal((6, 8))
        pos = np.array([1, 4])
        dv = rng.standard_normal((2, 8))
        out = approximate_attention(q, k, dv, SaliencyIndex(pos), 4, 2)
        padded = np.zeros((6, 8))
        padded[pos] = dv
        np.testing.assert_allclose(out, ref_attention(q, k, padded, 4, 2), atol=1e-12)

    def test_approximation_exact_when_keys_fixed(self, rng):
        # A does not change, so C_old + A[:, idx] dV is the exact new context
        q = rng.standard_normal((5, 16))
        k = rng.standard_normal((5, 8))
        v_old = rng.standard_normal((5, 8))
        v_new = v_old.copy()
        idx = np.array([0, 3])
        v_new[idx] += rng.standard_normal((2, 8))
        c_old = exact_attention_rows(q, k, v_old, 4, 2)
        approx = c_old + approximate_attention(q, k, v_new[idx] - v_old[idx], SaliencyIndex(idx), 4, 2)
        np.testing.assert_allclose(approx, exact_attention_rows(q, k, v_new, 4, 2), atol=1e-12)

    def test_approximate_empty_index(self, rng):
        out = approximate_attention(rng.standard_normal((3, 8)), np.zeros((4, 8)), np.zeros((0, 8)), SaliencyIndex.empty(), 2, 2)
        assert np.array_equal(out, np.zeros((3, 8)))


class TestSelect:
    def test_examples(self):
        new = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        old = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 0.0]])
        assert list(select_salient(new, old, 0.99)) == [1, 2]
        assert list(select_salient(new, old, 0.5)) == [2]
        assert list(select_salient(new, old, 0.99, global_offset=10)) == [11, 12]

    def test_strict_vs_inclusive(self):
        a = np.array([[1.0, 0.0]])
        assert len(select_salient(a, a, 1.0)) == 0
        assert list(select_salient(a, a, 1.0, inclusive=True)) == [0]

    def test_monotone_in_tau(self, rng):
        new, old = rng.standard_normal((40, 8)), rng.standard_normal((40, 8))
        prev = SaliencyIndex.empty()
        for tau in np.linspace(-1.1, 1.1, 23):
            cur = select_salient(new, old, tau)
            assert prev.issubset(cur)
            prev = cur
        assert len(select_salient(new, old, 2.0)) == 40
        assert len(select_salient(new, old, -2.0)) == 0


class TestFullStep:
    def test_matches_reference(self, tiny_weights, tiny_prompt):
        response = np.array([36, 4, 36, 36, 20, 36, 36, 36])
        caches, out = fresh_caches(tiny_weights, tiny_prompt, response)
        ids = np.concatenate([tiny_prompt, response])
        np.testing.assert_allclose(out.logits, ref_forward(tiny_weights, ids), rtol=0, atol=1e-10)
        assert caches.valid and out.next_salient is None

    def test_cached_context_recomputes(self, tiny_weights, tiny_prompt):
        response = np.full(8, 36)
        caches, _ = fresh_caches(tiny_weights, tiny_prompt, response)
        lc = caches.layers[0]
        c = tiny_weights.config
        q = _q0(tiny_weights, tiny_prompt, response)
        np.testing.assert_allclose(lc.C, ref_attention(q, lc.K, lc.V, c.n_heads, c.n_kv_heads), atol=1e-12)

    def test_rejects_response_only(self, tiny_weights, tiny_prompt):
        caches = CacheSet.allocate(tiny_weights.config, 8, 8)
        with pytest.raises(InputModeError):
            full_step(tiny_weights, StepInput.response_only(tiny_prompt, np.full(8, 36)), caches)

    def test_input_must_match_cache(self, tiny_weights, tiny_prompt):
        caches = CacheSet.allocate(tiny_weights.config, 8, 16)
        with pytest.raises(InputModeError):
            full_step(tiny_weights, StepInput.full_sequence(tiny_prompt, np.full(8, 36)), caches)


def _q0(w, prompt, response):
    from mdlm_sparse.model import q_project
    from mdlm_sparse.numerics import rms_norm

    ids = np.concatenate([prompt, response])
    a = rms_norm(w.embedding[ids], w.layers[0].attn_gain)
    return q_project(w, 0, a, np.arange(ids.size))


class TestSparseStep:
    def _setup(self, w, prompt):
        response = np.full(8, 36)
        caches, _ = fresh_caches(w, prompt, response)
        response = response.copy()
        response[[1, 5]] = [3, 17]
        return caches, response

    def test_requires_valid_cache(self, tiny_weights, tiny_prompt):
        caches = CacheSet.allocate(tiny_weights.config, 8, 8)
        with pytest.raises(CacheStateError):
            sparse_step(tiny_weights, StepInput.full_sequence(tiny_prompt, np.full(8, 36)), caches, SaliencyIndex.empty(), EngineConfig())

    def test_all_salient_equals_full(self, tiny_weights, tiny_prompt):
        caches, response = self._setup(tiny_weights, tiny_prompt)
        inp = StepInput.full_sequence(tiny_prompt, response)
        sparse = sparse_step(tiny_weights, inp, caches, SaliencyIndex.empty(), EngineConfig(force_mode="all_salient"))
        ref_caches = CacheSet.allocate(tiny_weights.config, 8, 8)
        dense = full_step(tiny_weights, inp, ref_caches)
        assert np.array_equal(sparse.logits, dense.logits)
        for a, b in zip(caches.layers, ref_caches.layers):
            for name in ("K", "V", "C", "ffn_out"):
                assert np.array_equal(a.matrices()[name], b.matrices()[name])
        assert sparse.metrics.total_flops == dense.metrics.total_flops

    def test_none_salient_reuses_cache(self, tiny_weights, tiny_prompt):
        caches, response = self._setup(tiny_weights, tiny_prompt)
        before = caches.snapshot()
        inp = StepInput.full_sequence(tiny_prompt, response)
        out = sparse_step(tiny_weights, inp, caches, SaliencyIndex.span(8, 16), EngineConfig(force_mode="none_salient"))
        for a, b in zip(caches.layers, before.layers):
            assert np.array_equal(a.ffn_out, b.ffn_out)
        assert len(out.next_salient) == 0
        assert out.metrics.flops_ffn == [0, 0]

    def test_empty_set_changes_nothing(self, tiny_weights, tiny_prompt):
        caches, response = self._setup(tiny_weights, tiny_prompt)
        before = caches.snapshot()
        out = sparse_step(tiny_weights, StepInput.full_sequence(tiny_prompt, response), caches, SaliencyIndex.empty(), EngineConfig())
        assert len(out.next_salient) == 0
        for a, b in zip(caches.layers, before.layers):
            for name in ("K", "V", "C", "ffn_out"):
                assert np.array_equal(a.matrices()[name], b.matrices()[name])

    def test_response_only_leaves_prompt_rows(self, tiny_weights, tiny_prompt):
        caches, response = self._setup(tiny_weights, tiny_prompt)
        before = caches.snapshot()
        inp = StepInput.response_only(tiny_prompt, response)
        out = sparse_step(tiny_weights, inp, caches, SaliencyIndex.span(0, 16), EngineConfig(tau=2.0))
        for a, b in zip(caches.layers, before.layers):
            for name in ("K", "V", "C", "ffn_out"):
                assert np.array_equal(a.matrices()[name][:8], b.matrices()[name][:8])
        assert out.logits.shape == (8, 37)
        assert list(out.next_salient) == list(range(8, 16))

    def test_salient_set_within_input(self, tiny_weights, tiny_prompt):
        caches, response = self._setup(tiny_weights, tiny_prompt)
        out = sparse_step(tiny_weights, StepInput.full_sequence(tiny_prompt, response), caches, SaliencyIndex.span(8, 16), EngineConfig(tau=0.9999), capture=True)
        assert out.next_salient.issubset(SaliencyIndex.span(0, 16))
        assert len(out.captured) == 2
        C, Cc = out.captured[-1]
        assert list(out.next_salient) == list(select_salient(C, Cc, 0.9999))

    def test_fault_hook_breaks_equivalence(self, tiny_weights, tiny_prompt):
        caches, response = self._setup(tiny_weights, tiny_prompt)
        inp = StepInput.full_sequence(tiny_prompt, response)
        cfg = EngineConfig(force_mode="all_salient", fault_flip_scatter=True)
        sparse = sparse_step(tiny_weights, inp, caches, SaliencyIndex.empty(), cfg)
        dense = full_step(tiny_weights, inp, CacheSet.allocate(tiny_weights.config, 8, 8))
        assert not np.array_equal(sparse.logits, dense.logits)


class TestSchedule:
    def test_plan(self):
        cfg = EngineConfig()
        plan = [step_plan(t, cfg) for t in range(10)]
        assert [k for k, _ in plan] == ["full"] * 4 + ["sparse"] * 6
        assert [m for _, m in plan[4:]] == ["full_sequence", "response_only", "response_only", "response_only", "full_sequence", "response_only"]

    def test_oracle_and_no_response_only(self):
        assert step_plan(9, EngineConfig(oracle=True)) == ("full", "full_sequence")
        assert step_plan(9, EngineConfig(response_only_enabled=False)) == ("sparse", "full_sequence")

    @pytest.mark.parametrize("kw", [dict(T_full=0), dict(full_input_period=0), dict(tau=float("nan")), dict(force_mode="x")])
    def test_invalid(self, kw):
        with pytest.raises(EngineConfigError):
            EngineConfig(**kw)


class TestGenerate:
    def test_step_count_and_tokens(self, tiny_weights, tiny_prompt):
        res = generate(tiny_weights, tiny_prompt, 16, EngineConfig(), SAMPLER)
        assert len(res.report.steps) == 16
        assert res.tokens.shape == (16,)
        assert all(0 <= t < 37 for t in res.tokens)

    def test_n_u_steps(self, tiny_weights, tiny_prompt):
        res = generate(tiny_weights, tiny_prompt, 16, EngineConfig(), SamplerConfig(n_u=3, block_size=16))
        assert len(res.report.steps) == 6

    def test_prompt_not_mutated(self, tiny_weights, tiny_prompt):
        copy = tiny_prompt.copy()
        generate(tiny_weights, tiny_prompt, 16, EngineConfig(), SAMPLER)
        assert np.array_equal(tiny_prompt, copy)

    def test_deterministic(self, tiny_weights, tiny_prompt):
        a = generate(tiny_weights, tiny_prompt, 16, EngineConfig(), SAMPLER)
        b = generate(tiny_weights, tiny_prompt, 16, EngineConfig(), SAMPLER)
        assert np.array_equal(a.tokens, b.tokens)

    def test_all_salient_matches_oracle(self, tiny_weights, tiny_prompt):
        cfg = dict(response_only_enabled=False)
        o = generate(tiny_weights, tiny_prompt, 16, EngineConfig(oracle=True), SAMPLER, keep_logits=True)
        s = generate(tiny_weights, tiny_prompt, 16, EngineConfig(force_mode="all_salient", **cfg), SAMPLER, keep_logits=True)
        assert np.array_equal(o.tokens, s.tokens)
        assert all(np.array_equal(a, b) for a, b in zip(o.logits, s.logits))
        assert o.report.totals()["flops_total"] == s.report.totals()["flops_total"]

    def test_sparse_cheaper(self, tiny_weights, tiny_prompt):
        o = generate(tiny_weights, tiny_prompt, 16, EngineConfig(oracle=True), SAMPLER)
        s = generate(tiny_weights, tiny_prompt, 16, EngineConfig(tau=0.999), SAMPLER)
        assert s.report.totals()["flops_total"] < o.report.totals()["flops_total"]

    def test_flops_monotone_in_tau(self, tiny_weights, tiny_prompt):
        # selection at the first sparse step grows with tau
        counts = []
        for tau in (0.5, 0.999, 2.0):
            res = generate(tiny_weights, tiny_prompt, 16, EngineConfig(tau=tau), SAMPLER, max_steps=5)
            counts.append(res.report.steps[4].total_flops)
        assert counts == sorted(counts)

    def test_include_decoded_adds_positions(self, tiny_weights, tiny_prompt):
        res = generate(tiny_weights, tiny_prompt, 16, EngineConfig(tau=-2.0, include_decoded=True), SAMPLER)
        # the previous step's decoded position re-enters layer 0 every sparse step
        assert all(s.flops_attn_scores[0] > 0 for s in res.report.steps[5:])
        plain = generate(tiny_weights, tiny_prompt, 16, EngineConfig(tau=-2.0), SAMPLER)
        assert all(s.flops_attn_scores[0] == 0 for s in plain.report.steps[5:])

    def test_rejects_bad_prompt(self, tiny_weights):
        with pytest.raises(ValueError):
            generate(tiny_weights, [], 16)
        with pytest.raises(ValueError):
            generate(tiny_weights, [40], 16, sampler_cfg=SAMPLER)
