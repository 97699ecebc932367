"""Full and sparse denoising steps, the two attention paths, and the step scheduler.

A full step recomputes every row and refreshes all four per-layer caches. A
sparse step re-projects K/V only for the incoming salient rows, computes exact
attention for those rows, and updates every other row's attention context by
the column-gathered product ``A[:, idx] @ dV``. The rows whose context moved
(cosine similarity against the cache below ``tau``) form the salient set that
goes through OutProj/FFN and feeds the next layer; everything else reuses the
cached FFN output verbatim.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .cache import CacheSet, SaliencyIndex, gather_rows, scatter_rows
from .metrics import RunReport, StepMetrics
from .model import ModelWeights, ffn_forward, kv_project, q_project, qkv_project
from .numerics import ShapeError, cosine_similarity_rows, matmul, rms_norm, row_softmax
from .sampler import DecodeState, SamplerConfig, commit, process_logit

FORCE_MODES = ("normal", "all_salient", "none_salient")
FULL_SEQUENCE = "full_sequence"
RESPONSE_ONLY = "response_only"


class EngineConfigError(ValueError):
    pass


class InputModeError(ValueError):
    pass


class SamplerExhaustedError(RuntimeError):
    """Masked positions remain after the step budget ran out."""


@dataclass(frozen=True)
class EngineConfig:
    """Scheduling and selection knobs.

    ``force_mode`` and ``fault_flip_scatter`` are test hooks. ``oracle`` runs a
    full step every step. ``inclusive_threshold`` switches selection from
    ``s < tau`` to ``s <= tau``. ``include_decoded`` adds the positions decoded
    by the previous step to the salient set a sparse step starts from; off by
    default, in which case an empty set stays empty for the rest of the run.
    """

    tau: float = 0.99
    T_full: int = 4
    full_input_period: int = 4
    response_only_enabled: bool = True
    force_mode: str = "normal"
    inclusive_threshold: bool = False
    oracle: bool = False
    include_decoded: bool = False
    fault_flip_scatter: bool = False

    def __post_init__(self):
        if self.T_full < 1:
            raise EngineConfigError(f"T_full must be >= 1, got {self.T_full}")
        if self.full_input_period < 1:
            raise EngineConfigError(f"full_input_period must be >= 1, got {self.full_input_period}")
        if not math.isfinite(self.tau):
            raise EngineConfigError(f"tau must be finite, got {self.tau}")
        if self.force_mode not in FORCE_MODES:
            raise EngineConfigError(f"force_mode must be one of {FORCE_MODES}, got {self.force_mode!r}")


@dataclass(frozen=True)
class StepInput:
    token_ids: np.ndarray
    global_positions: np.ndarray
    mode: str

    @classmethod
    def full_sequence(cls, prompt, response) -> "StepInput":
        ids = np.concatenate([np.asarray(prompt, np.int64), np.asarray(response, np.int64)])
        return cls(ids, np.arange(ids.size, dtype=np.int64), FULL_SEQUENCE)

    @classmethod
    def response_only(cls, prompt, response) -> "StepInput":
        L_P = len(prompt)
        ids = np.asarray(response, np.int64).copy()
        return cls(ids, np.arange(L_P, L_P + ids.size, dtype=np.int64), RESPONSE_ONLY)

    def check_against(self, caches: CacheSet) -> None:
        n = len(self.token_ids)
        if len(self.global_positions) != n:
            raise InputModeError("token_ids and global_positions differ in length")
        if self.mode == FULL_SEQUENCE:
            expected = np.arange(caches.L_total)
        elif self.mode == RESPONSE_ONLY:
            expected = np.arange(caches.L_P, caches.L_total)
        else:
            raise InputModeError(f"unknown input mode {self.mode!r}")
        if not np.array_equal(self.global_positions, expected):
            raise InputModeError(f"{self.mode} input must cover positions {expected[:1]}..{expected[-1:]}")


@dataclass
class StepOutput:
    logits: np.ndarray
    next_salient: SaliencyIndex | None
    metrics: StepMetrics
    captured: list[tuple[np.ndarray, np.ndarray]] | None = None


# -- attention ---------------------------------------------------------------


def _head_layout(width_q: int, width_kv: int, n_heads: int, n_kv_heads: int) -> int:
    if n_heads < 1 or n_kv_heads < 1 or n_heads % n_kv_heads:
        raise ShapeError(f"n_heads={n_heads} must be a positive multiple of n_kv_heads={n_kv_heads}")
    if width_q % n_heads:
        raise ShapeError(f"query width {width_q} not divisible by n_heads={n_heads}")
    d_head = width_q // n_heads
    if width_kv != n_kv_heads * d_head:
        raise ShapeError(f"kv width {width_kv} != n_kv_heads*d_head = {n_kv_heads * d_head}")
    return d_head


def _head_weights(q_h: np.ndarray, k_h: np.ndarray, d_head: int) -> np.ndarray:
    return row_softmax(matmul(q_h, k_h.T), 1.0 / math.sqrt(d_head))


def exact_attention_rows(q_sal, K, V, n_heads: int, n_kv_heads: int) -> np.ndarray:
    """Bidirectional softmax attention of the given query rows over all of K, V.

    Query head ``h`` reads key/value head ``h // (n_heads // n_kv_heads)``.
    """
    q_sal, K, V = (np.asarray(m, dtype=np.float64) for m in (q_sal, K, V))
    if K.shape != V.shape:
        raise ShapeError(f"K {K.shape} and V {V.shape} differ")
    d_head = _head_layout(q_sal.shape[1], K.shape[1], n_heads, n_kv_heads)
    group = n_heads // n_kv_heads
    out = np.zeros((q_sal.shape[0], q_sal.shape[1]))
    if q_sal.shape[0] == 0:
        return out
    for h in range(n_heads):
        qs = slice(h * d_head, (h + 1) * d_head)
        ks = slice((h // group) * d_head, (h // group + 1) * d_head)
        out[:, qs] = matmul(_head_weights(q_sal[:, qs], K[:, ks], d_head), V[:, ks])
    return out


def approximate_attention(Q, K, delta_V, idx_sal, n_heads: int, n_kv_heads: int) -> np.ndarray:
    """Context delta ``A[:, idx] @ dV`` per head, with ``A = softmax(Q K^T / sqrt(d_head))``.

    Scores are computed fresh against the full (merged) K; only the columns
    at the salient positions enter the product. ``delta_V`` has one row per
    salient position, in index order.
    """
    Q, K, delta_V = (np.asarray(m, dtype=np.float64) for m in (Q, K, delta_V))
    pos = idx_sal.positions if isinstance(idx_sal, SaliencyIndex) else np.asarray(idx_sal, np.int64)
    d_head = _head_layout(Q.shape[1], K.shape[1], n_heads, n_kv_heads)
    if delta_V.shape != (pos.size, K.shape[1]):
        raise ShapeError(f"delta_V {delta_V.shape} does not match |idx|={pos.size} x kv width {K.shape[1]}")
    if pos.size and (pos.min() < 0 or pos.max() >= K.shape[0]):
        raise ShapeError(f"salient positions out of range for {K.shape[0]} keys")
    out = np.zeros((Q.shape[0], Q.shape[1]))
    if pos.size == 0 or Q.shape[0] == 0:
        return out
    group = n_heads // n_kv_heads
    for h in range(n_heads):
        qs = slice(h * d_head, (h + 1) * d_head)
        ks = slice((h // group) * d_head, (h // group + 1) * d_head)
        A = _head_weights(Q[:, qs], K[:, ks], d_head)
        out[:, qs] = matmul(A[:, pos], delta_V[:, ks])
    return out


def _select(similarity: np.ndarray, tau: float, offset: int, inclusive: bool) -> SaliencyIndex:
    hit = similarity <= tau if inclusive else similarity < tau
    return SaliencyIndex(offset + np.flatnonzero(hit))


def select_salient(C_new, C_cached_rows, tau: float, global_offset: int = 0, inclusive: bool = False) -> SaliencyIndex:
    """Global positions whose context cosine similarity to the cache is below ``tau``."""
    return _select(cosine_similarity_rows(C_new, C_cached_rows), tau, global_offset, inclusive)


# -- steps -------------------------------------------------------------------


def _embed(weights: ModelWeights, token_ids) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64)
    V = weights.config.vocab_size
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise ValueError(f"token ids must lie in [0, {V})")
    return np.ascontiguousarray(weights.embedding[ids])


def _logits(weights: ModelWeights, h: np.ndarray) -> np.ndarray:
    return matmul(rms_norm(h, weights.final_gain), weights.lm_head)


def full_step(weights: ModelWeights, inp: StepInput, caches: CacheSet, step: int = 0) -> StepOutput:
    """Dense forward pass over the whole sequence; overwrites every cache row."""
    if inp.mode != FULL_SEQUENCE:
        raise InputModeError("full_step requires full_sequence input")
    inp.check_against(caches)
    cfg = weights.config
    pos = inp.global_positions
    L = Lt = pos.size
    d, kv, ff = cfg.d_model, cfg.kv_width, cfg.d_ff
    metrics = StepMetrics(step, "full", inp.mode, L)
    h = _embed(weights, inp.token_ids)
    for layer, lc in enumerate(caches.layers):
        lw = weights.layers[layer]
        a = rms_norm(h, lw.attn_gain)
        Q, K, V = qkv_project(weights, layer, a, pos)
        C = exact_attention_rows(Q, K, V, cfg.n_heads, cfg.n_kv_heads)
        if cfg.residual_mode == "residual":
            mid = h + matmul(C, lw.wo)
            h = mid + ffn_forward(weights, layer, rms_norm(mid, lw.ffn_gain))
        else:
            h = ffn_forward(weights, layer, rms_norm(matmul(C, lw.wo), lw.ffn_gain))
        lc.K[:] = K
        lc.V[:] = V
        lc.C[:] = C
        lc.ffn_out[:] = h
        lc.valid = True
        metrics.n_salient.append(L)
        metrics.flops_proj.append(2 * L * d * (d + 2 * kv) + 2 * L * d * d)
        metrics.flops_attn_scores.append(2 * L * Lt * d)
        metrics.flops_attn_context.append(2 * L * Lt * d)
        metrics.flops_ffn.append(4 * L * d * ff)
    metrics.flops_lm_head = 2 * L * d * cfg.vocab_size
    return StepOutput(_logits(weights, h), None, metrics)


def sparse_step(
    weights: ModelWeights,
    inp: StepInput,
    caches: CacheSet,
    idx_sal: SaliencyIndex,
    cfg: EngineConfig,
    step: int = 0,
    capture: bool = False,
) -> StepOutput:
    """One cache-reusing step over a full-sequence or response-only input.

    Per layer, in order: normalize the input rows; Q for every input row;
    re-project K/V for the salient rows, taking ``dV`` against the cached V
    before scattering the fresh rows in; exact attention for salient rows;
    ``C_cache + A[:, idx] dV`` for the rest; reselect salient rows by cosine
    similarity to the cached context; OutProj/FFN on the newly salient rows
    only, cached FFN output for all others; write the input rows back.

    Salient positions outside the current input (prompt positions during a
    response-only step) are ignored for that step.

    Returns:
        A ``StepOutput`` whose ``next_salient`` is the last layer's selection.
    """
    caches.require_valid()
    inp.check_against(caches)
    mcfg = weights.config
    d, kv, ff = mcfg.d_model, mcfg.kv_width, mcfg.d_ff
    pos = inp.global_positions
    L, Lt = pos.size, caches.L_total
    offset = int(pos[0])
    all_rows = SaliencyIndex(pos)
    metrics = StepMetrics(step, "sparse", inp.mode, L, similarity=[])
    captured = [] if capture else None

    h = _embed(weights, inp.token_ids)
    incoming = idx_sal.within(offset, offset + L)
    for layer, lc in enumerate(caches.layers):
        lw = weights.layers[layer]
        I = all_rows if cfg.force_mode == "all_salient" else incoming
        rows_I = I.positions - offset
        a = rms_norm(h, lw.attn_gain)
        Q = q_project(weights, layer, a, pos)

        k_new, v_new = kv_project(weights, layer, gather_rows(a, rows_I), I.positions)
        dV = v_new - gather_rows(lc.V, I)
        target = I.positions
        if cfg.fault_flip_scatter and target.size:
            target = target.copy()
            target[0] = (target[0] + 1) % Lt
        scatter_rows(lc.K, target, k_new)
        scatter_rows(lc.V, target, v_new)

        C_cached = gather_rows(lc.C, all_rows)
        C = C_cached.copy()
        non = np.setdiff1d(np.arange(L), rows_I, assume_unique=True)
        if len(I):
            if non.size:
                dC = approximate_attention(gather_rows(Q, non), lc.K, dV, I, mcfg.n_heads, mcfg.n_kv_heads)
                C[non] = C_cached[non] + dC
            C[rows_I] = exact_attention_rows(gather_rows(Q, rows_I), lc.K, lc.V, mcfg.n_heads, mcfg.n_kv_heads)

        sim = cosine_similarity_rows(C, C_cached)
        metrics.similarity.append(sim)
        if capture:
            captured.append((C.copy(), C_cached.copy()))
        if cfg.force_mode == "all_salient":
            N = all_rows
        elif cfg.force_mode == "none_salient":
            N = SaliencyIndex.empty()
        else:
            N = _select(sim, cfg.tau, offset, cfg.inclusive_threshold)
        rows_N = N.positions - offset

        C_N = gather_rows(C, rows_N)
        if mcfg.residual_mode == "residual":
            mid = gather_rows(h, rows_N) + matmul(C_N, lw.wo)
            fresh = mid + ffn_forward(weights, layer, rms_norm(mid, lw.ffn_gain))
        else:
            fresh = ffn_forward(weights, layer, rms_norm(matmul(C_N, lw.wo), lw.ffn_gain))
        scatter_rows(lc.C, all_rows, C)
        scatter_rows(lc.ffn_out, N, fresh)
        h = gather_rows(lc.ffn_out, all_rows)

        n_i, n_n = len(I), len(N)
        metrics.n_salient.append(n_n)
        metrics.flops_proj.append(2 * L * d * d + 4 * n_i * d * kv + 2 * n_n * d * d)
        if n_i:
            metrics.flops_attn_scores.append(2 * L * Lt * d)
            metrics.flops_attn_context.append(2 * n_i * Lt * d + 2 * non.size * n_i * d)
        else:
            metrics.flops_attn_scores.append(0)
            metrics.flops_attn_context.append(0)
        metrics.flops_ffn.append(4 * n_n * d * ff)
        incoming = N
    metrics.flops_lm_head = 2 * L * d * mcfg.vocab_size
    return StepOutput(_logits(weights, h), incoming, metrics, captured)


# -- scheduling --------------------------------------------------------------


def step_plan(t: int, cfg: EngineConfig) -> tuple[str, str]:
    """``(step kind, input mode)`` for step ``t``."""
    if cfg.oracle or t < cfg.T_full:
        return "full", FULL_SEQUENCE
    if not cfg.response_only_enabled or t % cfg.full_input_period == 0:
        return "sparse", FULL_SEQUENCE
    return "sparse", RESPONSE_ONLY


@dataclass
class GenerationResult:
    tokens: np.ndarray
    prompt: np.ndarray
    report: RunReport
    logits: list[np.ndarray] = field(default_factory=list)
    captured: dict[int, list] = field(default_factory=dict)
    caches: CacheSet | None = None


def generate(
    weights: ModelWeights,
    prompt,
    L_R: int,
    engine_cfg: EngineConfig | None = None,
    sampler_cfg: SamplerConfig | None = None,
    *,
    keep_logits: bool = False,
    capture_steps=(),
    max_steps: int | None = None,
) -> GenerationResult:
    """Decode ``L_R`` response tokens after ``prompt`` in ``ceil(L_R / n_u)`` steps.

    Args:
        keep_logits: store each step's response-row logits in the result.
        capture_steps: sparse steps whose per-layer ``(C, C_cache)`` pairs are kept.
        max_steps: stop early after this many steps (no exhaustion check).
    """
    engine_cfg = engine_cfg or EngineConfig()
    sampler_cfg = sampler_cfg or SamplerConfig()
    mcfg = weights.config
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    if prompt.size == 0:
        raise ValueError("prompt must be nonempty")
    if L_R < 1:
        raise ValueError(f"L_R must be positive, got {L_R}")
    if prompt.min() < 0 or prompt.max() >= mcfg.vocab_size:
        raise ValueError(f"prompt token ids must lie in [0, {mcfg.vocab_size})")

    started = time.perf_counter()
    state = DecodeState.start(prompt, L_R, mcfg.mask_token_id, sampler_cfg)
    caches = CacheSet.allocate(mcfg, prompt.size, L_R)
    T_total = math.ceil(L_R / sampler_cfg.n_u)
    n_steps = T_total if max_steps is None else min(T_total, max_steps)
    report = RunReport(
        {
            "model": asdict(mcfg),
            "engine": asdict(engine_cfg),
            "sampler": asdict(sampler_cfg),
            "L_P": int(prompt.size),
            "L_R": int(L_R),
        }
    )
    result = GenerationResult(state.response, prompt, report)
    idx_sal = None
    last_decoded = np.zeros(0, dtype=np.int64)
    capture_steps = set(capture_steps)
    for t in range(n_steps):
        kind, mode = step_plan(t, engine_cfg)
        if mode == FULL_SEQUENCE:
            inp = StepInput.full_sequence(prompt, state.response)
        else:
            inp = StepInput.response_only(prompt, state.response)
        if kind == "full":
            out = full_step(weights, inp, caches, step=t)
        else:
            if idx_sal is None:
                idx_sal = SaliencyIndex.span(prompt.size, prompt.size + L_R)
            elif engine_cfg.include_decoded and last_decoded.size:
                idx_sal = SaliencyIndex(np.union1d(idx_sal.positions, last_decoded))
            out = sparse_step(weights, inp, caches, idx_sal, engine_cfg, step=t, capture=t in capture_steps)
            idx_sal = out.next_salient
            if out.captured is not None:
                result.captured[t] = out.captured
        response_logits = out.logits[-L_R:]
        if keep_logits:
            result.logits.append(response_logits.copy())
        tokens, positions = process_logit(response_logits, state, sampler_cfg)
        commit(state, tokens, positions)
        last_decoded = prompt.size + positions
        report.steps.append(out.metrics)
    if max_steps is None and state.n_masked:
        raise SamplerExhaustedError(f"{state.n_masked} masked positions remain after {T_total} steps")
    report.tokens = state.response.tolist()
    report.wall_clock_s = time.perf_counter() - started
    result.caches = caches
    return result
