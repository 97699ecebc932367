"""Numerical checks of the saliency math, the refresh cost model, and run instrumentation.

Everything here consumes finished runs or builds its own small random
instances; nothing mutates shared state.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .engine import EngineConfig, generate
from .metrics import FLOP_KINDS, RunReport, StepMetrics  # noqa: F401  (re-exported)
from .model import ModelConfig, init_weights
from .numerics import Rng, condition_number, cosine_similarity_rows, matmul, rms_norm, rng_normal_fill
from .sampler import SamplerConfig

# -- cost model ----------------------------------------------------------------


class CostModelError(ValueError):
    pass


@dataclass(frozen=True)
class CostModelInput:
    L_P: int
    L_R: int
    B: int
    n_u: int
    tokens_per_step: int
    tokens_per_refresh: int

    def __post_init__(self):
        if min(self.B, self.n_u) < 1:
            raise CostModelError("B and n_u must be positive")
        if self.B % self.n_u:
            raise CostModelError(f"B={self.B} is not divisible by n_u={self.n_u}")
        if min(self.tokens_per_step, self.tokens_per_refresh, self.L_P, self.L_R) < 0:
            raise CostModelError("token counts must be nonnegative")


# Block-cache baselines at 1024 prompt / 256 response tokens.
COST_POLICIES = {
    "prefix": dict(L_P=1024, L_R=256, B=32, tokens_per_step=144, tokens_per_refresh=1280),
    "dual": dict(L_P=1024, L_R=256, B=32, tokens_per_step=32, tokens_per_refresh=1280),
}


def cost_model_avg_tokens(inp: CostModelInput) -> float:
    """Mean tokens computed per step when one refresh happens every ``B / n_u`` steps."""
    steps_per_block = inp.B // inp.n_u
    avg = Fraction(inp.tokens_per_step * (steps_per_block - 1) + inp.tokens_per_refresh, steps_per_block)
    return float(avg)


# -- context-delta decomposition ---------------------------------------------


def delta_decomposition_error(S_prev, dS, V_prev, dV) -> float:
    """Max abs gap between ``(S+dS)(V+dV) - SV`` and ``(S+dS)dV + dS V``."""
    direct = matmul(S_prev + dS, V_prev + dV) - matmul(S_prev, V_prev)
    expanded = matmul(S_prev + dS, dV) + matmul(dS, V_prev)
    return float(np.max(np.abs(direct - expanded))) if direct.size else 0.0


def check_delta_decomposition(dims=(8, 12, 6), seed: int = 0, trials: int = 1) -> float:
    """Max decomposition error over random ``(n x m)`` scores and ``(m x d)`` values."""
    n, m, d = dims
    if max(n, m) > 32:
        raise ValueError("keep instances small (rows <= 32)")
    rng = Rng(seed)
    worst = 0.0
    for _ in range(trials):
        S = rng_normal_fill(rng, n, m, 1.0)
        dS = rng_normal_fill(rng, n, m, 0.1)
        V = rng_normal_fill(rng, m, d, 1.0)
        dV = rng_normal_fill(rng, m, d, 0.1)
        worst = max(worst, delta_decomposition_error(S, dS, V, dV))
    return worst


# -- scale invariance and the directional error bound -------------------------


def _uniform_alpha(rng: Rng) -> float:
    # (0, 100]
    return float(100.0 * (1.0 - rng.uniform_block(1)[0]))


def check_prop1(d: int = 64, trials: int = 100, seed: int = 0, alpha: float | None = None) -> float:
    """Max ``||RMSNorm((a C) W) - RMSNorm(C W)||_inf`` with ``eps = 0``, unit gain."""
    rng = Rng(seed)
    gain = np.ones(d)
    worst = 0.0
    for _ in range(trials):
        C = rng_normal_fill(rng, 1, d, 1.0)
        W = rng_normal_fill(rng, d, d, 1.0 / math.sqrt(d))
        a = _uniform_alpha(rng) if alpha is None else alpha
        lhs = rms_norm(matmul(a * C, W), gain, eps=0.0)
        rhs = rms_norm(matmul(C, W), gain, eps=0.0)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


@dataclass
class Prop2Terms:
    similarity: float
    input_distance: float  # ||u_hat - v_hat||
    closed_form: float  # sqrt(2 (1 - s))
    delta: float  # ||RMSNorm(u W) - RMSNorm(v W)||, eps 0, unit gain
    unit_delta: float  # same with unit-norm outputs instead of RMSNorm
    kappa: float


def prop2_terms(u, v, W, kappa: float | None = None) -> Prop2Terms:
    """Both sides of the directional bound for one pair of context vectors."""
    u = np.asarray(u, dtype=np.float64).reshape(1, -1)
    v = np.asarray(v, dtype=np.float64).reshape(1, -1)
    u_hat = u / np.linalg.norm(u)
    v_hat = v / np.linalg.norm(v)
    s = float(cosine_similarity_rows(u_hat, v_hat)[0])
    s = min(1.0, max(-1.0, s))
    yu, yv = matmul(u_hat, W), matmul(v_hat, W)
    gain = np.ones(u.shape[1])
    delta = float(np.linalg.norm(rms_norm(yu, gain, eps=0.0) - rms_norm(yv, gain, eps=0.0)))
    unit_delta = float(np.linalg.norm(yu / np.linalg.norm(yu) - yv / np.linalg.norm(yv)))
    return Prop2Terms(
        similarity=s,
        input_distance=float(np.linalg.norm(u_hat - v_hat)),
        closed_form=math.sqrt(2.0 * (1.0 - s)),
        delta=delta,
        unit_delta=unit_delta,
        kappa=condition_number(W) if kappa is None else kappa,
    )


@dataclass
class Prop2Report:
    trials: int
    exact_component_error: float
    bound_violation_rate: float
    max_ratio: float
    unit_violation_rate: float
    unit_max_ratio: float

    def lines(self) -> list[str]:
        return [
            f"directional bound exact component max error: {self.exact_component_error:.3e}",
            f"directional bound RMSNorm bound violation rate: {self.bound_violation_rate:.4f}",
            f"directional bound RMSNorm max ratio delta/(kappa*sqrt(2(1-s))): {self.max_ratio:.6f}",
            f"directional bound unit-norm bound violation rate: {self.unit_violation_rate:.4f}",
            f"directional bound unit-norm max ratio: {self.unit_max_ratio:.6f}",
        ]


def check_prop2(d: int = 16, trials: int = 1000, seed: int = 0, n_matrices: int = 8) -> Prop2Report:
    """Exact distance identity plus an empirical look at the bound.

    Pairs are random unit vectors; ``W`` cycles through ``n_matrices`` random
    Gaussian matrices whose condition numbers come from the Jacobi SVD. The
    bound is reported both for RMSNorm outputs (a factor ``sqrt(d)`` larger
    than unit-norm outputs) and for unit-norm outputs.
    """
    rng = Rng(seed)
    mats = [rng_normal_fill(rng, d, d, 1.0 / math.sqrt(d)) for _ in range(n_matrices)]
    kappas = [condition_number(W) for W in mats]
    worst_exact = 0.0
    ratios, unit_ratios = [], []
    for i in range(trials):
        u = rng_normal_fill(rng, 1, d, 1.0)
        v = rng_normal_fill(rng, 1, d, 1.0)
        t = prop2_terms(u, v, mats[i % n_matrices], kappas[i % n_matrices])
        worst_exact = max(worst_exact, abs(t.input_distance - t.closed_form))
        bound = t.kappa * t.closed_form
        if bound > 0:
            ratios.append(t.delta / bound)
            unit_ratios.append(t.unit_delta / bound)
    ratios = np.asarray(ratios)
    unit_ratios = np.asarray(unit_ratios)
    return Prop2Report(
        trials=trials,
        exact_component_error=worst_exact,
        bound_violation_rate=float(np.mean(ratios > 1.0)) if ratios.size else 0.0,
        max_ratio=float(ratios.max()) if ratios.size else 0.0,
        unit_violation_rate=float(np.mean(unit_ratios > 1.0)) if unit_ratios.size else 0.0,
        unit_max_ratio=float(unit_ratios.max()) if unit_ratios.size else 0.0,
    )


# -- oracle equivalence --------------------------------------------------------


def synthetic_prompt(seed: int, L_P: int, vocab_size: int, mask_token_id: int) -> np.ndarray:
    """Seeded token ids uniform over the vocabulary minus the mask id."""
    if vocab_size < 2:
        raise ValueError("need at least one non-mask token")
    rng = Rng(seed ^ 0x5EED5EED5EED5EED)
    raw = (rng.u64_block(L_P) % np.uint64(vocab_size - 1)).astype(np.int64)
    return np.where(raw >= mask_token_id, raw + 1, raw)


@dataclass
class EquivalenceResult:
    passed: bool
    tokens_identical: bool
    max_logit_deviation: float


def compare_runs(oracle, sparse) -> tuple[bool, float]:
    """Token identity and max response-logit deviation over steps both runs recorded."""
    same = bool(np.array_equal(oracle.tokens, sparse.tokens))
    devs = [float(np.max(np.abs(a - b))) for a, b in zip(oracle.logits, sparse.logits)]
    return same, max(devs) if devs else 0.0


def verify_equivalence(
    config: ModelConfig | None = None,
    seed: int = 0,
    L_P: int = 64,
    L_R: int = 64,
    sampler_cfg: SamplerConfig | None = None,
    tol: float = 1e-9,
    engine_cfg: EngineConfig | None = None,
    weights=None,
) -> EquivalenceResult:
    """Sparse path with every row salient and full input each step vs. pure full steps."""
    config = config or ModelConfig()
    weights = weights if weights is not None else init_weights(config, seed)
    prompt = synthetic_prompt(seed, L_P, config.vocab_size, config.mask_token_id)
    base = engine_cfg or EngineConfig()
    oracle = generate(weights, prompt, L_R, replace(base, oracle=True), sampler_cfg, keep_logits=True)
    sparse = generate(
        weights,
        prompt,
        L_R,
        replace(base, oracle=False, force_mode="all_salient", response_only_enabled=False),
        sampler_cfg,
        keep_logits=True,
    )
    same, dev = compare_runs(oracle, sparse)
    return EquivalenceResult(same and dev < tol, same, dev)


# -- instrumentation -------------------------------------------------------------


@dataclass
class Histogram:
    layer: int
    edges: np.ndarray  # bin_lo/bin_hi pairs as rows
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def similarity_histogram(run: RunReport, layer: int, bins: int = 50, lo: float = 0.9) -> Histogram:
    """Counts of per-token similarities at ``layer`` over all sparse steps.

    Bins split ``[lo, 1]`` evenly; when ``lo > -1`` an extra leading bin holds
    ``[-1, lo)``. Values are clipped to ``[-1, 1]`` so rounding above 1 lands
    in the top bin.
    """
    if not 0 <= layer < max(run.n_layers, 1) or run.n_layers == 0:
        raise IndexError(f"layer {layer} out of range for {run.n_layers} layers")
    samples = [
        m.similarity[layer] for m in run.sparse_steps if m.similarity is not None and len(m.similarity) > layer
    ]
    s = np.clip(np.concatenate(samples), -1.0, 1.0) if samples else np.zeros(0)
    edges = np.linspace(lo, 1.0, bins + 1)
    counts = np.histogram(s[s >= lo], bins=edges)[0]
    pairs = np.column_stack([edges[:-1], edges[1:]])
    if lo > -1.0:
        pairs = np.vstack([[-1.0, lo], pairs])
        counts = np.concatenate([[np.count_nonzero(s < lo)], counts])
    return Histogram(layer, pairs, counts.astype(np.int64))


def salient_counts(run: RunReport) -> list[dict]:
    """Per-layer average/min/max salient-set size across sparse steps."""
    steps = run.sparse_steps
    rows = []
    for layer in range(run.n_layers):
        vals = [m.n_salient[layer] for m in steps]
        rows.append(
            {
                "layer": layer,
                "avg_salient": float(np.mean(vals)) if vals else 0.0,
                "min_salient": int(min(vals)) if vals else 0,
                "max_salient": int(max(vals)) if vals else 0,
            }
        )
    return rows


def avg_salient_fraction(run: RunReport) -> float:
    steps = run.sparse_steps
    if not steps:
        return 1.0
    return float(np.mean([n / m.input_len for m in steps for n in m.n_salient]))


def replay_salient_counts(weights, prompt, L_R: int, engine_cfg: EngineConfig, sampler_cfg, taus, step=None):
    """Salient-set sizes per layer at one sparse step, re-thresholded for each tau.

    The run is made once with ``engine_cfg``; the captured ``(C, C_cache)``
    pairs of step ``step`` (default: the first sparse step) are shared by
    every tau, so the counts are comparable layer by layer.
    """
    step = engine_cfg.T_full if step is None else step
    res = generate(weights, prompt, L_R, engine_cfg, sampler_cfg, capture_steps=[step], max_steps=step + 1)
    pairs = res.captured[step]
    out = {}
    for tau in taus:
        counts = []
        for C, C_cache in pairs:
            s = cosine_similarity_rows(C, C_cache)
            hit = s <= tau if engine_cfg.inclusive_threshold else s < tau
            counts.append(int(np.count_nonzero(hit)))
        out[tau] = counts
    return out


# -- CSV / report output ---------------------------------------------------------


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_step_metrics_csv(run: RunReport, path) -> None:
    rows = []
    for m in run.steps:
        for layer in range(len(m.n_salient)):
            rows.append(
                [m.step, m.input_mode, layer, m.n_salient[layer]]
                + [getattr(m, k)[layer] for k in FLOP_KINDS]
            )
    _write_csv(path, ["step", "mode", "layer", "n_salient", *FLOP_KINDS], rows)


def write_salient_counts_csv(run: RunReport, path) -> None:
    rows = [[r["layer"], repr(r["avg_salient"]), r["min_salient"], r["max_salient"]] for r in salient_counts(run)]
    _write_csv(path, ["layer", "avg_salient", "min_salient", "max_salient"], rows)


def write_similarity_hist_csv(run: RunReport, path, bins: int = 50, lo: float = 0.9) -> None:
    rows = []
    for layer in range(run.n_layers):
        h = similarity_histogram(run, layer, bins, lo)
        for (a, b), c in zip(h.edges, h.counts):
            rows.append([layer, repr(float(a)), repr(float(b)), int(c)])
    _write_csv(path, ["layer", "bin_lo", "bin_hi", "count"], rows)


def cost_model_rows(policies, n_us) -> list[list]:
    rows = []
    for name in policies:
        p = COST_POLICIES[name]
        for n_u in n_us:
            inp = CostModelInput(n_u=n_u, **p)
            rows.append(
                [name, inp.L_P, inp.L_R, inp.B, n_u, inp.tokens_per_step, inp.tokens_per_refresh,
                 repr(cost_model_avg_tokens(inp))]
            )
    return rows


def write_cost_model_csv(rows, path) -> None:
    _write_csv(
        path,
        ["policy", "L_P", "L_R", "B", "n_u", "tokens_per_step", "tokens_per_refresh", "avg_tokens"],
        rows,
    )


def write_run_outputs(run: RunReport, out_dir, tokens) -> None:
    """tokens.txt, the three run CSVs and report.json under ``out_dir``."""
    out = Path(out_dir)
    (out / "tokens.txt").write_text("".join(f"{int(t)}\n" for t in tokens))
    write_step_metrics_csv(run, out / "step_metrics.csv")
    write_salient_counts_csv(run, out / "salient_counts.csv")
    write_similarity_hist_csv(run, out / "similarity_hist.csv")
    (out / "report.json").write_text(run.to_json() + "\n")
