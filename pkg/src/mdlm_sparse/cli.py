"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis
from .cache import dump_matrix_csv
from .engine import FULL_SEQUENCE, EngineConfig, EngineConfigError, SamplerExhaustedError, generate, step_plan
from .model import ConfigError, ModelConfig, WeightFileError, init_weights, load_weights, save_weights
from .sampler import SamplerConfig, SamplerConfigError

OUT_ENV = "MDLM_SPARSE_OUT"
EXIT_OK, EXIT_VERIFY_FAILED, EXIT_USAGE = 0, 1, 2

_MODEL_FLAGS = {
    "n_layers": 8,
    "d_model": 128,
    "n_heads": 8,
    "n_kv_heads": 8,
    "d_ff": 512,
    "vocab_size": 512,
    "mask_token_id": None,
    "rope_theta": 10000.0,
    "residual_mode": "paper_literal",
    "init_std": 0.02,
}


class UsageError(Exception):
    pass


def _add_model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model (seeded init; exclusive with --weights)")
    for name in ("n_layers", "d_model", "n_heads", "n_kv_heads", "d_ff", "vocab_size", "mask_token_id"):
        g.add_argument("--" + name.replace("_", "-"), type=int, default=None)
    g.add_argument("--rope-theta", type=float, default=None)
    g.add_argument("--residual-mode", choices=["paper_literal", "residual"], default=None)
    g.add_argument("--init-std", type=float, default=None, help="weight init stddev (default 0.02)")
    g.add_argument("--weights", type=Path, default=None, help="load a DYLM weight file instead")
    g.add_argument("--save-weights", type=Path, default=None, help="also write the weights used")


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=0.99)
    p.add_argument("--t-full", type=int, default=4)
    p.add_argument("--full-input-period", type=int, default=4)
    p.add_argument("--response-only", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--force-mode", choices=["normal", "all-salient", "none-salient"], default="normal")
    p.add_argument("--inclusive-threshold", action="store_true", help="select s <= tau instead of s < tau")
    p.add_argument("--include-decoded", action="store_true", help="seed each sparse step with just-decoded positions")
    p.add_argument("--n-u", type=int, default=1)
    p.add_argument("--block-size", type=int, default=32)
    p.add_argument("--semi-ar", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--l-p", type=int, default=64, help="synthetic prompt length")
    p.add_argument("--prompt-file", type=Path, default=None, help="whitespace-separated token ids")
    p.add_argument("--l-r", type=int, default=64)
    p.add_argument("--out", type=Path, default=None, help=f"output directory (env {OUT_ENV})")
    _add_model_args(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdlm-sparse", description="Saliency-aware sparse decoding for a toy MDLM")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="run one decoding session and write reports")
    _add_run_args(g)
    g.add_argument("--oracle", action="store_true", help="full step at every step")
    g.add_argument("--dump-cache", action="store_true", help="write final cache matrices as CSV")

    c = sub.add_parser("compare", help="oracle vs sparse run on the same seed")
    _add_run_args(c)

    s = sub.add_parser("sweep-tau", help="one sparse run per threshold")
    _add_run_args(s)
    s.add_argument("--taus", type=float, nargs="+", required=True)

    v = sub.add_parser("verify", help="run the numerical checks")
    _add_run_args(v)
    v.add_argument("--trials", type=int, default=1000)
    v.add_argument("--seeds", type=int, nargs="+", default=[0])
    v.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)

    m = sub.add_parser("cost-model", help="average computed tokens per step for block-cache policies")
    m.add_argument("--policy", choices=sorted(analysis.COST_POLICIES), nargs="+", default=["prefix", "dual"])
    m.add_argument("--n-u", type=int, nargs="+", default=[1])
    m.add_argument("--tokens-per-step", type=int, default=None, help="add a custom policy row")
    m.add_argument("--tokens-per-refresh", type=int, default=None)
    m.add_argument("--block-size", type=int, default=32)
    m.add_argument("--l-p", type=int, default=1024)
    m.add_argument("--l-r", type=int, default=256)
    m.add_argument("--out", type=Path, default=None)
    return parser


# -- config plumbing ------------------------------------------------------------


def _model_and_weights(args):
    explicit = {k: getattr(args, k) for k in _MODEL_FLAGS if getattr(args, k) is not None}
    if args.weights is not None:
        if explicit:
            raise UsageError(f"--weights cannot be combined with {', '.join('--' + k.replace('_', '-') for k in explicit)}")
        weights = load_weights(args.weights)
        return weights.config, weights
    params = {k: v for k, v in _MODEL_FLAGS.items() if v is not None}
    params.update(explicit)
    std = params.pop("init_std")
    if "mask_token_id" not in params:
        params["mask_token_id"] = params["vocab_size"] - 1
    config = ModelConfig(**params)
    weights = init_weights(config, args.seed, stddev=std)
    if args.save_weights is not None:
        save_weights(weights, args.save_weights)
    return config, weights


def _engine_cfg(args, **over) -> EngineConfig:
    cfg = EngineConfig(
        tau=args.tau,
        T_full=args.t_full,
        full_input_period=args.full_input_period,
        response_only_enabled=args.response_only,
        force_mode=args.force_mode.replace("-", "_"),
        inclusive_threshold=args.inclusive_threshold,
        include_decoded=args.include_decoded,
        oracle=getattr(args, "oracle", False),
    )
    return replace(cfg, **over)


def _sampler_cfg(args) -> SamplerConfig:
    return SamplerConfig(n_u=args.n_u, block_size=args.block_size, semi_ar=args.semi_ar)


def _prompt(args, config: ModelConfig) -> np.ndarray:
    if args.prompt_file is not None:
        try:
            ids = np.array([int(t) for t in args.prompt_file.read_text().split()], dtype=np.int64)
        except ValueError as exc:
            raise UsageError(f"prompt file must hold integers: {exc}") from exc
        if ids.size == 0:
            raise UsageError("prompt file is empty")
        return ids
    if args.l_p < 1:
        raise UsageError("--l-p must be positive")
    return analysis.synthetic_prompt(args.seed, args.l_p, config.vocab_size, config.mask_token_id)


def _out_dir(args) -> Path:
    out = args.out or Path(os.environ.get(OUT_ENV, "runs/latest"))
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


# -- subcommands -----------------------------------------------------------------


def cmd_generate(args) -> int:
    out = _out_dir(args)
    config, weights = _model_and_weights(args)
    prompt = _prompt(args, config)
    res = generate(weights, prompt, args.l_r, _engine_cfg(args), _sampler_cfg(args))
    analysis.write_run_outputs(res.report, out, res.tokens)
    if args.dump_cache:
        cdir = out / "cache"
        cdir.mkdir(exist_ok=True)
        for i, lc in enumerate(res.caches.layers):
            for name, mat in lc.matrices().items():
                dump_matrix_csv(mat, cdir / f"layer{i}_{name}.csv")
    print(f"generated {len(res.tokens)} tokens in {len(res.report.steps)} steps -> {out}")
    return EXIT_OK


def _oracle_and_sparse(args, weights, prompt, engine_cfg):
    sampler = _sampler_cfg(args)
    oracle = generate(weights, prompt, args.l_r, replace(engine_cfg, oracle=True), sampler, keep_logits=True)
    sparse = generate(weights, prompt, args.l_r, replace(engine_cfg, oracle=False), sampler, keep_logits=True)
    return oracle, sparse


def cmd_compare(args) -> int:
    config, weights = _model_and_weights(args)
    prompt = _prompt(args, config)
    oracle, sparse = _oracle_and_sparse(args, weights, prompt, _engine_cfg(args))
    same, dev = analysis.compare_runs(oracle, sparse)
    f_o = oracle.report.totals()["flops_total"]
    f_s = sparse.report.totals()["flops_total"]
    lines = [
        f"identical: {str(same).lower()}",
        f"max_logit_deviation: {dev:.3e}",
        f"flops_oracle: {f_o}",
        f"flops_sparse: {f_s}",
        f"flop_ratio: {f_s / f_o:.6f}",
        f"avg_salient_fraction: {analysis.avg_salient_fraction(sparse.report):.6f}",
    ]
    print("\n".join(lines))
    if args.out is not None or os.environ.get(OUT_ENV):
        (_out_dir(args) / "compare.txt").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_sweep_tau(args) -> int:
    out = _out_dir(args)
    config, weights = _model_and_weights(args)
    prompt = _prompt(args, config)
    sampler = _sampler_cfg(args)
    base = _engine_cfg(args)
    oracle = generate(weights, prompt, args.l_r, replace(base, oracle=True), sampler, keep_logits=True)
    f_o = oracle.report.totals()["flops_total"]
    replay = analysis.replay_salient_counts(weights, prompt, args.l_r, base, sampler, args.taus)
    first_mode = step_plan(base.T_full, base)[1]
    first_len = prompt.size + args.l_r if first_mode == FULL_SEQUENCE else args.l_r
    rows = []
    for tau in args.taus:
        run = generate(weights, prompt, args.l_r, replace(base, tau=tau), sampler, keep_logits=True)
        same, _ = analysis.compare_runs(oracle, run)
        rows.append(
            [
                repr(float(tau)),
                repr(analysis.avg_salient_fraction(run.report)),
                repr(run.report.totals()["flops_total"] / f_o),
                str(same).lower(),
                repr(sum(replay[tau]) / (config.n_layers * first_len)),
            ]
        )
    header = ["tau", "avg_salient_fraction", "flop_ratio", "tokens_identical", "first_sparse_fraction"]
    analysis._write_csv(out / "sweep_tau.csv", header, rows)
    print(",".join(header))
    for r in rows:
        print(",".join(r))
    return EXIT_OK


def cmd_verify(args) -> int:
    results = []

    def record(name, ok, detail):
        results.append(ok)
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")

    err = max(analysis.check_delta_decomposition(seed=s) for s in range(100))
    record("context delta decomposition (100 instances)", err < 1e-10, f"max error {err:.3e}")
    dev = analysis.check_prop1(d=64, trials=args.trials, seed=args.seed)
    record(f"scale invariance ({args.trials} trials)", dev < 1e-9, f"max deviation {dev:.3e}")
    rep = analysis.check_prop2(d=16, trials=args.trials, seed=args.seed)
    record(
        f"directional identity ({args.trials} trials)",
        rep.exact_component_error < 1e-10,
        f"max error {rep.exact_component_error:.3e}",
    )
    for line in rep.lines()[1:]:
        print(f"[INFO] {line}")

    engine_cfg = EngineConfig(fault_flip_scatter=args.inject_fault)
    sampler = _sampler_cfg(args)
    for mode in ("paper_literal", "residual"):
        for kv in (8, 2):
            for seed in args.seeds:
                cfg = ModelConfig(n_kv_heads=kv, residual_mode=mode)
                r = analysis.verify_equivalence(
                    cfg, seed, L_P=args.l_p, L_R=args.l_r, sampler_cfg=sampler, engine_cfg=engine_cfg
                )
                record(
                    f"oracle equivalence mode={mode} n_kv_heads={kv} seed={seed}",
                    r.passed,
                    f"tokens identical={str(r.tokens_identical).lower()} max logit dev {r.max_logit_deviation:.3e}",
                )
    ok = all(results)
    print("all hard checks passed" if ok else "verification FAILED")
    return EXIT_OK if ok else EXIT_VERIFY_FAILED


def cmd_cost_model(args) -> int:
    rows = analysis.cost_model_rows(args.policy, args.n_u)
    if args.tokens_per_step is not None or args.tokens_per_refresh is not None:
        if args.tokens_per_step is None or args.tokens_per_refresh is None:
            raise UsageError("--tokens-per-step and --tokens-per-refresh go together")
        for n_u in args.n_u:
            inp = analysis.CostModelInput(args.l_p, args.l_r, args.block_size, n_u, args.tokens_per_step, args.tokens_per_refresh)
            rows.append(
                ["custom", inp.L_P, inp.L_R, inp.B, n_u, inp.tokens_per_step, inp.tokens_per_refresh,
                 repr(analysis.cost_model_avg_tokens(inp))]
            )
    header = ["policy", "L_P", "L_R", "B", "n_u", "tokens_per_step", "tokens_per_refresh", "avg_tokens"]
    if args.out is not None or os.environ.get(OUT_ENV):
        analysis.write_cost_model_csv(rows, _out_dir(args) / "cost_model.csv")
    print(",".join(header))
    for r in rows:
        print(",".join(str(x) for x in r))
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "compare": cmd_compare,
    "sweep-tau": cmd_sweep_tau,
    "verify": cmd_verify,
    "cost-model": cmd_cost_model,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (
        UsageError,
        ConfigError,
        EngineConfigError,
        SamplerConfigError,
        analysis.CostModelError,
        WeightFileError,
        SamplerExhaustedError,
        OSError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
