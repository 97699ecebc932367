"""Per-step instrumentation records and the run report they roll up into."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

REPORT_VERSION = 1
FLOP_KINDS = ("flops_attn_scores", "flops_attn_context", "flops_ffn", "flops_proj")
HIGH_SIMILARITY = 0.99


@dataclass
class StepMetrics:
    """What one denoising step computed, layer by layer.

    FLOPs count matmuls only, two per multiply-add. ``flops_lm_head`` is kept
    out of the per-layer lists because it belongs to no layer.
    """

    step: int
    kind: str  # "full" or "sparse"
    input_mode: str  # "full_sequence" or "response_only"
    input_len: int
    n_salient: list[int] = field(default_factory=list)
    flops_attn_scores: list[int] = field(default_factory=list)
    flops_attn_context: list[int] = field(default_factory=list)
    flops_ffn: list[int] = field(default_factory=list)
    flops_proj: list[int] = field(default_factory=list)
    flops_lm_head: int = 0
    similarity: list[np.ndarray] | None = None

    @property
    def total_flops(self) -> int:
        return sum(sum(getattr(self, k)) for k in FLOP_KINDS) + self.flops_lm_head

    def similarity_summary(self) -> list[dict] | None:
        if self.similarity is None:
            return None
        out = []
        for s in self.similarity:
            if s.size == 0:
                out.append({"min": None, "mean": None, "frac_high": None})
            else:
                out.append(
                    {
                        "min": float(s.min()),
                        "mean": float(s.mean()),
                        "frac_high": float(np.mean(s >= HIGH_SIMILARITY)),
                    }
                )
        return out

    def to_dict(self) -> dict:
        d = {
            "step": self.step,
            "kind": self.kind,
            "input_mode": self.input_mode,
            "input_len": self.input_len,
            "n_salient": list(self.n_salient),
            "flops_lm_head": self.flops_lm_head,
            "similarity": self.similarity_summary(),
        }
        for k in FLOP_KINDS:
            d[k] = list(getattr(self, k))
        return d


@dataclass
class RunReport:
    config: dict
    steps: list[StepMetrics] = field(default_factory=list)
    tokens: list[int] = field(default_factory=list)
    wall_clock_s: float = 0.0

    @property
    def n_layers(self) -> int:
        return len(self.steps[0].n_salient) if self.steps else 0

    @property
    def sparse_steps(self) -> list[StepMetrics]:
        return [m for m in self.steps if m.kind == "sparse"]

    def totals(self) -> dict:
        tot = {k: int(sum(sum(getattr(m, k)) for m in self.steps)) for k in FLOP_KINDS}
        tot["flops_lm_head"] = int(sum(m.flops_lm_head for m in self.steps))
        tot["flops_total"] = int(sum(m.total_flops for m in self.steps))
        tot["steps"] = len(self.steps)
        return tot

    def to_dict(self) -> dict:
        return {
            "report_version": REPORT_VERSION,
            "config": self.config,
            "totals": self.totals(),
            "tokens": list(self.tokens),
            "steps": [m.to_dict() for m in self.steps],
            "wall_clock_s": self.wall_clock_s,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        if "report_version" not in d:
            raise ValueError("run report lacks report_version")
        if d["report_version"] != REPORT_VERSION:
            raise ValueError(f"unsupported report_version {d['report_version']}")
        steps = []
        for s in d["steps"]:
            steps.append(
                StepMetrics(
                    step=s["step"],
                    kind=s["kind"],
                    input_mode=s["input_mode"],
                    input_len=s["input_len"],
                    n_salient=list(s["n_salient"]),
                    flops_lm_head=s["flops_lm_head"],
                    **{k: list(s[k]) for k in FLOP_KINDS},
                )
            )
        return cls(d["config"], steps, list(d["tokens"]), d.get("wall_clock_s", 0.0))
