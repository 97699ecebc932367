"""Confidence-ranked unmasking with optional semi-autoregressive blocks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SamplerConfigError(ValueError):
    pass


class DecodingComplete(Exception):
    """No masked positions remain to be decoded."""


class UnmaskInvariantError(ValueError):
    """A commit targeted a position that is already decoded or outside the active block."""


@dataclass(frozen=True)
class SamplerConfig:
    n_u: int = 1
    block_size: int = 32
    semi_ar: bool = True
    confidence: str = "max_prob"

    def __post_init__(self):
        if self.n_u < 1:
            raise SamplerConfigError(f"n_u must be >= 1, got {self.n_u}")
        if self.semi_ar and self.block_size < self.n_u:
            raise SamplerConfigError(f"block_size={self.block_size} smaller than n_u={self.n_u}")
        if self.block_size < 1:
            raise SamplerConfigError(f"block_size must be >= 1, got {self.block_size}")
        if self.confidence != "max_prob":
            raise SamplerConfigError(f"unsupported confidence measure {self.confidence!r}")


@dataclass
class DecodeState:
    """Prompt plus response buffer.

    ``decoded`` tracks unmasked positions explicitly, since a decoded token may
    itself equal the mask id if the model predicts it.
    """

    prompt: np.ndarray
    response: np.ndarray
    decoded: np.ndarray
    mask_token_id: int
    block_size: int
    active_block: int = 0
    masked_count: list[int] = field(default_factory=list)

    @classmethod
    def start(cls, prompt, L_R: int, mask_token_id: int, cfg: SamplerConfig) -> "DecodeState":
        if L_R < 1:
            raise SamplerConfigError(f"L_R must be >= 1, got {L_R}")
        prompt = np.asarray(prompt, dtype=np.int64).copy()
        if cfg.semi_ar:
            if L_R % cfg.block_size:
                raise SamplerConfigError(f"block_size={cfg.block_size} must divide L_R={L_R}")
            block = cfg.block_size
        else:
            block = L_R
        response = np.full(L_R, mask_token_id, dtype=np.int64)
        decoded = np.zeros(L_R, dtype=bool)
        return cls(prompt, response, decoded, mask_token_id, block, 0, [block] * (L_R // block))

    @property
    def L_R(self) -> int:
        return int(self.response.size)

    @property
    def n_masked(self) -> int:
        return int(sum(self.masked_count))

    def masked_positions(self) -> np.ndarray:
        return np.flatnonzero(~self.decoded)

    def candidate_positions(self) -> np.ndarray:
        """Masked response positions eligible this step (the active block only)."""
        if self.active_block >= len(self.masked_count):
            return np.zeros(0, dtype=np.int64)
        lo = self.active_block * self.block_size
        return lo + np.flatnonzero(~self.decoded[lo : lo + self.block_size])


def max_prob_confidence(logits: np.ndarray) -> np.ndarray:
    """Per-row maximum softmax probability, computed as ``1 / sum(exp(l - max))``."""
    z = logits - logits.max(axis=1, keepdims=True)
    return 1.0 / np.exp(z).sum(axis=1)


def process_logit(logits, state: DecodeState, cfg: SamplerConfig):
    """Pick the next positions to unmask and their tokens, without mutating ``state``.

    ``logits`` has one row per response position. Among the eligible masked
    positions the ``min(n_u, remaining)`` most confident are chosen (ties go to
    the lower position); each gets its argmax token (ties go to the lower id).

    Returns:
        ``(tokens, positions)`` as int64 arrays, positions ascending.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] != state.L_R:
        raise ValueError(f"expected {state.L_R} response rows of logits, got {logits.shape}")
    cand = state.candidate_positions()
    if cand.size == 0:
        raise DecodingComplete("no masked positions remain")
    rows = logits[cand]
    conf = max_prob_confidence(rows)
    order = np.lexsort((cand, -conf))
    chosen = np.sort(cand[order[: min(cfg.n_u, cand.size)]])
    tokens = np.argmax(logits[chosen], axis=1).astype(np.int64)
    return tokens, chosen


def commit(state: DecodeState, tokens, positions) -> None:
    """Write decoded tokens into the response and advance the active block."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    positions = np.asarray(positions, dtype=np.int64).reshape(-1)
    if tokens.shape != positions.shape:
        raise ValueError("tokens and positions differ in length")
    if np.unique(positions).size != positions.size:
        raise UnmaskInvariantError("duplicate positions in one commit")
    lo = state.active_block * state.block_size
    hi = lo + state.block_size
    for p in positions.tolist():
        if not 0 <= p < state.L_R:
            raise UnmaskInvariantError(f"position {p} outside the response")
        if state.decoded[p]:
            raise UnmaskInvariantError(f"position {p} is already unmasked")
        if not lo <= p < hi:
            raise UnmaskInvariantError(f"position {p} outside active block {state.active_block}")
    state.response[positions] = tokens
    state.decoded[positions] = True
    state.masked_count[state.active_block] -= positions.size
    while state.active_block < len(state.masked_count) and state.masked_count[state.active_block] == 0:
        state.active_block += 1
