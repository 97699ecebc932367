"""scikit-learn style wrapper so a decoder can be configured, cloned and grid-searched.

``fit`` only materializes weights (there is no training); ``predict`` decodes
one response per prompt row.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .engine import EngineConfig, generate
from .model import ModelConfig, init_weights, load_weights
from .sampler import SamplerConfig


def check_prompts(X, vocab_size: int, mask_token_id: int | None = None) -> np.ndarray:
    """Validate a 2-D array of prompt token ids (one prompt per row)."""
    X = check_array(X, dtype=np.int64, ensure_min_features=1)
    if X.min() < 0 or X.max() >= vocab_size:
        raise ValueError(f"token ids must lie in [0, {vocab_size})")
    if mask_token_id is not None and np.any(X == mask_token_id):
        raise ValueError("prompts must not contain the mask token")
    return X


class SparseDiffusionDecoder(BaseEstimator):
    """Toy masked-diffusion decoder with saliency-aware sparse steps.

    Parameters mirror ``ModelConfig``, ``EngineConfig`` and ``SamplerConfig``.
    Set ``weights_path`` to load a weight file instead of seeded init.

    Attributes:
        weights_: the model weights, set by ``fit``.
        reports_: one ``RunReport`` per prompt from the last ``predict``.
    """

    def __init__(
        self,
        n_layers=8,
        d_model=128,
        n_heads=8,
        n_kv_heads=8,
        d_ff=512,
        vocab_size=512,
        mask_token_id=None,
        rope_theta=10000.0,
        residual_mode="paper_literal",
        init_std=0.02,
        seed=0,
        weights_path=None,
        response_length=64,
        tau=0.99,
        T_full=4,
        full_input_period=4,
        response_only=True,
        force_mode="normal",
        oracle=False,
        n_u=1,
        block_size=32,
        semi_ar=True,
    ):
        self.n_layers = n_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_kv_heads = n_kv_heads
        self.d_ff = d_ff
        self.vocab_size = vocab_size
        self.mask_token_id = mask_token_id
        self.rope_theta = rope_theta
        self.residual_mode = residual_mode
        self.init_std = init_std
        self.seed = seed
        self.weights_path = weights_path
        self.response_length = response_length
        self.tau = tau
        self.T_full = T_full
        self.full_input_period = full_input_period
        self.response_only = response_only
        self.force_mode = force_mode
        self.oracle = oracle
        self.n_u = n_u
        self.block_size = block_size
        self.semi_ar = semi_ar

    def _model_config(self) -> ModelConfig:
        mask = self.vocab_size - 1 if self.mask_token_id is None else self.mask_token_id
        return ModelConfig(
            n_layers=self.n_layers,
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_kv_heads=self.n_kv_heads,
            d_ff=self.d_ff,
            vocab_size=self.vocab_size,
            mask_token_id=mask,
            rope_theta=self.rope_theta,
            residual_mode=self.residual_mode,
        )

    def fit(self, X=None, y=None):
        if self.weights_path is not None:
            self.weights_ = load_weights(self.weights_path)
        else:
            self.weights_ = init_weights(self._model_config(), self.seed, stddev=self.init_std)
        self.config_ = self.weights_.config
        if X is not None:
            check_prompts(X, self.config_.vocab_size, self.config_.mask_token_id)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "weights_")
        X = check_prompts(X, self.config_.vocab_size, self.config_.mask_token_id)
        engine = EngineConfig(
            tau=self.tau,
            T_full=self.T_full,
            full_input_period=self.full_input_period,
            response_only_enabled=self.response_only,
            force_mode=self.force_mode,
            oracle=self.oracle,
        )
        sampler = SamplerConfig(n_u=self.n_u, block_size=self.block_size, semi_ar=self.semi_ar)
        out = np.empty((X.shape[0], self.response_length), dtype=np.int64)
        self.reports_ = []
        for i, prompt in enumerate(X):
            res = generate(self.weights_, prompt, self.response_length, engine, sampler)
            out[i] = res.tokens
            self.reports_.append(res.report)
        return out

    def fit_predict(self, X, y=None) -> np.ndarray:
        return self.fit(X).predict(X)
