import sys

import numpy as np
import pytest

from mdlm_sparse.model import ModelConfig, init_weights


def tiny_config(**over):
    base = dict(
        n_layers=2,
        d_model=16,
        n_heads=4,
        n_kv_heads=2,
        d_ff=32,
        vocab_size=37,
        mask_token_id=36,
    )
    base.update(over)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["paper_literal", "residual"])
def residual_mode(request):
    return request.param


@pytest.fixture
def tiny_weights(residual_mode):
    # a larger init scale keeps attention away from uniform in the tiny model
    return init_weights(tiny_config(residual_mode=residual_mode), seed=3, stddev=0.3)


@pytest.fixture
def tiny_prompt():
    return np.array([1, 5, 9, 2, 7, 3, 11, 4], dtype=np.int64)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
