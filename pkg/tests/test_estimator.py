import numpy as np
import pytest
from sklearn.base import clone

from mdlm_sparse.estimator import SparseDiffusionDecoder, check_prompts

SMALL = dict(n_layers=2, d_model=16, n_heads=4, n_kv_heads=2, d_ff=32, vocab_size=37, init_std=0.3, response_length=16, block_size=8)


def test_params_and_clone():
    est = SparseDiffusionDecoder(tau=0.5, **SMALL)
    assert est.get_params()["tau"] == 0.5
    c = clone(est).set_params(tau=0.9)
    assert c.tau == 0.9 and est.tau == 0.5


def test_predict_shape_and_reports():
    X = np.array([[1, 2, 3, 4], [5, 6, 7, 8]])
    est = SparseDiffusionDecoder(**SMALL).fit()
    y = est.predict(X)
    assert y.shape == (2, 16) and len(est.reports_) == 2
    assert np.array_equal(y, SparseDiffusionDecoder(**SMALL).fit_predict(X))


def test_all_salient_matches_oracle():
    X = np.array([[1, 2, 3, 4]])
    a = SparseDiffusionDecoder(force_mode="all_salient", response_only=False, **SMALL).fit().predict(X)
    b = SparseDiffusionDecoder(oracle=True, **SMALL).fit().predict(X)
    assert np.array_equal(a, b)


def test_unfitted():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        SparseDiffusionDecoder().predict([[1]])


def test_check_prompts():
    with pytest.raises(ValueError):
        check_prompts([[1, 40]], 37)
    with pytest.raises(ValueError):
        check_prompts([[1, 36]], 37, 36)
