import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from contcrm import _accel, kernels
from contcrm.estimators import solve_alpha

needs_numba = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")


def both(fn, *args):
    with _accel.backend("numpy"):
        a = fn(*args)
    with _accel.backend("numba"):
        b = fn(*args)
    return a, b


def assert_same(a, b, rtol=1e-12, atol=0.0):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=rtol, atol=atol)


positive = st.floats(1e-3, 50.0)


@needs_numba
@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 20, elements=st.floats(-5, 10)), arrays(np.float64, 20, elements=positive), st.floats(0.05, 3.0))
def test_density_kernels_agree(a, mu, sigma):
    assert_same(*both(kernels.normal_logpdf_grad, a, mu, sigma), atol=1e-12)
    assert_same(*both(kernels.lognormal_logpdf_grad, a, mu, sigma), atol=1e-9)


@needs_numba
@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 30, elements=st.floats(0, 1e4)), st.floats(1.0, 100.0))
def test_soft_clip_kernels_agree(w, M):
    assert_same(*both(kernels.soft_clip, w, M, solve_alpha(M)))


@needs_numba
@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.floats(0.1, 200.0), st.integers(0, 10_000))
def test_ccp_kernels_agree(m, gamma, seed):
    r = np.random.default_rng(seed)
    eta = r.normal(size=(15, m)) * 3
    anchors = np.sort(r.uniform(0, 5, m))
    (mu_a, P_a), (mu_b, P_b) = both(kernels.ccp_forward, eta, anchors, gamma)
    assert_same((mu_a, P_a), (mu_b, P_b), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(P_a.sum(axis=1), 1.0, rtol=1e-12)
    u = r.normal(size=15)
    assert_same(*both(kernels.ccp_backward, P_a, anchors, mu_a, gamma, u), rtol=1e-10, atol=1e-12)


def test_ccp_forward_is_stable_for_huge_scores():
    eta = np.array([[1e6, 1e6 + 1.0, 2e6]])
    mu, P = kernels.ccp_forward(eta, np.array([1.0, 2.0, 3.0]), 50.0)
    assert np.all(np.isfinite(P)) and mu[0] == pytest.approx(1.0)


@needs_numba
def test_bootstrap_and_moments_agree(rng):
    num, den = rng.normal(size=50), rng.uniform(size=50)
    idx = rng.integers(0, 50, size=(20, 50))
    assert_same(*both(kernels.bootstrap_sums, num, den, idx), rtol=1e-12)
    for r in range(3):
        assert kernels.bootstrap_sums(num, den, idx)[0][r] == pytest.approx(num[idx[r]].sum(), rel=1e-12)
    assert_same(*both(kernels.weight_moments, den, num), rtol=1e-12)


def test_backend_switching():
    start = _accel.get_backend()
    with _accel.backend("numpy"):
        assert _accel.get_backend() == "numpy" and not _accel.use_numba()
    assert _accel.get_backend() == start
    with pytest.raises(ValueError):
        _accel.set_backend("cuda")


@pytest.mark.parametrize("flag, expected", [("1", "numpy"), ("true", "numpy"), ("0", None)])
def test_env_flag_selects_backend(flag, expected):
    env = dict(os.environ, CONTCRM_DISABLE_NUMBA=flag)
    out = subprocess.run(
        [sys.executable, "-c", "from contcrm._accel import get_backend; print(get_backend())"],
        env=env, capture_output=True, text=True, check=True,
    ).stdout.strip()
    if expected is None:
        expected = "numba" if _accel.HAVE_NUMBA else "numpy"
    assert out == expected
