"""Kernel correctness and compiled/pure backend parity."""

import numpy as np
import pytest

from evisynth import _core_py
from evisynth import kernels as K

try:
    from evisynth import _core
    HAVE_COMPILED = True
except ImportError:
    HAVE_COMPILED = False

BACKENDS = [_core_py] + ([_core] if HAVE_COMPILED else [])
I64 = np.int64


def _rand(n, seed):
    return np.random.default_rng(seed).standard_normal(n)


@pytest.mark.parametrize("impl", BACKENDS)
def test_expit_logit_roundtrip(impl):
    x = _rand(100, 1) * 5
    p = np.empty_like(x)
    impl.expit_into(x, p)
    back = np.empty_like(p)
    impl.logit_into(p, back)
    assert np.allclose(back, x, atol=1e-9)
    assert np.all((p > 0) & (p < 1))


@pytest.mark.parametrize("impl", BACKENDS)
def test_logit_guards(impl):
    p = np.array([0.0, 1.0, 0.5])
    out = np.empty(3)
    impl.logit_into(p, out)
    assert out[0] == -np.inf and out[1] == np.inf and out[2] == 0.0


@pytest.mark.parametrize("impl", BACKENDS)
def test_softmax_rows_simplex(impl):
    vals = _rand(10, 2).copy()
    indptr = np.array([0, 3, 7, 10], dtype=I64)
    impl.softmax_rows(vals, indptr)
    for r in range(3):
        seg = vals[indptr[r]:indptr[r + 1]]
        assert abs(seg.sum() - 1.0) < 1e-12
        assert np.all(seg > 0)


@pytest.mark.parametrize("impl", BACKENDS)
def test_binom_sum_p_matches_high_precision(impl):
    # frozen: log C(10,3) + 3 log .3 + 7 log .7 computed at 50 digits
    v = impl.binom_sum_p(np.array([3.0]), np.array([10.0]), np.array([0.3]))
    assert abs(v - (-1.3211512777668886 - np.log(120.0))) < 1e-12


@pytest.mark.parametrize("impl", BACKENDS)
def test_binom_sum_p_zero_conventions(impl):
    assert impl.binom_sum_p(np.array([0.0]), np.array([0.0]),
                            np.array([0.5])) == 0.0
    assert impl.binom_sum_p(np.array([0.0]), np.array([3.0]),
                            np.array([0.0])) == 0.0
    assert impl.binom_sum_p(np.array([1.0]), np.array([3.0]),
                            np.array([0.0])) == -np.inf


@pytest.mark.parametrize("impl", BACKENDS)
def test_binom_sum_logit_extremes(impl):
    y = np.array([0.0, 2.0, 0.0, 2.0])
    n = np.array([5.0, 2.0, 5.0, 2.0])
    eta = np.array([-np.inf, np.inf, np.inf, -np.inf])
    # y=0 at p=0 and y=n at p=1 contribute 0; impossible data -> -inf
    assert impl.binom_sum_logit(y[:1], n[:1], eta[:1]) == 0.0
    assert impl.binom_sum_logit(y[1:2], n[1:2], eta[1:2]) == 0.0
    assert impl.binom_sum_logit(y[2:3], n[2:3], eta[2:3]) == -np.inf
    assert impl.binom_sum_logit(y[3:4], n[3:4], eta[3:4]) == -np.inf


@pytest.mark.parametrize("impl", BACKENDS)
def test_binom_logit_consistency(impl):
    y = np.array([3.0, 0.0, 9.0])
    n = np.array([10.0, 4.0, 9.0])
    eta = np.array([-1.2, 0.4, 2.0])
    p = np.empty_like(eta)
    impl.expit_into(eta, p)
    assert abs(impl.binom_sum_logit(y, n, eta)
               - impl.binom_sum_p(y, n, p)) < 1e-10


@pytest.mark.parametrize("impl", BACKENDS)
def test_poisson_sum(impl):
    # frozen: -4 + 4 log 4 (the -log 4! constant is added by the caller)
    v = impl.poisson_sum(np.array([4.0]), np.array([4.0]))
    assert abs(v - (-1.6328763858683831 + np.log(24.0))) < 1e-12
    assert impl.poisson_sum(np.array([0.0]), np.array([0.0])) == 0.0


@pytest.mark.parametrize("impl", BACKENDS)
def test_csr_and_scatter(impl):
    arr = _rand(20, 3)
    idx = np.array([0, 5, 5, 7, 1, 2, 19], dtype=I64)
    indptr = np.array([0, 4, 7], dtype=I64)
    out = np.empty(2)
    impl.csr_gather_sum(arr, idx, indptr, out)
    assert np.allclose(out, [arr[[0, 5, 5, 7]].sum(), arr[[1, 2, 19]].sum()])
    grad = np.zeros(20)
    impl.csr_scatter_add(np.array([2.0, -1.0]), idx, indptr, grad)
    assert grad[5] == 4.0 and grad[0] == 2.0 and grad[19] == -1.0


@pytest.mark.parametrize("impl", BACKENDS)
def test_softmax_backward_matches_fd(impl):
    vals0 = _rand(6, 4)
    indptr = np.array([0, 3, 6], dtype=I64)
    w = _rand(6, 5)

    def f(v):
        vv = v.copy()
        impl.softmax_rows(vv, indptr)
        return float(np.dot(vv, w))

    p = vals0.copy()
    impl.softmax_rows(p, indptr)
    dv = np.empty(6)
    impl.softmax_rows_backward(p, w, indptr, dv)
    for j in range(6):
        e = np.zeros(6)
        e[j] = 1e-7
        assert abs((f(vals0 + e) - f(vals0 - e)) / 2e-7 - dv[j]) < 1e-5


@pytest.mark.skipif(not HAVE_COMPILED, reason="compiled core unavailable")
def test_backend_parity():
    """Compiled and pure backends agree to near machine precision."""
    g = np.random.default_rng(42)
    x = g.standard_normal(500) * 3
    for fn in ("expit_into", "softplus_into"):
        a, b = np.empty(500), np.empty(500)
        getattr(_core, fn)(x, a)
        getattr(_core_py, fn)(x, b)
        assert np.allclose(a, b, rtol=1e-13, atol=1e-15)
    y = g.integers(0, 20, 300).astype(float)
    n = y + g.integers(0, 30, 300).astype(float)
    p = g.random(300) * 0.98 + 0.01
    assert np.isclose(_core.binom_sum_p(y, n, p), _core_py.binom_sum_p(y, n, p),
                      rtol=1e-12)
    eta = g.standard_normal(300) * 2
    assert np.isclose(_core.binom_sum_logit(y, n, eta),
                      _core_py.binom_sum_logit(y, n, eta), rtol=1e-12)
    lam = g.random(300) * 50 + 0.1
    assert np.isclose(_core.poisson_sum(y, lam), _core_py.poisson_sum(y, lam),
                      rtol=1e-12)
    mu = g.standard_normal(300)
    sd = g.random(300) + 0.5
    assert np.isclose(_core.normal_sum(x[:300], mu, sd),
                      _core_py.normal_sum(x[:300], mu, sd), rtol=1e-12)


def test_active_backend_exposed():
    assert K.BACKEND in ("compiled", "pure")
