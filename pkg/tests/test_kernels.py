"""The numba and numpy versions of every kernel agree."""

import numpy as np
import pytest

from elasticprune import kernels
from elasticprune._accel import HAVE_NUMBA

pytestmark = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def net(rng, d=6, h=32, a=12):
    return rng.normal(size=(d, h)), rng.normal(size=h), rng.normal(size=(h, a)), rng.normal(size=a)


def test_surrogate(rng):
    n = 64
    unary = rng.random(n)
    pa = np.sort(rng.choice(n, 30))
    pb = np.minimum(pa + 1, n - 1)
    pc = rng.random(30)
    for _ in range(20):
        pruned = rng.random(n) < 0.4
        a = kernels.surrogate_log_ppl_np(1.5, unary, pa, pb, pc, pruned)
        b = kernels.surrogate_log_ppl_nb(1.5, unary, pa, pb, pc, pruned)
        assert a == pytest.approx(b, rel=1e-12)
    empty = np.zeros(0, np.int64)
    assert kernels.surrogate_log_ppl_nb(0.0, unary, empty, empty, np.zeros(0), pruned) == pytest.approx(
        kernels.surrogate_log_ppl_np(0.0, unary, empty, empty, np.zeros(0), pruned)
    )


def test_forward(rng):
    W1, b1, W2, b2 = net(rng)
    S = rng.normal(size=(9, 6))
    np.testing.assert_allclose(kernels.mlp_forward_nb(W1, b1, W2, b2, S), kernels.mlp_forward_np(W1, b1, W2, b2, S), rtol=1e-12, atol=1e-12)


def test_td_grads(rng):
    W1, b1, W2, b2 = net(rng)
    S = rng.normal(size=(16, 6))
    A = rng.integers(0, 12, 16)
    Y = rng.normal(size=16)
    out_np = kernels.td_loss_grads_np(W1, b1, W2, b2, S, A, Y)
    out_nb = kernels.td_loss_grads_nb(W1, b1, W2, b2, S, A, Y)
    for x, y in zip(out_np, out_nb):
        np.testing.assert_allclose(x, y, rtol=1e-10, atol=1e-12)


def test_masked_max_and_argmax(rng):
    Q = rng.normal(size=(10, 7))
    legal = rng.random((10, 7)) < 0.5
    legal[:, 3] = True
    np.testing.assert_allclose(kernels.masked_row_max_nb(Q, legal), kernels.masked_row_max_np(Q, legal))
    for q, m in zip(Q, legal):
        assert kernels.masked_argmax_nb(q, m) == kernels.masked_argmax_np(q, m)
    q = np.array([1.0, 5.0, 5.0, 2.0])
    m = np.array([True, True, True, True])
    assert kernels.masked_argmax_nb(q, m) == kernels.masked_argmax_np(q, m) == 1
    none = np.zeros(4, bool)
    assert kernels.masked_argmax_nb(q, none) == kernels.masked_argmax_np(q, none) == -1


def test_adam(rng):
    p = rng.normal(size=(5, 4))
    g = rng.normal(size=(5, 4))
    m = rng.normal(size=(5, 4)) * 0.1
    v = rng.random((5, 4)) * 0.1
    args = (1e-3, 0.9, 0.999, 0.19, 0.002, 1e-8)
    p1, m1, v1 = p.copy(), m.copy(), v.copy()
    p2, m2, v2 = p.copy(), m.copy(), v.copy()
    kernels.adam_update_np(p1, g, m1, v1, *args)
    kernels.adam_update_nb(p2, g, m2, v2, *args)
    for x, y in ((p1, p2), (m1, m2), (v1, v2)):
        np.testing.assert_allclose(x, y, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("flag,expected", [("0", "numpy"), ("off", "numpy"), ("1", "numba")])
def test_env_flag_selects_backend(flag, expected):
    import os
    import subprocess
    import sys

    code = "from elasticprune import kernels, _accel; print(_accel.backend_name(), kernels.mlp_forward.__name__)"
    env = {**os.environ, "ELASTICPRUNE_NUMBA": flag}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout.split()
    assert out[0] == expected
    assert out[1].endswith("_nb" if expected == "numba" else "_np")
