import numpy as np
import pytest

from morseflow import _stepcore_py, _stepping


def _inputs(seed=0, d=2, nM=40, n_steps=30):
    rng = np.random.default_rng(seed)
    n_pre = nM + 3
    X = np.zeros((n_pre + n_steps + 1, d))
    X[:n_pre + 1] = 0.4 + 0.05 * rng.standard_normal((n_pre + 1, d))
    h = 0.01
    j = np.arange(1, nM + 1, dtype=float)
    w = np.full(nM, h)
    w[-1] = 0.5 * h
    m = np.exp(-2.0 * j * h)
    rw1 = (w * m)[::-1].copy()
    rwh = (h * np.exp(-2.0 * (j - 0.5) * h))[::-1].copy()
    a = np.ones(d)
    b = np.ones(d)
    args = (n_pre, n_steps, h, 0.05, a, b, rw1, rwh,
            float(rw1.sum()), float(rwh.sum()), float(rw1.sum()) + 0.5 * h, 1e6)
    return X, args


def test_python_core_runs():
    X, args = _inputs()
    assert _stepcore_py.run_steps(X, *args) == -1
    assert np.all(np.isfinite(X))


@pytest.mark.skipif(not _stepping.HAVE_COMPILED, reason="compiled core not built")
def test_compiled_matches_python_bitwise():
    from morseflow import _stepcore

    Xa, args = _inputs(seed=3)
    Xb = Xa.copy()
    ra = _stepcore_py.run_steps(Xa, *args)
    rb = _stepcore.run_steps(Xb, *args)
    assert ra == rb == -1
    np.testing.assert_array_equal(Xa, Xb)


@pytest.mark.skipif(not _stepping.HAVE_COMPILED, reason="compiled core not built")
def test_compiled_blowup_index_matches():
    from morseflow import _stepcore

    Xa, args = _inputs(seed=5)
    args = args[:-1] + (0.42,)  # bound tight enough to trip mid-run
    Xb = Xa.copy()
    ra = _stepcore_py.run_steps(Xa, *args)
    rb = _stepcore.run_steps(Xb, *args)
    assert ra == rb
