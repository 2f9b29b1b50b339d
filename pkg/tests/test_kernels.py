import os
import subprocess
import sys

import numpy as np
import pytest

from ediv import _kernels

pytestmark = pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba unavailable")


def close(a, b):
    return np.max(np.abs(np.asarray(a) - np.asarray(b))) <= 1e-12 * max(1.0, np.max(np.abs(b)))


@pytest.mark.parametrize("n,d", [(1, 1), (7, 3), (200, 5)])
def test_backends_agree(rng, n, d):
    npb, nbb = _kernels.numpy_backend, _kernels.numba_backend
    X = rng.normal(size=(n, d))
    R = rng.normal(size=(n, 2))
    w = rng.random(n)
    w /= w.sum()
    eps = rng.normal(size=n)
    for a, b in zip(npb.weighted_mean_cov(X, w), nbb.weighted_mean_cov(X, w)):
        assert close(b, a)
    z = rng.normal(size=(n, d))
    assert close(nbb.elu(z), npb.elu(z))
    up = rng.normal(size=(n, d))
    assert close(nbb.elu_backward(z, npb.elu(z), up), npb.elu_backward(z, npb.elu(z), up))
    for a, b in zip(npb.env_moments(eps, w, X, R), nbb.env_moments(eps, w, X, R)):
        assert close(b, a)
    adj = (0.3, -1.2, rng.normal(size=d), rng.normal(size=2))
    for a, b in zip(npb.env_moments_adjoint(eps, w, X, R, *adj), nbb.env_moments_adjoint(eps, w, X, R, *adj)):
        assert close(b, a)


@pytest.mark.parametrize("flag,expected", [("0", "numpy"), ("1", "numba")])
def test_env_flag_selects_backend(flag, expected):
    env = dict(os.environ, EDIV_JIT=flag)
    out = subprocess.run([sys.executable, "-c", "from ediv import _kernels; print(_kernels.backend.name)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected
