"""Hot numeric kernels.

Every kernel exists twice: a pure-numpy version and a numba ``@njit`` version
with explicit loops. The numba path is used when numba imports cleanly and the
``EDIV_JIT`` environment variable is not ``0``. Both paths agree to rounding
(checked in tests/test_kernels.py); each one is deterministic on its own.
"""

import os

import numpy as np

# ---------------------------------------------------------------------------
# numpy reference path


def np_weighted_mean_cov(values, weights):
    mean = weights @ values
    centred = values - mean
    cov = (centred * weights[:, None]).T @ centred
    return mean, cov


def np_elu(z):
    return np.where(z >= 0.0, z, np.expm1(np.minimum(z, 0.0)))


def np_elu_backward(z, a, upstream):
    # d/dz elu = 1 for z >= 0, exp(z) = a + 1 otherwise
    return upstream * np.where(z >= 0.0, 1.0, a + 1.0)


def np_env_moments(eps, weights, X, R):
    """Weighted residual moments of one environment.

    Returns (mean, var, gx, gr) with gx[a] = sum_i w_i eps_i (X_ia - mean_w X_a)
    and gr[m] = sum_i w_i eps_i R_im.
    """
    m = weights @ eps
    dev = eps - m
    v = weights @ (dev * dev)
    we = weights * eps
    xbar = weights @ X
    gx = we @ X - we.sum() * xbar
    gr = we @ R
    return m, v, gx, gr


def np_env_moments_adjoint(eps, weights, X, R, dm, dv, dgx, dgr):
    """Pull the moment adjoints back to per-row residual and representation adjoints."""
    m = weights @ eps
    xbar = weights @ X
    x_part = (X - xbar) @ dgx
    r_part = R @ dgr
    deps = weights * (dm + 2.0 * dv * (eps - m) + x_part + r_part)
    dR = np.outer(weights * eps, dgr)
    return deps, dR


# ---------------------------------------------------------------------------
# numba path

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None

if HAVE_NUMBA:
    _jit = numba.njit(cache=True, nogil=True)

    @_jit
    def nb_weighted_mean_cov(values, weights):
        n, d = values.shape
        mean = np.zeros(d)
        for i in range(n):
            wi = weights[i]
            for a in range(d):
                mean[a] += wi * values[i, a]
        cov = np.zeros((d, d))
        dev = np.empty(d)
        for i in range(n):
            wi = weights[i]
            for a in range(d):
                dev[a] = values[i, a] - mean[a]
            for a in range(d):
                da = wi * dev[a]
                for b in range(a, d):
                    cov[a, b] += da * dev[b]
        for a in range(d):
            for b in range(a):
                cov[a, b] = cov[b, a]
        return mean, cov

    @_jit
    def nb_elu(z):
        out = np.empty_like(z)
        flat_z = z.ravel()
        flat_o = out.ravel()
        for i in range(flat_z.size):
            v = flat_z[i]
            flat_o[i] = v if v >= 0.0 else np.expm1(v)
        return out

    @_jit
    def nb_elu_backward(z, a, upstream):
        out = np.empty_like(z)
        fz = z.ravel()
        fa = a.ravel()
        fu = upstream.ravel()
        fo = out.ravel()
        for i in range(fz.size):
            fo[i] = fu[i] if fz[i] >= 0.0 else fu[i] * (fa[i] + 1.0)
        return out

    @_jit
    def nb_env_moments(eps, weights, X, R):
        n, d = X.shape
        dr = R.shape[1]
        m = 0.0
        for i in range(n):
            m += weights[i] * eps[i]
        v = 0.0
        for i in range(n):
            dev = eps[i] - m
            v += weights[i] * dev * dev
        xbar = np.zeros(d)
        for i in range(n):
            for a in range(d):
                xbar[a] += weights[i] * X[i, a]
        gx = np.zeros(d)
        gr = np.zeros(dr)
        for i in range(n):
            we = weights[i] * eps[i]
            for a in range(d):
                gx[a] += we * (X[i, a] - xbar[a])
            for k in range(dr):
                gr[k] += we * R[i, k]
        return m, v, gx, gr

    @_jit
    def nb_env_moments_adjoint(eps, weights, X, R, dm, dv, dgx, dgr):
        n, d = X.shape
        dr = R.shape[1]
        m = 0.0
        for i in range(n):
            m += weights[i] * eps[i]
        xbar = np.zeros(d)
        for i in range(n):
            for a in range(d):
                xbar[a] += weights[i] * X[i, a]
        deps = np.empty(n)
        dR = np.empty((n, dr))
        for i in range(n):
            acc = dm + 2.0 * dv * (eps[i] - m)
            for a in range(d):
                acc += (X[i, a] - xbar[a]) * dgx[a]
            for k in range(dr):
                acc += R[i, k] * dgr[k]
            deps[i] = weights[i] * acc
            we = weights[i] * eps[i]
            for k in range(dr):
                dR[i, k] = we * dgr[k]
        return deps, dR


def jit_enabled():
    return HAVE_NUMBA and os.environ.get("EDIV_JIT", "1").strip() != "0"


class _Backend:
    def __init__(self, name, **fns):
        self.name = name
        self.__dict__.update(fns)


numpy_backend = _Backend(
    "numpy",
    weighted_mean_cov=np_weighted_mean_cov,
    elu=np_elu,
    elu_backward=np_elu_backward,
    env_moments=np_env_moments,
    env_moments_adjoint=np_env_moments_adjoint,
)

numba_backend = None
if HAVE_NUMBA:
    numba_backend = _Backend(
        "numba",
        weighted_mean_cov=nb_weighted_mean_cov,
        elu=nb_elu,
        elu_backward=nb_elu_backward,
        env_moments=nb_env_moments,
        env_moments_adjoint=nb_env_moments_adjoint,
    )

backend = numba_backend if jit_enabled() else numpy_backend
