"""Linear-setting estimators: two-environment analytical solution, IV ratio,
over-identified GMM, and the pooled OLS baseline they are compared against."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy import optimize

from .errors import ContractError, ConvergenceError, DegenerateError, DimensionError, WeakInstrumentError, WeakVariationError

RELEVANCE_FLOOR = 1e-6
GMM_MAXITER = 10_000
GMM_TOL = 1e-12


@dataclass
class LinearFit:
    psi_t: float
    b: np.ndarray
    method: str
    intercept: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def predict(self, t, X):
        if not np.all(np.isfinite(self.b)):
            raise ContractError(f"{self.method} fit has no full covariate slope vector; cannot predict outcomes")
        return self.psi_t * np.asarray(t, dtype=float) + np.asarray(X, dtype=float) @ self.b + self.intercept

    def predict_cate(self, t, X=None):
        return self.psi_t * np.asarray(t, dtype=float)

    def to_dict(self):
        diag = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.diagnostics.items()}
        return {
            "method": self.method,
            "psi_t_hat": float(self.psi_t),
            "b_hat": [None if not np.isfinite(v) else float(v) for v in self.b],
            "intercept": float(self.intercept),
            "objective": diag.pop("objective", None),
            "moment_residuals": diag.pop("moments", None),
            "diagnostics": diag,
        }

    @classmethod
    def from_dict(cls, data):
        b = np.array([np.nan if v is None else v for v in data["b_hat"]], dtype=float)
        diag = dict(data.get("diagnostics") or {})
        if data.get("objective") is not None:
            diag["objective"] = data["objective"]
        if data.get("moment_residuals") is not None:
            diag["moments"] = np.asarray(data["moment_residuals"])
        return cls(float(data["psi_t_hat"]), b, data["method"], float(data.get("intercept", 0.0)), diag)


def _cov(a, b):
    return float(np.mean((a - a.mean()) * (b - b.mean())))


def slope_stats(env, dim=0):
    """Single-covariate slopes (beta_Y|X, beta_T|X) = Cov(., X_dim) / Var(X_dim)."""
    if not 0 <= dim < env.d_x:
        raise DimensionError(f"dimension {dim} out of range for d_x={env.d_x}")
    x = env.X[:, dim]
    var = _cov(x, x)
    if var <= 0.0:
        raise DegenerateError(f"covariate {dim} is constant in environment {env.env_label!r}", dim=dim)
    return _cov(env.Y, x) / var, _cov(env.T, x) / var


def las_estimate(study, dim=0, floor=RELEVANCE_FLOOR):
    """Closed-form effect from the slope shift between e_0 and e_1 along one covariate."""
    if len(study.envs) < 2:
        raise ContractError("LAS needs two environments")
    e0, e1 = study.envs[0], study.envs[1]
    by0, bt0 = slope_stats(e0, dim)
    by1, bt1 = slope_stats(e1, dim)
    x = np.concatenate([e0.X[:, dim], e1.X[:, dim]])
    t = np.concatenate([e0.T, e1.T])
    sd_t = np.std(t)
    scale = np.std(x) / sd_t if sd_t > 0 else np.inf
    denom = bt1 - bt0
    if not np.isfinite(scale) or abs(denom) * scale < floor:
        raise WeakVariationError(
            "treatment slopes do not differ between environments",
            beta_t_e0=bt0, beta_t_e1=bt1, beta_y_e0=by0, beta_y_e1=by1,
        )
    psi = (by1 - by0) / denom
    b = np.full(study.d_x, np.nan)
    b[dim] = by0 - psi * bt0
    return LinearFit(psi, b, "LAS", diagnostics={
        "dim": dim, "beta_y": [by0, by1], "beta_t": [bt0, bt1],
    })


def iv_ratio(env, dim=0, floor=RELEVANCE_FLOOR):
    """Cov(Y, X_dim) / Cov(T, X_dim).

    Only valid when X_dim is excluded from the outcome and independent of the
    unmeasured confounders; the caller is responsible for that.
    """
    x = env.X[:, dim]
    cty, ctx = _cov(env.Y, x), _cov(env.T, x)
    sx, st = np.std(x), np.std(env.T)
    if sx == 0 or st == 0 or abs(ctx) / (sx * st) < floor:
        raise WeakInstrumentError("covariate is not relevant for the treatment", cov_tx=ctx, dim=dim)
    b = np.full(env.d_x, np.nan)
    return LinearFit(cty / ctx, b, "IV_RATIO", diagnostics={"dim": dim, "cov_yx": cty, "cov_tx": ctx})


def ols_estimate(study):
    """Pooled least squares of Y on (1, T, X); inconsistent under hidden confounding."""
    X = np.vstack([e.X for e in study.envs])
    T = np.concatenate([e.T for e in study.envs])
    Y = np.concatenate([e.Y for e in study.envs])
    A = np.column_stack([np.ones_like(T), T, X])
    coef, *_ = np.linalg.lstsq(A, Y, rcond=None)
    return LinearFit(float(coef[1]), coef[2:].copy(), "OLS", intercept=float(coef[0]))


class _GmmProblem:
    """Sufficient statistics for the linear moment vector.

    g_X stacks, per environment k and covariate a,
        Cov(Y, X_a) - psi Cov(T, X_a) - sum_b b_b Cov(X_b, X_a)
    and g_E stacks, per pair (i, j), the differences of residual means and
    residual variances. Parameters are ordered (psi, b_0..b_{d-1}).
    """

    def __init__(self, study):
        self.d = study.d_x
        self.means = []
        self.covs = []
        self.ns = []
        for env in study.envs:
            Z = np.column_stack([env.Y, env.T, env.X])
            self.means.append(Z.mean(axis=0))
            Zc = Z - Z.mean(axis=0)
            self.covs.append(Zc.T @ Zc / env.n)
            self.ns.append(env.n)
        self.pairs = list(combinations(range(len(study.envs)), 2))
        self.n_x = len(study.envs) * self.d
        self.n_e = 2 * len(self.pairs)

    def coef(self, theta):
        return np.concatenate([[1.0], -theta])

    def moments(self, theta):
        c = self.coef(theta)
        gx = np.concatenate([S[2:, :] @ c for S in self.covs])
        mean = [m @ c for m in self.means]
        var = [c @ S @ c for S in self.covs]
        ge = []
        for i, j in self.pairs:
            ge += [mean[i] - mean[j], var[i] - var[j]]
        return gx, np.asarray(ge)

    def jacobian(self, theta):
        c = self.coef(theta)
        jx = np.vstack([-S[2:, 1:] for S in self.covs])
        je = []
        for i, j in self.pairs:
            je.append(-(self.means[i][1:] - self.means[j][1:]))
            je.append(-2.0 * ((self.covs[i] @ c)[1:] - (self.covs[j] @ c)[1:]))
        return jx, np.asarray(je).reshape(self.n_e, -1)

    def objective(self, theta, Wx, We):
        gx, ge = self.moments(theta)
        jx, je = self.jacobian(theta)
        val = gx @ Wx @ gx + ge @ We @ ge
        grad = jx.T @ (Wx + Wx.T) @ gx + je.T @ (We + We.T) @ ge
        return val, grad

    def moment_variances(self, study, theta):
        """Diagonal of the moment covariance for the two-step weighting."""
        c = self.coef(theta)
        vx, means, vars_, v_of_v = [], [], [], []
        for env in study.envs:
            Z = np.column_stack([env.Y, env.T, env.X])
            eps = Z @ c
            Xc = env.X - env.X.mean(axis=0)
            dev = eps - eps.mean()
            vx.append(np.var(dev[:, None] * Xc, axis=0) / env.n)
            vars_.append(np.var(eps) / env.n)
            v_of_v.append(np.var(dev**2) / env.n)
        ve = []
        for i, j in self.pairs:
            ve += [vars_[i] + vars_[j], v_of_v[i] + v_of_v[j]]
        return np.concatenate(vx), np.asarray(ve)


def _weight(W, size):
    if W is None or (isinstance(W, str) and W == "identity"):
        return np.eye(size)
    W = np.asarray(W, dtype=float)
    if W.shape != (size, size):
        raise DimensionError(f"weighting matrix must be {size}x{size}, got {W.shape}")
    return W


def gmm_estimate(study, W_X="identity", W_E="identity", two_step=False):
    """Minimise g_X' W_X g_X + g_E' W_E g_E over (psi_t, b) by BFGS from pooled OLS."""
    if len(study.envs) < 2:
        raise ContractError("GMM needs at least two environments")
    prob = _GmmProblem(study)
    Wx = _weight(W_X, prob.n_x)
    We = _weight(W_E, prob.n_e)
    init = ols_estimate(study)
    theta0 = np.concatenate([[init.psi_t], init.b])

    theta, value = _solve(prob, theta0, Wx, We)
    if two_step:
        vx, ve = prob.moment_variances(study, theta)
        tiny = np.finfo(float).tiny
        Wx = np.diag(1.0 / np.maximum(vx, tiny))
        We = np.diag(1.0 / np.maximum(ve, tiny))
        theta, value = _solve(prob, theta, Wx, We)

    gx, ge = prob.moments(theta)
    psi, b = float(theta[0]), theta[1:].copy()
    e0 = study.envs[0]
    intercept = float(np.mean(e0.Y - psi * e0.T - e0.X @ b))
    return LinearFit(psi, b, "GMM", intercept, diagnostics={
        "objective": float(value),
        "moments": np.concatenate([gx, ge]),
        "g_X": gx,
        "g_E": ge,
        "two_step": bool(two_step),
    })


def _solve(prob, theta0, Wx, We):
    fun = lambda th: prob.objective(th, Wx, We)
    f0 = fun(theta0)[0]
    if f0 == 0.0:
        return theta0, 0.0
    res = optimize.minimize(fun, theta0, jac=True, method="BFGS",
                            options={"maxiter": GMM_MAXITER, "gtol": GMM_TOL})
    if res.success:
        return res.x, float(res.fun)
    # BFGS reports precision loss once line searches stall at float resolution;
    # accept when the remaining quasi-Newton step is negligible.
    if res.status == 2:
        step = res.hess_inv @ fun(res.x)[1]
        if res.fun <= GMM_TOL * max(1.0, f0) or np.linalg.norm(step) <= 1e-8 * (1.0 + np.linalg.norm(res.x)):
            return res.x, float(res.fun)
    raise ConvergenceError(
        f"GMM did not converge: {res.message}",
        iterations=int(res.nit), objective=float(res.fun), theta=res.x,
    )
