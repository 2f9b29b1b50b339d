"""Seeded generators for the linear, Mult/Poly/Abs/Sin and semi-synthetic designs.

Randomness comes from PCG64 streams derived with ``SeedSequence`` spawn keys
``(design_id, env, purpose)`` so that coefficients, covariates, noise and test
draws are reproducible independently of each other. ``design_id`` is the CRC32
of the design name. Normals are produced from uniforms with the Box-Muller
transform rather than numpy's ziggurat, so the pipeline can be replicated from
any PCG64 implementation.

Index convention: covariates are 0-indexed. The unmeasured confounder
``U_i`` (i = 0..d_u-1) is centred on ``0.3 * (X_p + X_q)`` with
``p = 2i mod d_x`` and ``q = (2i + 1) mod d_x``.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .dataset import EnvDataset, Study, TruthBundle
from .errors import ConfigError, ContractError, DimensionError

SHARED = 65535  # env slot for coefficients shared by every environment
TEST_ENV = 65534
PURPOSES = {"coef": 0, "covariates": 1, "confounders": 2, "test": 3, "shuffle": 4}
FAMILIES = ("mult", "poly", "abs", "sin")
MULT_VARIANTS = {1: (1, 600), 2: (2, 300), 3: (4, 150), 4: (2, 600), 5: (4, 600)}
INDEX_CONVENTION = "0-based; U_i centred on 0.3*(X[2i mod d_x] + X[(2i+1) mod d_x])"


def design_id(name):
    return zlib.crc32(name.encode("utf-8"))


def stream(seed, design, env, purpose):
    ss = np.random.SeedSequence(int(seed), spawn_key=(design_id(design), int(env), PURPOSES[purpose]))
    return np.random.Generator(np.random.PCG64(ss))


def normals(rng, size):
    """Standard normals by Box-Muller over the generator's uniforms."""
    shape = (size,) if np.isscalar(size) else tuple(size)
    count = int(np.prod(shape))
    half = (count + 1) // 2
    u1 = 1.0 - rng.random(half)  # (0, 1]
    u2 = rng.random(half)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
    return z[:count].reshape(shape)


def mvn(rng, mean, cov, n):
    L = np.linalg.cholesky(cov)
    return normals(rng, (n, len(mean))) @ L.T + mean


def equicorrelated(d, diag, offdiag=0.3):
    cov = np.full((d, d), offdiag)
    np.fill_diagonal(cov, diag)
    return cov


def _lists(obj):
    if isinstance(obj, dict):
        return {k: _lists(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_lists(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _override(overrides, key, default):
    if overrides and key in overrides:
        val = np.asarray(overrides[key], dtype=float)
        if val.shape != np.shape(default):
            raise DimensionError(f"override {key!r} has shape {val.shape}, expected {np.shape(default)}")
        return val
    return default


# ---------------------------------------------------------------------------
# linear design


@dataclass
class LinearDesign:
    n0: int = 2000
    rho: float = 0.3
    d_x: int = 5
    d_u: int = 2
    psi_t: float = 0.5
    K: int = 1
    cov_offdiag: float = 0.3
    n_test: int = 20000
    # optional fixed coefficients: phi_x / phi_u as (K+1, d) arrays, psi_x, psi_u
    overrides: dict = field(default_factory=dict)

    @property
    def n1(self):
        return int(round(self.n0 * self.rho))


def linear_coefficients(design, seed):
    K1 = design.K + 1
    phi_x = np.empty((K1, design.d_x))
    phi_u = np.empty((K1, design.d_u))
    for k in range(K1):
        rng = stream(seed, "linear", k, "coef")
        phi_x[k] = rng.random(design.d_x)
        phi_u[k] = rng.random(design.d_u)
    rng = stream(seed, "linear", SHARED, "coef")
    psi_x = rng.random(design.d_x)
    psi_u = rng.random(design.d_u)
    ov = design.overrides
    return {
        "phi_x": _override(ov, "phi_x", phi_x),
        "phi_u": _override(ov, "phi_u", phi_u),
        "psi_x": _override(ov, "psi_x", psi_x),
        "psi_u": _override(ov, "psi_u", psi_u),
        "psi_t": float(design.psi_t),
    }


def gen_linear(design, seed):
    """Linear study (e_0 plus K encouragements of size n0*rho) and its test set."""
    if design.n0 < 2 or not 0.0 < design.rho <= 1.0:
        raise ContractError("linear design needs n0 >= 2 and 0 < rho <= 1")
    coef = linear_coefficients(design, seed)
    cov_x = equicorrelated(design.d_x, 1.0, design.cov_offdiag)
    cov_u = equicorrelated(design.d_u, 1.0, design.cov_offdiag)

    def draw(rng_x, rng_u, n):
        X = mvn(rng_x, np.zeros(design.d_x), cov_x, n)
        U = mvn(rng_u, np.zeros(design.d_u), cov_u, n)
        return X, U

    def outcome(T, X, U):
        return coef["psi_t"] * T + X @ coef["psi_x"] + U @ coef["psi_u"]

    envs = []
    for k in range(design.K + 1):
        n = design.n0 if k == 0 else design.n1
        X, U = draw(stream(seed, "linear", k, "covariates"), stream(seed, "linear", k, "confounders"), n)
        T = X @ coef["phi_x"][k] + U @ coef["phi_u"][k]
        envs.append(EnvDataset(f"e{k}", X, T, outcome(T, X, U), U))

    X, U = draw(stream(seed, "linear", TEST_ENV, "covariates"), stream(seed, "linear", TEST_ENV, "confounders"), design.n_test)
    do_t = stream(seed, "linear", TEST_ENV, "test").random(design.n_test)
    T = X @ coef["phi_x"][0] + U @ coef["phi_u"][0]
    y_do = outcome(do_t, X, U)
    truth = TruthBundle(do_t, y_do, coef["psi_t"] * do_t)
    test = EnvDataset("test", X, T, outcome(T, X, U), U, truth)

    params = asdict(design)
    params.pop("overrides")
    manifest = {
        "design": "linear",
        "seed": int(seed),
        "psi_t": coef["psi_t"],
        "design_params": params,
        "coefficients": _lists(coef),
        "index_convention": INDEX_CONVENTION,
    }
    return Study(tuple(envs), design.d_x, design.d_u, manifest), test


# ---------------------------------------------------------------------------
# nonlinear designs


@dataclass
class NonlinearDesign:
    family: str = "mult"
    K: int = 1
    n0: int = 2000
    nk: int = 600
    d_x: int = 5
    d_u: int = 3
    n_test: int = 20000
    cov_offdiag: float = 0.3
    # optional fixed coefficients: phi (K+1, d_x+d_u), psi (d_x+d_u,), mu (K+1, d_x), sigma (K+1,)
    overrides: dict = field(default_factory=dict)


def nonlinear_coefficients(design, seed):
    name = design.family
    D = design.d_x + design.d_u
    K1 = design.K + 1
    phi = np.empty((K1, D))
    mu = np.empty((K1, design.d_x))
    sigma = np.empty(K1)
    for k in range(K1):
        rng = stream(seed, name, k, "coef")
        mu[k] = rng.uniform(-0.2, 0.2, design.d_x)
        sigma[k] = rng.uniform(0.7, 1.3)
        phi[k] = rng.random(D)
    psi = stream(seed, name, SHARED, "coef").random(D)
    ov = design.overrides
    return {
        "phi": _override(ov, "phi", phi),
        "psi": _override(ov, "psi", psi),
        "mu": _override(ov, "mu", mu),
        "sigma": _override(ov, "sigma", sigma),
    }


def confounder_pairs(d_x, d_u):
    return [((2 * i) % d_x, (2 * i + 1) % d_x) for i in range(d_u)]


def nonlinear_treatment(C, phi):
    return np.abs(np.sum(phi[:-1] * C[:, :-1] * C[:, 1:], axis=1) + C @ phi)


def effect_modifier(family, X):
    """tau(x) such that the true CATE is t * tau(x)."""
    tau = 0.5 + X[:, 0]
    if family == "poly":
        tau = tau + X[:, 1] ** 2
    elif family == "abs":
        tau = tau + np.abs(X[:, 1])
    elif family == "sin":
        tau = tau + np.sin(X[:, 1])
    return tau


def nonlinear_outcome(family, T, X, U, psi):
    d_x, d_u = X.shape[1], U.shape[1]
    C = np.hstack([X, U])
    y = T * effect_modifier(family, X)
    y = y + np.sum(psi[: d_x - 1] * X[:, :-1] * X[:, 1:], axis=1)
    if d_u > 1:
        y = y + np.sum(psi[: d_u - 1] * U[:, :-1] * U[:, 1:], axis=1)
    y = y + C @ psi
    if family == "poly":
        y = y + (C**2) @ psi / d_x
    elif family == "abs":
        y = y + np.abs(C) @ psi / d_x
    elif family == "sin":
        y = y + np.sin(C) @ psi / d_x
    return y


def gen_nonlinear(design, seed):
    family = design.family.lower()
    if family not in FAMILIES:
        raise ConfigError(f"unknown nonlinear family {design.family!r}; expected one of {FAMILIES}")
    if design.K < 1:
        raise ContractError("nonlinear designs need K >= 1")
    coef = nonlinear_coefficients(design, seed)
    pairs = confounder_pairs(design.d_x, design.d_u)

    def draw(k_stream, k_dist, n):
        cov = equicorrelated(design.d_x, coef["sigma"][k_dist], design.cov_offdiag)
        X = mvn(stream(seed, family, k_stream, "covariates"), coef["mu"][k_dist], cov, n)
        centre = np.stack([0.3 * (X[:, p] + X[:, q]) for p, q in pairs], axis=1)
        U = centre + normals(stream(seed, family, k_stream, "confounders"), (n, design.d_u))
        return X, U

    envs = []
    for k in range(design.K + 1):
        n = design.n0 if k == 0 else design.nk
        X, U = draw(k, k, n)
        T = nonlinear_treatment(np.hstack([X, U]), coef["phi"][k])
        envs.append(EnvDataset(f"e{k}", X, T, nonlinear_outcome(family, T, X, U, coef["psi"]), U))

    # test units follow the observational (e_0) covariate distribution
    X, U = draw(TEST_ENV, 0, design.n_test)
    do_t = stream(seed, family, TEST_ENV, "test").random(design.n_test)
    T = nonlinear_treatment(np.hstack([X, U]), coef["phi"][0])
    y_do = nonlinear_outcome(family, do_t, X, U, coef["psi"])
    truth = TruthBundle(do_t, y_do, do_t * effect_modifier(family, X))
    test = EnvDataset("test", X, T, nonlinear_outcome(family, T, X, U, coef["psi"]), U, truth)

    params = asdict(design)
    params.pop("overrides")
    params["family"] = family
    manifest = {
        "design": family,
        "seed": int(seed),
        "design_params": params,
        "coefficients": _lists(coef),
        "index_convention": INDEX_CONVENTION,
    }
    return Study(tuple(envs), design.d_x, design.d_u, manifest), test


def mult_variant_design(variant, **kwargs):
    if variant not in MULT_VARIANTS:
        raise ConfigError(f"Mult variant must be one of 1..5, got {variant!r}")
    K, nk = MULT_VARIANTS[variant]
    return NonlinearDesign(family="mult", K=K, nk=nk, n0=2000, **kwargs)


def gen_mult_variants(variant, seed, with_test=False, **kwargs):
    study, test = gen_nonlinear(mult_variant_design(variant, **kwargs), seed)
    study.manifest["variant"] = f"mult{variant}"
    return (study, test) if with_test else study


# ---------------------------------------------------------------------------
# semi-synthetic


def continuous_columns(covariates):
    return [j for j in range(covariates.shape[1]) if np.unique(covariates[:, j]).size > 2]


def gen_semisynthetic(covariates, m0, m1, groups, d_x=5, scale=1.0, n_val=75, n_pretest=75, reps=100,
                      seed=0, overrides=None):
    """Encouragement study built on real covariates with two outcome surfaces.

    ``groups`` marks each row 0 (large control group, becomes e_0) or 1
    (becomes e_1). Validation and pre-test rows are drawn from the control
    group; the pre-test rows are replicated ``reps`` times with fresh do(t).
    Returns ``(study, test, validation)``.
    """
    covariates = np.asarray(covariates, dtype=float)
    m0 = np.asarray(m0, dtype=float).reshape(-1)
    m1 = np.asarray(m1, dtype=float).reshape(-1)
    groups = np.asarray(groups).reshape(-1).astype(int)
    n = covariates.shape[0]
    if m0.shape[0] != n or m1.shape[0] != n or groups.shape[0] != n:
        raise DimensionError("covariates, m0, m1 and groups must be row-aligned")
    cont = continuous_columns(covariates)
    if len(cont) < d_x:
        raise DimensionError(f"need {d_x} continuous covariate columns, found {len(cont)}")
    X_all = covariates[:, cont[:d_x]]
    name = "semisynthetic"

    phi = np.stack([stream(seed, name, k, "coef").random(d_x) for k in range(2)])
    psi = stream(seed, name, SHARED, "coef").random(d_x)
    phi = _override(overrides, "phi", phi)
    psi = _override(overrides, "psi", psi)

    def treatment(X, m0_, k):
        return np.abs(np.sum(phi[k][:-1] * X[:, :-1] * X[:, 1:], axis=1) + X @ phi[k] + scale * m0_)

    def outcome(T, X, m1_):
        return T * (0.5 + X[:, 0]) + np.sum(psi[:-1] * X[:, :-1] * X[:, 1:], axis=1) + X @ psi + scale * m1_

    def build(label, idx, k):
        X = X_all[idx]
        T = treatment(X, m0[idx], k)
        return EnvDataset(label, X, T, outcome(T, X, m1[idx]), np.stack([m0[idx], m1[idx]], axis=1))

    control = np.flatnonzero(groups == 0)
    treated = np.flatnonzero(groups == 1)
    if control.size <= n_val + n_pretest or treated.size < 1:
        raise ContractError("control group too small for the requested validation/pre-test sizes")
    control = stream(seed, name, 0, "shuffle").permutation(control)
    val_idx = np.sort(control[:n_val])
    pre_idx = np.sort(control[n_val:n_val + n_pretest])
    e0_idx = np.sort(control[n_val + n_pretest:])

    study_envs = (build("e0", e0_idx, 0), build("e1", treated, 1))
    validation = build("validation", val_idx, 0)

    rep_idx = np.tile(pre_idx, reps)
    base = build("test", rep_idx, 0)
    do_t = stream(seed, name, TEST_ENV, "test").random(rep_idx.size)
    y_do = outcome(do_t, base.X, m1[rep_idx])
    test = EnvDataset("test", base.X, base.T, base.Y, base.U,
                      TruthBundle(do_t, y_do, do_t * (0.5 + base.X[:, 0])))
    manifest = {
        "design": name,
        "seed": int(seed),
        "design_params": {"d_x": d_x, "scale": float(scale), "n_val": n_val, "n_pretest": n_pretest,
                          "reps": reps, "covariate_columns": cont[:d_x]},
        "coefficients": _lists({"phi": phi, "psi": psi}),
        "index_convention": INDEX_CONVENTION,
    }
    return Study(study_envs, d_x, 2, manifest), test, validation
