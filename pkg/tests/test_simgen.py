import numpy as np
import pytest

from ediv import simgen
from ediv.dataset import save_study
from ediv.errors import ConfigError, ContractError, DimensionError


def small(family="mult", **kw):
    kw.setdefault("n_test", 500)
    return simgen.NonlinearDesign(family=family, **kw)


def test_linear_manifest_and_sizes():
    study, test = simgen.gen_linear(simgen.LinearDesign(), 0)
    assert study.manifest["psi_t"] == 0.5
    assert [e.n for e in study.envs] == [2000, 600] and test.n == 20000
    assert np.all(test.truth.cate_true[test.truth.do_t == 0] == 0)
    assert np.allclose(test.truth.cate_true, 0.5 * test.truth.do_t, atol=0)


def test_linear_contract():
    with pytest.raises(ContractError):
        simgen.gen_linear(simgen.LinearDesign(rho=0.0), 0)


def test_unconfounded_pooled_regression():
    design = simgen.LinearDesign(n0=5000, overrides={"psi_u": np.zeros(2)}, n_test=10)
    study, _ = simgen.gen_linear(design, 3)
    T = np.concatenate([e.T for e in study.envs])
    X = np.vstack([e.X for e in study.envs])
    Y = np.concatenate([e.Y for e in study.envs])
    A = np.column_stack([T, X, np.ones_like(T)])
    assert abs(np.linalg.lstsq(A, Y, rcond=None)[0][0] - 0.5) <= 1e-2


def test_linear_y_do_formula():
    study, test = simgen.gen_linear(simgen.LinearDesign(n_test=200), 5)
    c = study.manifest["coefficients"]
    expect = 0.5 * test.truth.do_t + test.X @ np.array(c["psi_x"]) + test.U @ np.array(c["psi_u"])
    assert np.array_equal(test.truth.y_do, expect)


def test_mult_defaults():
    d = simgen.NonlinearDesign()
    assert (d.K, d.n0, d.nk, d.d_x, d.d_u) == (1, 2000, 600, 5, 3)


@pytest.mark.parametrize("family", simgen.FAMILIES)
def test_nonlinear_invariants(family):
    study, test = simgen.gen_nonlinear(small(family), 2)
    for env in study.envs:
        assert np.all(env.T >= 0)
    c = study.manifest["coefficients"]
    psi = np.array(c["psi"])
    y0 = simgen.nonlinear_outcome(family, np.zeros(test.n), test.X, test.U, psi)
    assert np.array_equal(test.truth.y_do, simgen.nonlinear_outcome(family, test.truth.do_t, test.X, test.U, psi))
    assert np.allclose(test.truth.cate_true, test.truth.y_do - y0, atol=1e-12)
    assert np.array_equal(test.truth.cate_true, test.truth.do_t * simgen.effect_modifier(family, test.X))


def test_unknown_family():
    with pytest.raises(ConfigError):
        simgen.gen_nonlinear(small("cube"), 0)


def test_zero_coefficient_reduction():
    D = 8
    ov = {"psi": np.zeros(D)}
    study, test = simgen.gen_nonlinear(small(overrides=ov), 1)
    for env in study.envs:
        assert np.allclose(env.Y, env.T * (0.5 + env.X[:, 0]), atol=1e-12)
    assert np.array_equal(test.truth.cate_true, test.truth.do_t * (0.5 + test.X[:, 0]))


def test_treatment_formula_reevaluated():
    study, _ = simgen.gen_nonlinear(small(n0=100000, nk=10), 0)
    env = study.envs[0]
    C = np.hstack([env.X, env.U])
    phi = np.array(study.manifest["coefficients"]["phi"][0])
    T = np.array([abs(sum(phi[i] * C[r, i] * C[r, i + 1] for i in range(7)) + C[r] @ phi) for r in range(2000)])
    assert np.max(np.abs(T - env.T[:2000])) <= 1e-12
    assert abs(np.mean(simgen.nonlinear_treatment(C, phi)) - np.mean(env.T)) <= 1e-12


def test_covariance_structure():
    study, _ = simgen.gen_linear(simgen.LinearDesign(n0=100000, n_test=10), 0)
    X = study.envs[0].X
    assert np.max(np.abs(np.cov(X.T) - simgen.equicorrelated(5, 1.0, 0.3))) <= 0.02


def test_mult_variants():
    assert simgen.MULT_VARIANTS[3] == (4, 150) and simgen.MULT_VARIANTS[5] == (4, 600)
    s3 = simgen.gen_mult_variants(3, 0, n_test=10)
    assert s3.K == 4 and sum(e.n for e in s3.envs[1:]) == 600
    s5 = simgen.gen_mult_variants(5, 0, n_test=10)
    assert sum(e.n for e in s5.envs[1:]) == 2400
    with pytest.raises(ConfigError):
        simgen.gen_mult_variants(6, 0)


def test_determinism_byte_identical(tmp_path):
    a = simgen.gen_mult_variants(1, 7, n_test=10)
    b = simgen.gen_mult_variants(1, 7, n_test=10)
    save_study(a, tmp_path / "a")
    save_study(b, tmp_path / "b")
    for f in ("env_0.csv", "env_1.csv", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    c = simgen.gen_mult_variants(1, 8, n_test=10)
    assert not np.array_equal(a.envs[0].X, c.envs[0].X)


def test_box_muller_moments():
    z = simgen.normals(simgen.stream(0, "linear", 0, "covariates"), 200001)
    assert z.shape == (200001,) and abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01


def semisynthetic_inputs(n_control, n_treated, d=6, seed=0):
    rng = np.random.default_rng(seed)
    n = n_control + n_treated
    cov = np.column_stack([rng.normal(size=(n, d)), rng.integers(0, 2, n)])
    groups = np.r_[np.zeros(n_control), np.ones(n_treated)]
    return cov, rng.normal(size=n), rng.normal(size=n), groups


def test_semisynthetic_ihdp_sizes():
    study, test, val = simgen.gen_semisynthetic(*semisynthetic_inputs(608, 139), d_x=5)
    assert [e.n for e in study.envs] == [458, 139] and val.n == 75 and test.n == 7500
    assert np.all(study.envs[0].T >= 0)


def test_semisynthetic_acic_sizes():
    study, test, _ = simgen.gen_semisynthetic(*semisynthetic_inputs(2984 + 75 + 480, 858, d=13), d_x=12, scale=4,
                                              n_pretest=480, reps=20)
    assert [e.n for e in study.envs] == [2984, 858] and test.n == 9600


def test_semisynthetic_zero_reduction():
    cov, _, _, groups = semisynthetic_inputs(300, 50)
    z = np.zeros(len(groups))
    study, test, _ = simgen.gen_semisynthetic(cov, z, z, groups, overrides={"psi": np.zeros(5)})
    for env in study.envs:
        assert np.allclose(env.Y, env.T * (0.5 + env.X[:, 0]), atol=1e-12)


def test_semisynthetic_misaligned():
    cov, m0, m1, groups = semisynthetic_inputs(300, 50)
    with pytest.raises(DimensionError):
        simgen.gen_semisynthetic(cov, m0[:-1], m1, groups)
