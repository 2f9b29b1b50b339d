import numpy as np
import pytest

from ediv import encounter, simgen
from ediv.dataset import EnvDataset, Study, uniform_weights
from ediv.encounter import EncounterHparams, EncounterModel, MomentTerms, WeightBundle
from ediv.errors import ConfigError, ContractError, DivergenceError
from ediv.neural import AdamState, Mlp, adam_step


def small_study(rng, K1=2, n=40, d=3, shift=0.0, y_scale=1.0):
    envs = []
    for k in range(K1):
        X = rng.normal(size=(n + 5 * k, d)) + shift * k
        T = np.abs(X[:, 0]) + rng.random(n + 5 * k)
        Y = y_scale * (T * (0.5 + X[:, 0]) + X.sum(1) + rng.normal(size=n + 5 * k))
        envs.append(EnvDataset(f"e{k}", X, T, Y))
    return Study(tuple(envs), d)


def make_model(study, seed=0, **kw):
    hp = EncounterHparams(**{"d_h": 6, "d_r": 3, "seed": seed, **kw})
    h, r = encounter.init_networks(study.d_x, hp)
    return EncounterModel(h, r, WeightBundle.uniform([e.n for e in study.envs]), hp, study.d_x)


# ---------------------------------------------------------------------------
# gradients


def _rel_err(g, fd):
    return abs(g - fd) / max(abs(g), abs(fd), 1e-6)


def _fd_on(net, fn, grads, rng, n_params=20, step=1e-5):
    flat = [(i, idx) for i, p in enumerate(net.params) for idx in np.ndindex(p.shape)]
    picks = rng.choice(len(flat), size=min(n_params, len(flat)), replace=False)
    worst = 0.0
    for pick in picks:
        i, idx = flat[pick]
        old = net.params[i][idx]
        net.params[i][idx] = old + step
        up = fn()
        net.params[i][idx] = old - step
        down = fn()
        net.params[i][idx] = old
        worst = max(worst, _rel_err(grads[i][idx], (up - down) / (2 * step)))
    return worst


def fd_check_objective(seed=0):
    """Worst relative gradient error over every loss family, both networks and L_omega."""
    rng = np.random.default_rng(seed)
    study = small_study(rng, K1=3, n=25)
    omegas = [encounter.normalized_weights(rng.normal(size=e.n)) for e in study.envs]
    worst = 0.0
    families = [dict(alpha=0.0), dict(alpha=1.0, use_LX=False, use_LR=False),
                dict(alpha=1.0, use_LE=False, use_LR=False), dict(alpha=1.0, use_LE=False, use_LX=False),
                dict(alpha=10.0)]
    for fam in families:
        model = make_model(study, seed=seed, **fam)
        _, g_h, g_r = encounter.objective_grads(model, study, omegas)
        worst = max(worst, _fd_on(model.h, lambda: encounter.objective(model, study, omegas), g_h, rng))
        worst = max(worst, _fd_on(model.r, lambda: encounter.loss_R(model, study, omegas=omegas), g_r, rng))
    model = make_model(study, seed=seed, r_output="linear")
    _, _, g_r = encounter.objective_grads(model, study, omegas)
    worst = max(worst, _fd_on(model.r, lambda: encounter.loss_R(model, study, omegas=omegas), g_r, rng))

    # reweighting loss w.r.t. the raw weight vectors
    w = [rng.normal(size=e.n) for e in study.envs]
    _, grads = encounter.loss_omega(study, w)
    for k in range(len(w)):
        for i in rng.choice(len(w[k]), 5, replace=False):
            old = w[k][i]
            w[k][i] = old + 1e-5
            up = encounter.loss_omega(study, w, with_grad=False)
            w[k][i] = old - 1e-5
            down = encounter.loss_omega(study, w, with_grad=False)
            w[k][i] = old
            worst = max(worst, _rel_err(grads[k][i], (up - down) / 2e-5))
    return worst


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(seed):
    assert fd_check_objective(seed) <= 1e-4


# ---------------------------------------------------------------------------
# weights


def test_zero_raw_weights_give_uniform_omega():
    assert np.allclose(encounter.weight_factor(np.zeros(7)), 1.25)
    assert np.allclose(encounter.normalized_weights(np.zeros(7)), 1 / 7, atol=1e-15)


def test_weight_factor_bounds_and_normalization(rng):
    w = rng.normal(scale=50, size=1000)
    f = encounter.weight_factor(w)
    assert f.min() >= 0.5 and f.max() <= 2.0
    om = encounter.normalized_weights(w)
    assert np.all(om >= 0) and abs(om.sum() - 1) <= 1e-9


def test_identical_environments_need_no_reweighting(rng):
    X = rng.normal(size=(30, 2))
    env = EnvDataset("e", X, rng.random(30), rng.normal(size=30))
    study = Study((env, env), 2)
    bundle = encounter.fit_weights(study, EncounterHparams())
    assert not bundle.trained
    assert encounter.loss_omega(study, bundle.w, with_grad=False) <= 1e-10


def test_single_environment_rejected(rng):
    study = small_study(rng, K1=1)
    with pytest.raises(ContractError):
        encounter.fit_weights(study, EncounterHparams())


def test_reweighting_reduces_imbalance_on_shifted_means():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        study = small_study(rng, K1=2, n=200, shift=0.2)
        hp = EncounterHparams(reweight="on")
        before = encounter.loss_omega(study, WeightBundle.uniform([e.n for e in study.envs]).w, with_grad=False)
        bundle = encounter.fit_weights(study, hp)
        assert bundle.trained and len(bundle.trace) == hp.I1 + 1
        assert bundle.trace[-1] < before


def test_reweighting_gate(rng):
    study = small_study(rng, K1=2, n=200, shift=0.5)
    assert encounter.fit_weights(study, EncounterHparams(reweight="auto")).trained
    assert not encounter.fit_weights(study, EncounterHparams(reweight="off")).trained


# ---------------------------------------------------------------------------
# losses


def test_loss_examples(rng):
    X = [rng.normal(size=(10, 2)), rng.normal(size=(12, 2))]
    w = [uniform_weights(10), uniform_weights(12)]
    ones = [np.ones(10), np.ones(12)]
    t = MomentTerms(ones, w, X, [rng.normal(size=(10, 3)), rng.normal(size=(12, 3))])
    assert t.L_E == pytest.approx(4.0, abs=1e-12)
    assert t.L_X == pytest.approx(0.0, abs=1e-24)
    zeros = MomentTerms([np.zeros(10), np.zeros(12)], w, X, [rng.normal(size=(10, 3)), rng.normal(size=(12, 3))])
    assert all(v == 0.0 for v in zeros.values().values())
    no_r = MomentTerms([rng.normal(size=10), rng.normal(size=12)], w, X, [np.zeros((10, 3)), np.zeros((12, 3))])
    assert no_r.L_R == 0.0


def test_zero_network_constant_outcome_gives_c_squared(rng):
    c = 2.5
    envs = [EnvDataset(f"e{k}", rng.normal(size=(15, 2)), rng.random(15), np.full(15, c)) for k in range(2)]
    study = Study(tuple(envs), 2)
    model = make_model(study)
    model.h = Mlp.zeros(model.h.sizes)
    assert encounter.loss_reg(model, study) == pytest.approx(c * c, abs=1e-12)


def test_custom_weighting_matrix(rng):
    eps = [rng.normal(size=10), rng.normal(size=11)]
    X = [rng.normal(size=(10, 2)), rng.normal(size=(11, 2))]
    w = [uniform_weights(10), uniform_weights(11)]
    t = MomentTerms(eps, w, X, W_X=2.0 * np.eye(4))
    assert t.L_X == pytest.approx(2.0 * MomentTerms(eps, w, X).L_X, rel=1e-12)


# ---------------------------------------------------------------------------
# training


def test_alpha_zero_single_env_is_plain_regression(rng):
    study = small_study(rng, K1=1, n=60)
    model = encounter.train(study, EncounterHparams(d_h=8, d_r=2, alpha=0.0, I2=10, I3=200, lr=1e-2,
                                                    reweight="off"))
    assert model.traces["L_REG"][-1] <= model.traces["L_REG"][0]


def test_vanilla_is_train_with_toggles_off(rng):
    study = small_study(rng, K1=2, n=50, shift=0.5)
    hp = dict(d_h=8, d_r=2, I2=10, I3=40, seed=3)
    a = encounter.train_vanilla(study, EncounterHparams(**hp))
    b = encounter.train(study, EncounterHparams(**hp, use_LE=False, use_LX=False, use_LR=False, reweight="off"))
    for p, q in zip(a.h.params, b.h.params):
        assert np.array_equal(p, q)
    assert a.traces["L"] == b.traces["L"]


def test_mult_defaults_run_full_schedule():
    study, _ = simgen.gen_nonlinear(simgen.NonlinearDesign(), 0)
    hp = EncounterHparams(d_h=32, d_r=5, alpha=10.0)
    assert (hp.I1, hp.I2, hp.I3) == (10, 100, 1000)
    model = encounter.train(study, hp)
    assert len(model.traces["L"]) == 1000
    assert model.weights.trained and len(model.weights.trace) == 11
    assert all(np.isfinite(model.traces["L"]))


def test_unconfounded_linear_slope_recovered():
    # no hidden confounding and no noise: the zero-residual fit is the global optimum.
    # Single runs stop short of it within I3 epochs, so the median over seeds is checked.
    slopes = []
    for seed in range(5):
        design = simgen.LinearDesign(overrides={"psi_u": np.zeros(2)}, n_test=2000)
        study, test = simgen.gen_linear(design, seed)
        model = encounter.train(study, EncounterHparams(d_h=16, d_r=2, lr=1e-2, seed=seed))
        slopes.append(float(np.mean(model.predict_cate(np.ones(test.n), test.X))))
    assert abs(np.median(slopes) - 0.5) <= 0.05


def test_training_is_deterministic(rng):
    study = small_study(rng, K1=2, n=40, shift=0.3)
    hp = EncounterHparams(d_h=6, d_r=2, I2=5, I3=20, seed=9)
    a, b = encounter.train(study, hp), encounter.train(study, hp)
    assert a.traces == b.traces


def test_divergence_is_reported(rng):
    study = small_study(rng, K1=2, y_scale=1e7)
    with pytest.raises(DivergenceError) as exc:
        encounter.train(study, EncounterHparams(d_h=4, d_r=2, I2=2, I3=5))
    assert exc.value.details["epoch"] == 1


def test_adversary_step_does_not_decrease_loss_R(rng):
    # linear representation: one small Adam ascent step on a quadratic in the output weights
    study = small_study(rng, K1=2, n=30)
    model = make_model(study, seed=1)
    before = encounter.loss_R(model, study)
    _, _, g_r = encounter.objective_grads(model, study)
    state = AdamState.for_params(model.r.params, lr=1e-6)
    adam_step(state, model.r.params, g_r, maximize=True)
    assert encounter.loss_R(model, study) >= before - 1e-9


def test_hparam_invariants():
    with pytest.raises(ConfigError):
        EncounterHparams(I2=20, I3=10)
    with pytest.raises(ConfigError):
        EncounterHparams(d_r=0)
    with pytest.raises(ConfigError):
        EncounterHparams(alpha=-1.0)
    with pytest.raises(ConfigError):
        EncounterHparams.from_dict({"nope": 1})


# ---------------------------------------------------------------------------
# prediction and persistence


def test_cate_at_zero_and_bias_invariance(rng):
    study = small_study(rng)
    model = make_model(study)
    X = rng.normal(size=(20, 3))
    assert np.all(model.predict_cate(np.zeros(20), X) == 0.0)
    t = rng.random(20)
    before = model.predict_cate(t, X)
    model.h.params[-1] = model.h.params[-1] + 3.7
    # equal up to the rounding of adding the constant to both outputs
    assert np.max(np.abs(model.predict_cate(t, X) - before)) <= 1e-12


def test_model_round_trip(tmp_path, rng):
    study = small_study(rng, K1=2, shift=0.4)
    model = encounter.train(study, EncounterHparams(d_h=6, d_r=2, I2=3, I3=6, reweight="on"))
    path = tmp_path / "model.json"
    encounter.save_model(model, path)
    assert encounter.sidecar_path(path).exists()
    again = encounter.load_model(path)
    X = rng.normal(size=(5, 3))
    assert np.array_equal(again.predict_outcome(np.ones(5), X), model.predict_outcome(np.ones(5), X))
    assert again.hparams == model.hparams
    assert again.traces == model.traces
