"""Moment-constrained counterfactual regression across encouragement environments.

Training runs in two phases. First, per-environment sample weights are fitted
so that weighted covariate means and covariances agree across environments
(skipped when the environments already pass :func:`ediv.dataset.balance_test`).
Then a regression network ``h(t, x)`` is trained on

    L = L_REG + alpha * (L_E + L_X + L_R)

where the three penalties are quadratic forms of residual moments: residual
mean/variance agreement across environments (L_E), residual orthogonality to
de-meaned covariates (L_X) and to an adversarial representation ``r(x)``
(L_R). During the first ``I2`` epochs ``r`` takes one ascent step on L_R
before each descent step on ``h``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Optional

import numpy as np

from . import _kernels
from .dataset import DEFAULT_COV_THRESHOLD, DEFAULT_MEAN_THRESHOLD, balance_test
from .errors import ConfigError, ContractError, DimensionError, DivergenceError
from .neural import AdamState, Mlp, adam_step

DIVERGENCE_LIMIT = 1e12


@dataclass
class EncounterHparams:
    d_h: int = 32
    d_r: int = 5
    alpha: float = 10.0
    I1: int = 10
    I2: int = 100
    I3: int = 1000
    lr: float = 1e-3
    lr_w: float = 1e-3
    lr_r: Optional[float] = None  # adversary learning rate; None -> lr
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    reweight: str = "auto"  # "auto" gates on the balance test, "on"/"off" force it
    use_LE: bool = True
    use_LX: bool = True
    use_LR: bool = True
    r_output: str = "tanh"  # bounded adversary; "linear" leaves r(x) unbounded
    w_init: float = 1.0
    seed: int = 0
    mean_threshold: float = DEFAULT_MEAN_THRESHOLD
    cov_threshold: float = DEFAULT_COV_THRESHOLD

    def __post_init__(self):
        if self.I2 > self.I3:
            raise ConfigError(f"I2={self.I2} must not exceed I3={self.I3}")
        if self.d_r < 1 or self.d_h < 1:
            raise ConfigError("d_r and d_h must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if self.r_output not in ("tanh", "linear"):
            raise ConfigError(f"r_output must be tanh/linear, got {self.r_output!r}")
        if self.reweight not in ("auto", "on", "off"):
            raise ConfigError(f"reweight must be auto/on/off, got {self.reweight!r}")

    @classmethod
    def vanilla(cls, **kw):
        kw.update(use_LE=False, use_LX=False, use_LR=False, reweight="off")
        return cls(**kw)

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**data)

    def adam(self, lr=None):
        return dict(lr=self.lr if lr is None else lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps)


# ---------------------------------------------------------------------------
# sample weights


def sigmoid(w):
    return 0.5 * (1.0 + np.tanh(0.5 * w))


def weight_factor(w):
    """Bounded pre-normalisation factor (1 + 3 sigmoid(w)) / 2 in [1/2, 2]."""
    return 0.5 * (1.0 + 3.0 * sigmoid(w))


def normalized_weights(w):
    f = weight_factor(np.asarray(w, dtype=float))
    return f / f.sum()


@dataclass
class WeightBundle:
    w: list
    trace: list = field(default_factory=list)
    trained: bool = False

    @property
    def omega(self):
        return [normalized_weights(w) for w in self.w]

    @classmethod
    def uniform(cls, sizes, w_init=1.0):
        return cls([np.full(n, float(w_init)) for n in sizes])


def loss_omega(study, w_list, with_grad=True):
    """Covariate-imbalance loss over ordered env pairs and its gradient w.r.t. raw w."""
    K1 = len(study.envs)
    omegas = [normalized_weights(w) for w in w_list]
    stats = [_kernels.backend.weighted_mean_cov(env.X, om) for env, om in zip(study.envs, omegas)]
    means = np.stack([s[0] for s in stats])
    covs = np.stack([s[1] for s in stats])
    value = 0.0
    for j in range(K1):
        for k in range(K1):
            if j != k:
                value += np.sum((means[j] - means[k]) ** 2) + np.sum((covs[j] - covs[k]) ** 2)
    if not with_grad:
        return float(value)
    grads = []
    for j, env in enumerate(study.envs):
        # ordered pairs count each difference twice
        gm = 4.0 * (K1 * means[j] - means.sum(axis=0))
        gc = 4.0 * (K1 * covs[j] - covs.sum(axis=0))
        xc = env.X - means[j]
        d_omega = env.X @ gm + np.einsum("ia,ab,ib->i", xc, gc, xc)
        f = weight_factor(w_list[j])
        d_f = (d_omega - omegas[j] @ d_omega) / f.sum()
        s = sigmoid(w_list[j])
        grads.append(d_f * 1.5 * s * (1.0 - s))
    return float(value), grads


def fit_weights(study, hparams):
    """Train per-environment weights for ``I1`` Adam steps on the imbalance loss."""
    if len(study.envs) < 2:
        raise ContractError("reweighting needs at least two environments")
    bundle = WeightBundle.uniform([env.n for env in study.envs], hparams.w_init)
    if hparams.reweight == "off":
        return bundle
    if hparams.reweight == "auto":
        if balance_test(study, hparams.mean_threshold, hparams.cov_threshold).balanced:
            return bundle
    state = AdamState.for_params(bundle.w, **hparams.adam(hparams.lr_w))
    for _ in range(hparams.I1):
        value, grads = loss_omega(study, bundle.w)
        bundle.trace.append(value)
        adam_step(state, bundle.w, grads)
    bundle.trace.append(loss_omega(study, bundle.w, with_grad=False))
    bundle.trained = True
    return bundle


# ---------------------------------------------------------------------------
# moment losses


def _as_W(W, size):
    if W is None or (isinstance(W, str) and W == "identity"):
        return None
    W = np.asarray(W, dtype=float)
    if W.shape != (size, size):
        raise DimensionError(f"weighting matrix must be {size}x{size}, got {W.shape}")
    return W


def _quad(g, W):
    if W is None:
        return float(g @ g), 2.0 * g
    return float(g @ W @ g), (W + W.T) @ g


class MomentTerms:
    """Per-environment residual moments and the four loss values built from them.

    ``eps``, ``omegas``, ``Xs`` and ``Rs`` are per-environment lists. ``Rs`` may
    be None when L_R is not needed.
    """

    def __init__(self, eps, omegas, Xs, Rs=None, W_E=None, W_X=None, W_R=None):
        self.eps, self.omegas, self.Xs = eps, omegas, Xs
        K1 = len(eps)
        self.Rs = Rs if Rs is not None else [np.zeros((len(e), 0)) for e in eps]
        k = _kernels.backend
        parts = [k.env_moments(e, w, X, R) for e, w, X, R in zip(eps, omegas, Xs, self.Rs)]
        self.m = np.array([p[0] for p in parts])
        self.v = np.array([p[1] for p in parts])
        self.gx = [p[2] for p in parts]
        self.gr = [p[3] for p in parts]
        self.pairs = list(combinations(range(K1), 2))
        d_x = Xs[0].shape[1]
        d_r = self.Rs[0].shape[1]
        self.W_E = _as_W(W_E, 3 * len(self.pairs))
        self.W_X = _as_W(W_X, K1 * d_x)
        self.W_R = _as_W(W_R, K1 * d_r)

        self.L_REG = float(np.mean(self.v + self.m**2))
        ge = []
        for i, j in self.pairs:
            ge += [self.m[i] + self.m[j], self.m[i] - self.m[j], self.v[i] - self.v[j]]
        self.g_E = np.asarray(ge)
        self.g_X = np.concatenate(self.gx)
        self.g_R = np.concatenate(self.gr)
        self.L_E, self._dE = _quad(self.g_E, self.W_E)
        self.L_X, self._dX = _quad(self.g_X, self.W_X)
        self.L_R, self._dR = _quad(self.g_R, self.W_R)

    def values(self):
        return {"L_REG": self.L_REG, "L_E": self.L_E, "L_X": self.L_X, "L_R": self.L_R}

    def adjoint(self, c_reg=0.0, c_E=0.0, c_X=0.0, c_R=0.0):
        """Gradients of c_reg*L_REG + c_E*L_E + c_X*L_X + c_R*L_R w.r.t. residuals and R."""
        K1 = len(self.eps)
        dm = np.zeros(K1)
        dv = np.zeros(K1)
        dm += c_reg * 2.0 * self.m / K1
        dv += c_reg / K1
        if c_E:
            for p, (i, j) in enumerate(self.pairs):
                s, d, dvar = self._dE[3 * p: 3 * p + 3] * c_E
                dm[i] += s + d
                dm[j] += s - d
                dv[i] += dvar
                dv[j] -= dvar
        d_x = self.Xs[0].shape[1]
        d_r = self.Rs[0].shape[1]
        k = _kernels.backend
        deps, dRs = [], []
        for e in range(K1):
            dgx = c_X * self._dX[e * d_x:(e + 1) * d_x]
            dgr = c_R * self._dR[e * d_r:(e + 1) * d_r]
            de, dR = k.env_moments_adjoint(self.eps[e], self.omegas[e], self.Xs[e], self.Rs[e],
                                           dm[e], dv[e], np.ascontiguousarray(dgx), np.ascontiguousarray(dgr))
            deps.append(de)
            dRs.append(dR)
        return deps, dRs


# ---------------------------------------------------------------------------
# model


@dataclass
class EncounterModel:
    h: Mlp
    r: Mlp
    weights: WeightBundle
    hparams: EncounterHparams
    d_x: int
    traces: dict = field(default_factory=dict)
    balance: Optional[dict] = None

    def predict_outcome(self, t, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.d_x:
            raise DimensionError(f"expected {self.d_x} covariates, got {X.shape[1]}")
        t = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1), (X.shape[0],))
        out = self.h.forward(np.column_stack([t, X]))[:, 0]
        return float(out[0]) if single else out

    def predict_cate(self, t, X):
        return self.predict_outcome(t, X) - self.predict_outcome(np.zeros_like(np.asarray(t, dtype=float)), X)

    predict = predict_outcome

    def sidecar(self):
        return {
            "kind": "encounter",
            "d_x": self.d_x,
            "hparams": asdict(self.hparams),
            "weights": {"w": [w.tolist() for w in self.weights.w], "trained": self.weights.trained,
                        "trace": self.weights.trace},
            "traces": self.traces,
            "balance": self.balance,
        }


def _inputs(env):
    return np.column_stack([env.T, env.X])


def _stacked(study):
    H = np.vstack([_inputs(env) for env in study.envs])
    X = np.vstack([env.X for env in study.envs])
    Y = np.concatenate([env.Y for env in study.envs])
    bounds = np.cumsum([0] + [env.n for env in study.envs])
    return H, X, Y, bounds


def _split(arr, bounds):
    return [arr[bounds[k]:bounds[k + 1]] for k in range(len(bounds) - 1)]


def representation(r, X, kind="tanh"):
    """Adversary features and a cache for :func:`representation_grads`."""
    raw, cache = r.forward_cached(X)
    R = np.tanh(raw) if kind == "tanh" else raw
    return R, (cache, R, kind)


def representation_grads(r, cache, dR):
    r_cache, R, kind = cache
    if kind == "tanh":
        dR = dR * (1.0 - R * R)
    return r.backward(r_cache, dR)


def init_networks(d_x, hparams):
    seq = np.random.SeedSequence(hparams.seed)
    h_seed, r_seed = seq.spawn(2)
    h = Mlp((1 + d_x, hparams.d_h, hparams.d_h, 1), seed=h_seed)
    r = Mlp((d_x, hparams.d_h, hparams.d_h, hparams.d_r), seed=r_seed)
    return h, r


def evaluate_losses(model, study, omegas=None, W_E=None, W_X=None, W_R=None):
    """All four losses of a model on a study (weights default to the model's)."""
    if omegas is None:
        omegas = model.weights.omega
    H, X, Y, bounds = _stacked(study)
    eps = Y - model.h.forward(H)[:, 0]
    R = representation(model.r, X, model.hparams.r_output)[0]
    terms = MomentTerms(_split(eps, bounds), omegas, [e.X for e in study.envs], _split(R, bounds), W_E, W_X, W_R)
    return terms.values()


def loss_reg(model, study, omegas=None):
    return evaluate_losses(model, study, omegas)["L_REG"]


def loss_E(model, study, W_E="identity", omegas=None):
    return evaluate_losses(model, study, omegas, W_E=W_E)["L_E"]


def loss_X(model, study, W_X="identity", omegas=None):
    return evaluate_losses(model, study, omegas, W_X=W_X)["L_X"]


def loss_R(model, study, W_R="identity", omegas=None):
    return evaluate_losses(model, study, omegas, W_R=W_R)["L_R"]


def objective(model, study, omegas=None):
    vals = evaluate_losses(model, study, omegas)
    hp = model.hparams
    pen = hp.use_LE * vals["L_E"] + hp.use_LX * vals["L_X"] + hp.use_LR * vals["L_R"]
    return vals["L_REG"] + hp.alpha * pen


def objective_grads(model, study, omegas=None):
    """(L, grads w.r.t. h params, grads of L_R w.r.t. r params)."""
    if omegas is None:
        omegas = model.weights.omega
    hp = model.hparams
    H, X, Y, bounds = _stacked(study)
    out, h_cache = model.h.forward_cached(H)
    R, r_cache = representation(model.r, X, hp.r_output)
    eps = Y - out[:, 0]
    terms = MomentTerms(_split(eps, bounds), omegas, [e.X for e in study.envs], _split(R, bounds))
    a = hp.alpha
    deps, _ = terms.adjoint(1.0, a * hp.use_LE, a * hp.use_LX, a * hp.use_LR)
    g_h = model.h.backward(h_cache, -np.concatenate(deps)[:, None])
    _, dR = terms.adjoint(c_R=1.0)
    g_r = representation_grads(model.r, r_cache, np.vstack(dR))
    vals = terms.values()
    L = vals["L_REG"] + a * (hp.use_LE * vals["L_E"] + hp.use_LX * vals["L_X"] + hp.use_LR * vals["L_R"])
    return L, g_h, g_r


def train(study, hparams=None, weights=None):
    """Fit weights (unless given), then run the alternating schedule for I3 epochs."""
    hp = hparams or EncounterHparams()
    K1 = len(study.envs)
    balance = None
    if K1 >= 2:
        balance = balance_test(study, hp.mean_threshold, hp.cov_threshold).to_dict()
        if weights is None:
            weights = fit_weights(study, hp)
    elif weights is None:
        weights = WeightBundle.uniform([env.n for env in study.envs], hp.w_init)
    omegas = weights.omega
    h, r = init_networks(study.d_x, hp)

    H, X, Y, bounds = _stacked(study)
    Xs = [env.X for env in study.envs]
    h_state = AdamState.for_params(h.params, **hp.adam())
    r_state = AdamState.for_params(r.params, **hp.adam(hp.lr if hp.lr_r is None else hp.lr_r))
    a = hp.alpha
    c_E, c_X, c_R = a * hp.use_LE, a * hp.use_LX, a * hp.use_LR
    need_R = hp.use_LR
    R = None
    traces = {name: [] for name in ("L", "L_REG", "L_E", "L_X", "L_R")}

    for epoch in range(1, hp.I3 + 1):
        out, h_cache = h.forward_cached(H)
        eps = _split(Y - out[:, 0], bounds)
        if need_R and epoch <= hp.I2:
            R_full, r_cache = representation(r, X, hp.r_output)
            adv = MomentTerms(eps, omegas, Xs, _split(R_full, bounds))
            _, dR = adv.adjoint(c_R=1.0)
            adam_step(r_state, r.params, representation_grads(r, r_cache, np.vstack(dR)), maximize=True)
            R = None
        if need_R and R is None:
            R = _split(representation(r, X, hp.r_output)[0], bounds)
        terms = MomentTerms(eps, omegas, Xs, R if need_R else None)
        vals = terms.values()
        L = vals["L_REG"] + c_E * vals["L_E"] + c_X * vals["L_X"] + c_R * vals["L_R"]
        for name, val in vals.items():
            traces[name].append(val)
        traces["L"].append(L)
        if not np.isfinite(L) or L > DIVERGENCE_LIMIT:
            raise DivergenceError(f"training diverged at epoch {epoch}", epoch=epoch, trace=traces["L"][-10:])
        deps, _ = terms.adjoint(1.0, c_E, c_X, c_R)
        adam_step(h_state, h.params, h.backward(h_cache, -np.concatenate(deps)[:, None]))

    return EncounterModel(h, r, weights, hp, study.d_x, traces, balance)


def train_vanilla(study, hparams=None):
    """Plain weighted regression: every penalty off, uniform weights."""
    base = asdict(hparams) if hparams is not None else {}
    return train(study, EncounterHparams.vanilla(**base))


def predict_outcome(model, t, x):
    return model.predict_outcome(t, x)


def predict_cate(model, t, x):
    return model.predict_cate(t, x)


# ---------------------------------------------------------------------------
# persistence


def save_model(model, path):
    """Network checkpoint at ``path`` plus ``<path>.sidecar.json``."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"kind": "encounter", "h": model.h.to_dict(), "r": model.r.to_dict()}, fh)
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(model.sidecar(), fh)


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".sidecar.json")


def load_model(path):
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        ckpt = json.load(fh)
    with open(sidecar_path(path), encoding="utf-8") as fh:
        meta = json.load(fh)
    hp = EncounterHparams.from_dict(meta["hparams"])
    weights = WeightBundle([np.asarray(w) for w in meta["weights"]["w"]], meta["weights"]["trace"],
                           meta["weights"]["trained"])
    return EncounterModel(Mlp.from_dict(ckpt["h"]), Mlp.from_dict(ckpt["r"]), weights, hp, meta["d_x"],
                          meta["traces"], meta.get("balance"))
