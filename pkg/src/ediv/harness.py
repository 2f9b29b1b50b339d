"""Metrics, replication runs, the two-phase hyperparameter sweep and CSV tables.

A run regenerates its data for every replication from ``base_seed + r``,
holds out part of ``e_0`` for validation, fits one estimator and scores it on
that replication's interventional test set. Reports serialize deterministically;
wall-clock timings live beside the report, not in it.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from itertools import product
from typing import Callable, Optional

import numpy as np

from . import encounter, linear, simgen
from .dataset import EnvDataset, Study, split
from .errors import ConfigError, ContractError, EdivError

ESTIMATORS = ("encounter", "vanilla", "gmm", "las", "iv", "ols")
LINEAR_ESTIMATORS = ("gmm", "las", "iv", "ols")
NONLINEAR_DESIGNS = simgen.FAMILIES + tuple(f"mult{v}" for v in simgen.MULT_VARIANTS)
DESIGNS = ("linear",) + NONLINEAR_DESIGNS
STD_CONVENTION = "sample (n-1 denominator); 0 for a single replication"

# per-family optimum reported for the nonlinear simulations: (d_h, d_r, alpha)
TABLE5 = {
    "mult": (32, 5, 10.0),
    "poly": (128, 2, 8.0),
    "abs": (128, 5, 10.0),
    "sin": (32, 12, 8.0),
}


def table5_hparams(family, **overrides):
    fam = family.lower().rstrip("12345") if family.lower().startswith("mult") else family.lower()
    if fam not in TABLE5:
        raise ConfigError(f"no reference hyperparameters for {family!r}")
    d_h, d_r, alpha = TABLE5[fam]
    kw = dict(d_h=d_h, d_r=d_r, alpha=alpha)
    kw.update(overrides)
    return encounter.EncounterHparams(**kw)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricSet:
    ce: Optional[float] = None
    cfr: Optional[float] = None
    pehe: Optional[float] = None

    def __post_init__(self):
        for name in ("ce", "cfr", "pehe"):
            val = getattr(self, name)
            if val is not None and not val >= 0.0:
                raise ContractError(f"metric {name} must be nonnegative, got {val}")

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


def metric_ce(fit, psi_t):
    psi_hat = fit.psi_t if hasattr(fit, "psi_t") else float(fit)
    return abs(float(psi_hat) - float(psi_t))


def _require_truth(test):
    if getattr(test, "truth", None) is None:
        raise ContractError("test set has no do_t / y_do / cate_true columns")
    return test.truth


def _outcome(model, t, X):
    fn = getattr(model, "predict_outcome", None) or model.predict
    return np.asarray(fn(t, X), dtype=float)


def metric_cfr(model, test):
    truth = _require_truth(test)
    err = _outcome(model, truth.do_t, test.X) - truth.y_do
    return float(np.mean(err**2))


def metric_pehe(model, test):
    truth = _require_truth(test)
    cate = np.asarray(model.predict_cate(truth.do_t, test.X), dtype=float)
    return float(np.sqrt(np.mean((cate - truth.cate_true) ** 2)))


def validation_error(model, val, weights=None):
    """(Weighted) regression MSE on held-out observational rows."""
    err = (_outcome(model, val.T, val.X) - val.Y) ** 2
    if weights is None:
        return float(np.mean(err))
    return float(np.sum(np.asarray(weights) * err))


# ---------------------------------------------------------------------------
# designs and fitting


def make_data(design, seed, params=None):
    """Generate ``(study, test)`` for a named synthetic design."""
    params = dict(params or {})
    name = design.lower()
    try:
        if name == "linear":
            return simgen.gen_linear(simgen.LinearDesign(**params), seed)
        if name in simgen.FAMILIES:
            return simgen.gen_nonlinear(simgen.NonlinearDesign(family=name, **params), seed)
        if name.startswith("mult") and name[4:].isdigit():
            return simgen.gen_mult_variants(int(name[4:]), seed, with_test=True, **params)
    except TypeError as exc:
        raise ConfigError(f"bad design parameters for {design!r}: {exc}") from None
    raise ConfigError(f"unknown design {design!r}; expected one of {DESIGNS}")


def fit_estimator(estimator, study, hparams=None, options=None):
    """Fit one of ESTIMATORS; returns an object with predict/predict_cate."""
    options = dict(options or {})
    if estimator == "gmm":
        return linear.gmm_estimate(study, two_step=bool(options.get("two_step", False)))
    if estimator == "las":
        return linear.las_estimate(study, dim=int(options.get("dim", 0)))
    if estimator == "iv":
        return linear.iv_ratio(study.envs[0], dim=int(options.get("dim", 0)))
    if estimator == "ols":
        return linear.ols_estimate(study)
    if estimator in ("encounter", "vanilla"):
        if not isinstance(hparams, encounter.EncounterHparams):
            hparams = encounter.EncounterHparams.from_dict(dict(hparams or {}))
        if estimator == "vanilla":
            return encounter.train_vanilla(study, hparams)
        return encounter.train(study, hparams)
    raise ConfigError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")


def evaluate(model, test, psi_t=None):
    ce = None
    if psi_t is not None and hasattr(model, "psi_t"):
        ce = metric_ce(model, psi_t)
    cfr = pehe = None
    if test is not None and test.truth is not None and _can_predict(model):
        cfr = metric_cfr(model, test)
        pehe = metric_pehe(model, test)
    return MetricSet(ce, cfr, pehe)


def _can_predict(model):
    b = getattr(model, "b", None)
    return b is None or bool(np.all(np.isfinite(b)))


# ---------------------------------------------------------------------------
# replication runs


@dataclass
class ExperimentConfig:
    design: str = "mult"
    estimator: str = "encounter"
    replications: int = 10
    base_seed: int = 0
    design_params: dict = field(default_factory=dict)
    hparams: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)  # two_step / dim for linear estimators
    val_fraction: float = 0.3
    use_table5: bool = False  # start EnCounteR hparams from the per-family reference point
    skip_failed: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}; expected one of {ESTIMATORS}")
        if self.design.lower() not in DESIGNS:
            raise ConfigError(f"unknown design {self.design!r}; expected one of {DESIGNS}")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**data)

    def encounter_hparams(self, seed):
        hp = dict(self.hparams)
        hp.setdefault("seed", seed)
        if self.use_table5:
            return table5_hparams(self.design, **hp)
        return encounter.EncounterHparams.from_dict(hp)


@dataclass
class Report:
    config: dict
    rows: list  # one dict per replication: seed, metrics or error
    aggregate: dict
    timings: list = field(default_factory=list)  # seconds per replication; not serialized

    def to_dict(self):
        return {
            "config": self.config,
            "std_convention": STD_CONVENTION,
            "replications": self.rows,
            "aggregate": self.aggregate,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def metric(self, name):
        return np.array([row["metrics"][name] for row in self.rows if "metrics" in row and name in row["metrics"]])


def aggregate(rows):
    out = {}
    names = sorted({k for row in rows if "metrics" in row for k in row["metrics"]})
    for name in names:
        vals = np.array([row["metrics"][name] for row in rows if "metrics" in row and name in row["metrics"]])
        std = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
        out[name] = {"mean": float(np.mean(vals)), "std": std, "n": int(vals.size)}
    return out


def _prepare(cfg, seed):
    study, test = make_data(cfg.design, seed, cfg.design_params)
    val = None
    if cfg.val_fraction > 0:
        train_e0, val = split(study.envs[0], cfg.val_fraction, seed)
        study = study.with_env(0, train_e0)
    return study, test, val


def run_replication(cfg, r):
    seed = cfg.base_seed + r
    study, test, val = _prepare(cfg, seed)
    hp = cfg.encounter_hparams(seed) if cfg.estimator in ("encounter", "vanilla") else None
    model = fit_estimator(cfg.estimator, study, hp, cfg.options)
    psi_t = study.manifest.get("psi_t")
    metrics = evaluate(model, test, psi_t)
    row = {"replication": r, "seed": seed, "metrics": metrics.to_dict()}
    if val is not None and _can_predict(model):
        row["validation_mse"] = validation_error(model, val)
    return row


def _run_one(args):
    cfg, r = args
    t0 = time.perf_counter()
    try:
        row = run_replication(cfg, r)
    except EdivError as exc:
        if not cfg.skip_failed:
            raise
        row = {"replication": r, "seed": cfg.base_seed + r, "error": exc.to_dict()}
    return row, time.perf_counter() - t0


def run_experiment(config):
    """Run every replication of ``config`` (dict or ExperimentConfig) and aggregate."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    jobs = [(cfg, r) for r in range(cfg.replications)]
    if cfg.workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(job) for job in jobs]
    rows = [row for row, _ in results]
    return Report(asdict(cfg), rows, aggregate(rows), [dt for _, dt in results])


# ---------------------------------------------------------------------------
# sweep


@dataclass
class SweepGrid:
    d_h: tuple = (16, 32, 64, 128, 256)
    alpha: tuple = (1, 2, 5, 8, 10, 12, 15, 20)
    d_r: tuple = (1, 2, 5, 8, 10, 12, 15, 20)

    def __post_init__(self):
        for name in ("d_h", "alpha", "d_r"):
            vals = tuple(getattr(self, name))
            if not vals:
                raise ConfigError(f"sweep candidate set {name} is empty")
            object.__setattr__(self, name, vals)


@dataclass
class SweepResult:
    best: dict
    phase1: list  # rows {d_h, alpha, d_r, error}
    phase2: list

    def to_dict(self):
        return {"best": self.best, "phase1": self.phase1, "phase2": self.phase2}


def sweep(evaluate_point: Callable, grid: SweepGrid, d_x: int):
    """Two-phase search: (d_h, alpha) at d_r = d_x, then d_r at the winners.

    ``evaluate_point(d_h, alpha, d_r)`` returns a validation error. Ties go
    to the earliest grid point.
    """
    phase1 = []
    for d_h, alpha in product(grid.d_h, grid.alpha):
        phase1.append({"d_h": d_h, "alpha": alpha, "d_r": d_x, "error": float(evaluate_point(d_h, alpha, d_x))})
    win = min(phase1, key=lambda row: row["error"])
    phase2 = []
    for d_r in grid.d_r:
        if d_r == d_x:
            err = win["error"]
        else:
            err = float(evaluate_point(win["d_h"], win["alpha"], d_r))
        phase2.append({"d_h": win["d_h"], "alpha": win["alpha"], "d_r": d_r, "error": err})
    best = min(phase2, key=lambda row: row["error"])
    return SweepResult(dict(best), phase1, phase2)


@dataclass
class SweepConfig:
    design: str = "mult"
    seed: int = 0
    design_params: dict = field(default_factory=dict)
    hparams: dict = field(default_factory=dict)
    val_fraction: float = 0.3
    grid: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown sweep config keys: {sorted(unknown)}")
        return cls(**data)


def run_sweep(config):
    """Sweep on one generated study, scoring validation regression MSE on e_0's holdout."""
    cfg = config if isinstance(config, SweepConfig) else SweepConfig.from_dict(config)
    if not 0.0 < cfg.val_fraction < 1.0:
        raise ConfigError("sweeps need a validation split (0 < val_fraction < 1)")
    study, _ = make_data(cfg.design, cfg.seed, cfg.design_params)
    train_e0, val = split(study.envs[0], cfg.val_fraction, cfg.seed)
    study = study.with_env(0, train_e0)

    def evaluate_point(d_h, alpha, d_r):
        hp = dict(cfg.hparams)
        hp.update(d_h=int(d_h), alpha=float(alpha), d_r=int(d_r))
        hp.setdefault("seed", cfg.seed)
        model = encounter.train(study, encounter.EncounterHparams.from_dict(hp))
        return validation_error(model, val)

    result = sweep(evaluate_point, SweepGrid(**cfg.grid), study.d_x)
    fam = cfg.design.lower()
    note = None
    if fam in TABLE5 or fam.startswith("mult"):
        ref = TABLE5["mult" if fam.startswith("mult") else fam]
        note = {"reference": {"d_h": ref[0], "d_r": ref[1], "alpha": ref[2]},
                "matches_reference": (result.best["d_h"], result.best["d_r"], float(result.best["alpha"]))
                == (ref[0], ref[1], ref[2])}
    out = result.to_dict()
    out["config"] = asdict(cfg)
    out["reference_note"] = note
    return out


# ---------------------------------------------------------------------------
# plot-ready tables


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def fig3_table(n0_values=(500, 1000, 2000, 5000), rho_values=(0.1, 0.2, 0.3, 0.5, 1.0), d_x_values=(2, 5, 10),
               methods=("las", "gmm"), replications=10, base_seed=0):
    """Rows (d_x, n0, rho, method, mean_ce, std_ce) for the linear sample-size grid."""
    rows = []
    for d_x, n0, rho in product(d_x_values, n0_values, rho_values):
        for method in methods:
            cfg = ExperimentConfig(design="linear", estimator=method, replications=replications,
                                   base_seed=base_seed, val_fraction=0.0, skip_failed=True,
                                   design_params={"n0": n0, "rho": rho, "d_x": d_x, "n_test": 10})
            agg = run_experiment(cfg).aggregate.get("ce", {"mean": float("nan"), "std": float("nan")})
            rows.append((d_x, n0, rho, method, agg["mean"], agg["std"]))
    return rows


def write_fig3(path, rows):
    write_csv(path, ["d_x", "n0", "rho", "method", "mean_ce", "std_ce"], rows)


def five_number(values):
    v = np.asarray(values, dtype=float)
    q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
    return tuple(float(x) for x in q)


def fig4_rows(pehe_by_variant):
    """Box-plot quantiles per Mult variant from ``{variant: [pehe, ...]}``."""
    rows = []
    for variant in sorted(pehe_by_variant):
        K, nk = simgen.MULT_VARIANTS[int(variant)]
        rows.append((f"mult{variant}", K, nk, K * nk) + five_number(pehe_by_variant[variant]))
    return rows


def write_fig4(path, rows):
    write_csv(path, ["variant", "K", "nk", "volume", "min", "q1", "median", "q3", "max"], rows)
