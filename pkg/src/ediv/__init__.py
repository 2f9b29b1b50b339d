"""Causal effect estimation from observational data plus randomized encouragements."""

from .dataset import EnvDataset, Study, TruthBundle, balance_test, load_study, save_study, split, weighted_stats
from .encounter import EncounterHparams, EncounterModel, fit_weights, train, train_vanilla
from .errors import EdivError
from .harness import ExperimentConfig, MetricSet, metric_ce, metric_cfr, metric_pehe, run_experiment, sweep
from .linear import LinearFit, gmm_estimate, iv_ratio, las_estimate, ols_estimate
from .simgen import LinearDesign, NonlinearDesign, gen_linear, gen_mult_variants, gen_nonlinear, gen_semisynthetic

__version__ = "0.1.0"
