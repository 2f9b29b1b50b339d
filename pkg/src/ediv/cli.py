"""Command-line entry point: ``ediv gen|fit|eval|run|sweep``.

Every failure is printed to stderr as one JSON object ``{"error": code,
"message": ..., ...}`` and the process exits with a nonzero status.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset, encounter, harness, linear, simgen
from .errors import ConfigError, EdivError, ParseError

EXIT_ERROR = 2
EXIT_IO = 3


def _dump(obj, out):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})", file=str(path)) from None


# ---------------------------------------------------------------------------
# gen


def _design_params(args, design):
    """Flags the user actually passed, mapped onto the design's field names."""
    if design == "linear":
        names = {"n0": "n0", "rho": "rho", "dx": "d_x", "du": "d_u", "K": "K"}
    else:
        names = {"n0": "n0", "nk": "nk", "dx": "d_x", "du": "d_u", "K": "K"}
    out = {}
    for flag, field_name in names.items():
        val = getattr(args, flag)
        if val is not None:
            out[field_name] = val
    ignored = [f for f in ("rho", "nk", "K") if getattr(args, f) is not None and f not in names]
    if ignored:
        raise ConfigError(f"flags {ignored} do not apply to design {design!r}")
    if design.startswith("mult") and design[4:].isdigit() and {"nk", "K"} & set(out):
        raise ConfigError("Mult variants fix K and nk; use --design mult to set them")
    return out


def _gen_semisynthetic(args):
    if args.source is None:
        raise ConfigError("--design semisynthetic needs --source CSV with covariate, m0, m1 and group columns")
    with open(args.source, encoding="utf-8") as fh:
        header = [h.strip() for h in fh.readline().split(",")]
    data = np.loadtxt(args.source, delimiter=",", skiprows=1, ndmin=2)
    col = {h: i for i, h in enumerate(header)}
    for need in ("m0", "m1", "group"):
        if need not in col:
            raise ParseError(f"{args.source}: missing column {need!r}", file=str(args.source))
    cov_idx = [i for h, i in col.items() if h not in ("m0", "m1", "group")]
    d_x = args.dx if args.dx is not None else 5
    return simgen.gen_semisynthetic(
        data[:, cov_idx], data[:, col["m0"]], data[:, col["m1"]], data[:, col["group"]],
        d_x=d_x, scale=args.scale, seed=args.seed,
    )


def cmd_gen(args):
    design = args.design.lower()
    out = Path(args.out)
    if design == "semisynthetic":
        study, test, val = _gen_semisynthetic(args)
    else:
        study, test = harness.make_data(design, args.seed, _design_params(args, design))
        val = None
    dataset.save_study(study, out)
    dataset.save_test(test, out / "test.csv")
    if val is not None:
        dataset.write_env_csv(val, out / "validation.csv")
    _dump({"out": str(out), "envs": [e.n for e in study.envs], "n_test": test.n}, None)


# ---------------------------------------------------------------------------
# fit / eval


def _hparams(args):
    hp = {"seed": args.seed}
    for flag, name in (("alpha", "alpha"), ("dh", "d_h"), ("dr", "d_r"), ("i1", "I1"), ("i2", "I2"),
                       ("i3", "I3"), ("lr", "lr"), ("lr_w", "lr_w")):
        val = getattr(args, flag)
        if val is not None:
            hp[name] = val
    if args.no_reweight:
        hp["reweight"] = "off"
    if args.no_lE:
        hp["use_LE"] = False
    if args.no_lX:
        hp["use_LX"] = False
    if args.no_lR:
        hp["use_LR"] = False
    return encounter.EncounterHparams.from_dict(hp)


def cmd_fit(args):
    study = dataset.load_study(args.train)
    method = args.method
    out = Path(args.out)
    if method in harness.LINEAR_ESTIMATORS:
        fit = harness.fit_estimator(method, study, options={"dim": args.dim, "two_step": args.two_step})
        payload = {"kind": "linear", **fit.to_dict()}
        _dump(payload, out)
        _dump({"model": str(out), "method": fit.method, "psi_t_hat": fit.psi_t}, None)
        return
    model = harness.fit_estimator(method, study, _hparams(args))
    encounter.save_model(model, out)
    _dump({"model": str(out), "method": method, "final_loss": model.traces["L"][-1]}, None)


def load_any_model(path):
    data = _read_json(path)
    kind = data.get("kind")
    if kind == "linear":
        return linear.LinearFit.from_dict(data)
    if kind == "encounter":
        return encounter.load_model(path)
    raise ParseError(f"{path}: unknown model kind {kind!r}", file=str(path))


def cmd_eval(args):
    model = load_any_model(args.model)
    test = dataset.load_test(args.test)
    metrics = harness.evaluate(model, test, args.psi_t)
    _dump({"model": str(args.model), "test": str(args.test), "metrics": metrics.to_dict()}, args.out)


# ---------------------------------------------------------------------------
# run / sweep


def cmd_run(args):
    report = harness.run_experiment(_read_json(args.config))
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        if args.timings:
            _dump({"seconds_per_replication": report.timings}, args.timings)
    else:
        sys.stdout.write(text)


def cmd_sweep(args):
    _dump(harness.run_sweep(_read_json(args.config)), args.out)


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="ediv", description="Encouragement-design causal effect estimation.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic study and its test set")
    g.add_argument("--design", required=True,
                   choices=list(harness.DESIGNS) + ["semisynthetic"], type=str.lower)
    g.add_argument("--n0", type=int)
    g.add_argument("--nk", type=int)
    g.add_argument("--K", type=int)
    g.add_argument("--dx", type=int)
    g.add_argument("--du", type=int)
    g.add_argument("--rho", type=float)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--source", help="semisynthetic only: CSV of covariates plus m0, m1, group columns")
    g.add_argument("--scale", type=float, default=1.0, help="semisynthetic only: m0/m1 multiplier")
    g.add_argument("--out", required=True, metavar="DIR")
    g.set_defaults(func=cmd_gen)

    f = sub.add_parser("fit", help="fit an estimator on a saved study")
    f.add_argument("--method", required=True, choices=["las", "iv", "gmm", "ols", "encounter", "vanilla"])
    f.add_argument("--train", required=True, metavar="DIR")
    f.add_argument("--alpha", type=float)
    f.add_argument("--dh", type=int)
    f.add_argument("--dr", type=int)
    f.add_argument("--i1", type=int)
    f.add_argument("--i2", type=int)
    f.add_argument("--i3", type=int)
    f.add_argument("--lr", type=float)
    f.add_argument("--lr-w", dest="lr_w", type=float)
    f.add_argument("--no-reweight", action="store_true")
    f.add_argument("--no-lE", dest="no_lE", action="store_true")
    f.add_argument("--no-lX", dest="no_lX", action="store_true")
    f.add_argument("--no-lR", dest="no_lR", action="store_true")
    f.add_argument("--dim", type=int, default=0, help="covariate used by las / iv")
    f.add_argument("--two-step", action="store_true", help="gmm: re-weight moments by inverse variances")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True, metavar="MODEL")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="score a fitted model on a test set")
    e.add_argument("--model", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--psi-t", dest="psi_t", type=float, help="true constant effect, for the CE metric")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("run", help="run a replicated experiment from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--timings", help="write per-replication wall-clock seconds here")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="two-phase hyperparameter sweep from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except EdivError as exc:
        sys.stderr.write(json.dumps(exc.to_dict(), sort_keys=True) + "\n")
        return EXIT_ERROR
    except OSError as exc:
        sys.stderr.write(json.dumps({"error": "io", "message": str(exc)}, sort_keys=True) + "\n")
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
