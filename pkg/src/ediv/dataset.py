"""Multi-environment study containers, weighted statistics, I/O and splitting."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Optional

import numpy as np

from . import _kernels
from .errors import ContractError, DimensionError, ParseError

# round-trip exact for float64
FLOAT_FMT = "%.17g"

DEFAULT_MEAN_THRESHOLD = 0.05
DEFAULT_COV_THRESHOLD = 0.1


@dataclass(frozen=True)
class TruthBundle:
    """Interventional ground truth attached to test rows."""

    do_t: np.ndarray
    y_do: np.ndarray
    cate_true: np.ndarray


@dataclass(frozen=True)
class EnvDataset:
    env_label: str
    X: np.ndarray
    T: np.ndarray
    Y: np.ndarray
    U: Optional[np.ndarray] = None
    truth: Optional[TruthBundle] = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        if X.shape[0] == 1 and np.ndim(self.X) == 1:
            X = X.T
        T = np.asarray(self.T, dtype=float).reshape(-1)
        Y = np.asarray(self.Y, dtype=float).reshape(-1)
        n = X.shape[0]
        if n < 1:
            raise DimensionError(f"environment {self.env_label!r} has no rows")
        if T.shape[0] != n or Y.shape[0] != n:
            raise DimensionError(
                f"environment {self.env_label!r}: X has {n} rows, T {T.shape[0]}, Y {Y.shape[0]}"
            )
        for name, arr in (("X", X), ("T", T), ("Y", Y)):
            if not np.all(np.isfinite(arr)):
                raise ContractError(f"environment {self.env_label!r}: non-finite values in {name}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "Y", Y)
        if self.U is not None:
            U = np.asarray(self.U, dtype=float)
            if U.ndim == 1:
                U = U[:, None]
            if U.shape[0] != n:
                raise DimensionError(f"environment {self.env_label!r}: U has {U.shape[0]} rows, expected {n}")
            object.__setattr__(self, "U", U)
        if self.truth is not None:
            for name in ("do_t", "y_do", "cate_true"):
                if np.asarray(getattr(self.truth, name)).shape[0] != n:
                    raise DimensionError(f"truth column {name} does not match {n} rows")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d_x(self) -> int:
        return self.X.shape[1]

    @property
    def d_u(self) -> int:
        return 0 if self.U is None else self.U.shape[1]

    def take(self, idx) -> "EnvDataset":
        idx = np.asarray(idx)
        truth = None
        if self.truth is not None:
            truth = TruthBundle(self.truth.do_t[idx], self.truth.y_do[idx], self.truth.cate_true[idx])
        return EnvDataset(
            self.env_label,
            self.X[idx],
            self.T[idx],
            self.Y[idx],
            None if self.U is None else self.U[idx],
            truth,
        )


@dataclass(frozen=True)
class Study:
    envs: tuple
    d_x: int
    d_u: int = 0
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        envs = tuple(self.envs)
        if not envs:
            raise ContractError("a study needs at least one environment")
        for env in envs:
            if env.d_x != self.d_x:
                raise DimensionError(
                    f"environment {env.env_label!r} has d_x={env.d_x}, study declares {self.d_x}"
                )
        object.__setattr__(self, "envs", envs)

    @property
    def K(self) -> int:
        return len(self.envs) - 1

    def with_env(self, index, env) -> "Study":
        envs = list(self.envs)
        envs[index] = env
        return replace(self, envs=tuple(envs))


@dataclass(frozen=True)
class BalanceReport:
    mean_diffs: dict  # (j, k) -> per-dimension standardized mean differences
    cov_diffs: dict  # (j, k) -> Frobenius norm of covariance difference
    degenerate: dict  # (j, k) -> list of constant dimensions
    balanced: bool
    mean_threshold: float
    cov_threshold: float

    def to_dict(self):
        key = lambda p: f"{p[0]}-{p[1]}"
        return {
            "balanced": self.balanced,
            "mean_threshold": self.mean_threshold,
            "cov_threshold": self.cov_threshold,
            "mean_diffs": {key(p): v.tolist() for p, v in self.mean_diffs.items()},
            "cov_diffs": {key(p): v for p, v in self.cov_diffs.items()},
            "degenerate": {key(p): v for p, v in self.degenerate.items()},
        }


def weighted_stats(values, weights):
    """Weighted mean and covariance, 1/sum(w) style (no n-1 correction).

    ``weights`` must be a probability vector.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if values.shape[0] != weights.shape[0]:
        raise DimensionError(f"{values.shape[0]} rows but {weights.shape[0]} weights")
    if values.shape[0] < 1:
        raise ContractError("weighted_stats needs at least one row")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ContractError("weights must be nonnegative and sum to 1", total=float(weights.sum()))
    return _kernels.backend.weighted_mean_cov(np.ascontiguousarray(values), weights)


def uniform_weights(n):
    return np.full(n, 1.0 / n)


def balance_test(study, mean_threshold=DEFAULT_MEAN_THRESHOLD, cov_threshold=DEFAULT_COV_THRESHOLD, weights=None):
    """Standardized-mean-difference and covariance-difference check across env pairs."""
    if len(study.envs) < 2:
        raise ContractError("balance_test needs at least two environments")
    if weights is None:
        weights = [uniform_weights(env.n) for env in study.envs]
    stats = [weighted_stats(env.X, w) for env, w in zip(study.envs, weights)]
    mean_diffs, cov_diffs, degenerate = {}, {}, {}
    balanced = True
    for j, k in combinations(range(len(study.envs)), 2):
        (mj, cj), (mk, ck) = stats[j], stats[k]
        pooled = np.sqrt(0.5 * (np.diag(cj) + np.diag(ck)))
        diff = np.abs(mj - mk)
        smd = np.empty_like(diff)
        flat = []
        for a in range(diff.size):
            if pooled[a] > 0:
                smd[a] = diff[a] / pooled[a]
            else:
                flat.append(a)
                smd[a] = 0.0 if diff[a] == 0 else math.inf
        mean_diffs[(j, k)] = smd
        cov_diffs[(j, k)] = float(np.linalg.norm(cj - ck, ord="fro"))
        degenerate[(j, k)] = flat
        if np.any(smd > mean_threshold) or cov_diffs[(j, k)] > cov_threshold:
            balanced = False
    return BalanceReport(mean_diffs, cov_diffs, degenerate, balanced, mean_threshold, cov_threshold)


def split(env, holdout_fraction, seed):
    """Seeded shuffle split; holdout gets round(n * fraction) rows."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ContractError(f"holdout_fraction must lie in (0, 1), got {holdout_fraction}")
    n = env.n
    n_hold = int(round(n * holdout_fraction))
    if n < 2 or n_hold < 1 or n_hold > n - 1:
        raise ContractError(f"cannot split {n} rows with fraction {holdout_fraction}")
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    hold = np.sort(perm[:n_hold])
    train = np.sort(perm[n_hold:])
    return env.take(train), env.take(hold)


# ---------------------------------------------------------------------------
# files


def _env_header(d_x, d_u, truth=False):
    cols = ["t", "y"] + [f"x_{a}" for a in range(d_x)] + [f"u_{a}" for a in range(d_u)]
    if truth:
        cols += ["do_t", "y_do", "cate_true"]
    return cols


def write_env_csv(env, path, with_u=True):
    d_u = env.d_u if with_u else 0
    has_truth = env.truth is not None
    cols = [env.T[:, None], env.Y[:, None], env.X]
    if d_u:
        cols.append(env.U)
    if has_truth:
        cols += [env.truth.do_t[:, None], env.truth.y_do[:, None], env.truth.cate_true[:, None]]
    data = np.hstack(cols)
    header = ",".join(_env_header(env.d_x, d_u, has_truth))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        np.savetxt(fh, data, fmt=FLOAT_FMT, delimiter=",")


def read_env_csv(path, label=None, d_x=None):
    """Parse one environment file; errors name the file, row and column."""
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file", file=str(path)) from None
        rows = list(reader)
    for col in ("t", "y"):
        if col not in header:
            raise ParseError(f"{path}: missing column {col!r}", file=str(path))
    x_cols = [h for h in header if h.startswith("x_")]
    u_cols = [h for h in header if h.startswith("u_")]
    if [f"x_{a}" for a in range(len(x_cols))] != x_cols:
        raise ParseError(f"{path}: covariate columns must be x_0..x_{{d-1}} in order", file=str(path))
    if d_x is not None and len(x_cols) != d_x:
        raise DimensionError(
            f"{path}: manifest declares d_x={d_x} but file has {len(x_cols)} x-columns", file=str(path)
        )
    data = np.empty((len(rows), len(header)))
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise ParseError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}", file=str(path), row=r)
        for c, cell in enumerate(row):
            try:
                val = float(cell)
            except ValueError:
                raise ParseError(
                    f"{path}: row {r}, column {header[c]}: cannot parse {cell!r}",
                    file=str(path), row=r, column=header[c],
                ) from None
            if not math.isfinite(val):
                raise ParseError(
                    f"{path}: row {r}, column {header[c]}: non-finite value",
                    file=str(path), row=r, column=header[c],
                )
            data[r - 1, c] = val
    if not rows:
        raise ParseError(f"{path}: no data rows", file=str(path))
    col = {h: i for i, h in enumerate(header)}
    X = data[:, [col[h] for h in x_cols]]
    U = data[:, [col[h] for h in u_cols]] if u_cols else None
    truth = None
    if all(h in col for h in ("do_t", "y_do", "cate_true")):
        truth = TruthBundle(data[:, col["do_t"]], data[:, col["y_do"]], data[:, col["cate_true"]])
    return EnvDataset(label or path.stem, X, data[:, col["t"]], data[:, col["y"]], U, truth)


def save_study(study, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, env in enumerate(study.envs):
        fname = f"env_{k}.csv"
        write_env_csv(env, path / fname)
        entries.append({"label": env.env_label, "file": fname, "n": env.n})
    manifest = dict(study.manifest)
    manifest.update({"d_x": study.d_x, "d_u": study.d_u, "envs": entries})
    manifest.setdefault("design", "custom")
    manifest.setdefault("seed", 0)
    with open(path / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_study(path):
    path = Path(path)
    mpath = path / "manifest.json"
    try:
        with open(mpath, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise ParseError(f"{mpath}: manifest not found", file=str(mpath)) from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{mpath}: invalid JSON ({exc})", file=str(mpath)) from None
    for key in ("d_x", "envs"):
        if key not in manifest:
            raise ParseError(f"{mpath}: manifest missing {key!r}", file=str(mpath))
    d_x = int(manifest["d_x"])
    envs = []
    for entry in manifest["envs"]:
        env = read_env_csv(path / entry["file"], label=entry.get("label"), d_x=d_x)
        if "n" in entry and int(entry["n"]) != env.n:
            raise ParseError(
                f"{entry['file']}: manifest says n={entry['n']} but file has {env.n} rows", file=entry["file"]
            )
        envs.append(env)
    extra = {k: v for k, v in manifest.items() if k not in ("d_x", "d_u", "envs")}
    return Study(tuple(envs), d_x, int(manifest.get("d_u", 0)), extra)


def save_test(env, path):
    if env.truth is None:
        raise ContractError("test set must carry truth columns")
    write_env_csv(env, path)


def load_test(path):
    env = read_env_csv(path, label="test")
    if env.truth is None:
        raise ParseError(f"{path}: test file needs do_t, y_do and cate_true columns", file=str(path))
    return env
