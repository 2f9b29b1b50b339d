"""Small two-hidden-layer ELU networks with hand-written backprop and Adam."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ContractError, DimensionError

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


def elu(z):
    return _kernels.backend.elu(np.ascontiguousarray(z))


class Mlp:
    """in -> d_h -> d_h -> out, ELU on the hidden layers, identity output.

    Weights are stored as (fan_in, fan_out) so a batch ``X`` maps as ``X @ W + b``.
    """

    def __init__(self, sizes, params=None, seed=None):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) != 4:
            raise DimensionError(f"expected 4 layer sizes (in, h, h, out), got {self.sizes}")
        if params is None:
            params = self._glorot(np.random.default_rng(seed))
        self.params = [np.array(p, dtype=float) for p in params]
        self._check_shapes()

    def _glorot(self, rng):
        params = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params.append(rng.uniform(-limit, limit, (fan_in, fan_out)))
            params.append(np.zeros(fan_out))
        return params

    def _check_shapes(self):
        for k, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            W, b = self.params[2 * k], self.params[2 * k + 1]
            if W.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise DimensionError(f"layer {k}: got W{W.shape}, b{b.shape} for sizes {self.sizes}")

    @classmethod
    def zeros(cls, sizes):
        sizes = tuple(sizes)
        params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            params += [np.zeros((fan_in, fan_out)), np.zeros(fan_out)]
        return cls(sizes, params)

    def copy(self):
        return Mlp(self.sizes, [p.copy() for p in self.params])

    def forward(self, X):
        return self.forward_cached(X)[0]

    __call__ = forward

    def forward_cached(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.sizes[0]:
            raise DimensionError(f"input must be (n, {self.sizes[0]}), got {X.shape}")
        W1, b1, W2, b2, W3, b3 = self.params
        z1 = X @ W1 + b1
        a1 = elu(z1)
        z2 = a1 @ W2 + b2
        a2 = elu(z2)
        out = a2 @ W3 + b3
        return out, (X, z1, a1, z2, a2)

    def backward(self, cache, dout):
        """Parameter gradients given the adjoint of the outputs."""
        X, z1, a1, z2, a2 = cache
        W1, b1, W2, b2, W3, b3 = self.params
        k = _kernels.backend
        dW3 = a2.T @ dout
        db3 = dout.sum(axis=0)
        dz2 = k.elu_backward(z2, a2, np.ascontiguousarray(dout @ W3.T))
        dW2 = a1.T @ dz2
        db2 = dz2.sum(axis=0)
        dz1 = k.elu_backward(z1, a1, np.ascontiguousarray(dz2 @ W2.T))
        dW1 = X.T @ dz1
        db1 = dz1.sum(axis=0)
        return [dW1, db1, dW2, db2, dW3, db3]

    def to_dict(self):
        return {"sizes": list(self.sizes), "params": {n: p.tolist() for n, p in zip(PARAM_NAMES, self.params)}}

    @classmethod
    def from_dict(cls, data):
        return cls(data["sizes"], [np.asarray(data["params"][n], dtype=float) for n in PARAM_NAMES])


def forward(mlp, inputs):
    return mlp.forward(inputs)


def grad(loss_fn, mlp, inputs):
    """Reverse-mode gradient of ``loss_fn(outputs)`` w.r.t. every parameter.

    ``loss_fn`` maps the (n, out) output matrix to ``(value, d value / d outputs)``.
    Returns ``(value, grads)`` with ``grads`` mirroring ``mlp.params``.
    """
    out, cache = mlp.forward_cached(inputs)
    value, dout = loss_fn(out)
    if np.ndim(value) != 0:
        raise ContractError("loss must be a scalar")
    dout = np.asarray(dout, dtype=float)
    if dout.shape != out.shape:
        raise DimensionError(f"loss adjoint has shape {dout.shape}, outputs are {out.shape}")
    return float(value), mlp.backward(cache, dout)


@dataclass
class AdamState:
    shapes: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros(s) for s in self.shapes]
            self.v = [np.zeros(s) for s in self.shapes]

    @classmethod
    def for_params(cls, params, **hyper):
        return cls([np.shape(p) for p in params], **hyper)


def adam_step(state, params, grads, maximize=False):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and optimizer state must align")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != np.shape(g):
            raise DimensionError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
        if maximize:
            g = -g
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def save_mlp(mlp, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(mlp.to_dict(), fh)


def load_mlp(path):
    with open(path, encoding="utf-8") as fh:
        return Mlp.from_dict(json.load(fh))
