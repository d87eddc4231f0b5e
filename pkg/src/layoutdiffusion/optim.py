"""Adam optimizer and the finite-difference gradient oracle."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import NumericError
from .tensor import ParameterStore


@dataclass
class AdamState:
    """Optimizer state; updated functionally by :func:`adam_step`."""

    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, params: ParameterStore, lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        m = {name: np.zeros_like(t.data) for name, t in params.items()}
        v = {name: np.zeros_like(t.data) for name, t in params.items()}
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0, m=m, v=v)


def adam_step(params: ParameterStore, grads: dict, state: AdamState):
    """One Adam update with bias correction; returns (new_params, new_state)."""
    t = state.step + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new_arrays, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.data.shape:
            raise NumericError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_arrays[name] = p.data - update
        new_m[name] = m
        new_v[name] = v
    new_state = AdamState(lr=state.lr, beta1=state.beta1, beta2=state.beta2,
                          eps=state.eps, step=t, m=new_m, v=new_v)
    return params.replace(new_arrays), new_state


def finite_difference_grad(f, params: ParameterStore, h: float = 1e-5) -> dict:
    """Central-difference gradients of a scalar function of the parameters.

    Slow (two evaluations per coordinate); this is the oracle the analytic
    backward pass is checked against, so it must stay independent of it.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    grads = {}
    base = params.arrays()
    for name, arr in base.items():
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            plus = arr.copy().reshape(-1)
            plus[i] = orig + h
            minus = arr.copy().reshape(-1)
            minus[i] = orig - h
            f_plus = f(params.replace({name: plus.reshape(arr.shape)}))
            f_minus = f(params.replace({name: minus.reshape(arr.shape)}))
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"non-finite evaluation while differencing {name!r}")
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads[name] = g
    return grads
