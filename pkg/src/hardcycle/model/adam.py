from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .net import ModelParams


class OptimizerError(ArithmeticError):
    pass


@dataclass(frozen=True)
class AdamState:
    m: ModelParams
    v: ModelParams
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ModelParams, **kw) -> "AdamState":
        return cls(params.map(np.zeros_like), params.map(np.zeros_like), **kw)


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState, lr: float):
    """One bias-corrected Adam update.  Inputs are left untouched."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient in {name}")
    b1, b2 = state.beta1, state.beta2
    t = state.t + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_p[name] = (p - lr * step).astype(p.dtype, copy=False)
        new_m[name] = m.astype(p.dtype, copy=False)
        new_v[name] = v.astype(p.dtype, copy=False)
    spec = params.spec
    return ModelParams(spec, new_p), AdamState(
        ModelParams(spec, new_m), ModelParams(spec, new_v), t, b1, b2, state.eps
    )
