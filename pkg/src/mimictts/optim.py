"""Optimizer utilities: global-norm gradient clipping and Adam."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, NumericError
from .tensor import Tensor

# relative guard so that re-clipping an already-clipped map is a no-op bit for bit
_CLIP_SLACK = 1e-12


def global_norm(grads):
    """L2 norm over all entries of a gradient map, accumulated in float64."""
    total = 0.0
    for g in grads.values():
        d = g.data if isinstance(g, Tensor) else g
        total += float(np.dot(d.reshape(-1).astype(np.float64), d.reshape(-1).astype(np.float64)))
    return float(np.sqrt(total))


def clip_global_norm(grads, threshold):
    """Scale all gradients so their global L2 norm does not exceed ``threshold``.

    Returns the input map unchanged (same arrays) when already under the
    threshold, which makes clipping exactly idempotent.
    """
    if threshold <= 0:
        raise ConfigError(f"clip threshold must be positive, got {threshold}")
    norm = global_norm(grads)
    if norm <= threshold * (1.0 + _CLIP_SLACK):
        return grads
    scale = threshold / norm
    return {
        name: Tensor((g.data if isinstance(g, Tensor) else g) * np.asarray(scale, dtype=(g.data if isinstance(g, Tensor) else g).dtype))
        for name, g in grads.items()
    }


@dataclass
class AdamState:
    """Per-parameter first/second moment estimates plus the step counter."""

    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params):
        state = cls()
        for name, p in params.items():
            state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        return state


def adam_step(params, grads, state, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction; mutates params and state in place.

    Aborts with NumericError if any updated parameter is non-finite.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        if name not in grads:
            raise ContractError(f"gradient map missing parameter '{name}'")
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else g
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter '{name}' {p.data.shape}")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
        p.data -= update.astype(p.data.dtype, copy=False)
        if not np.all(np.isfinite(p.data)):
            raise NumericError(f"non-finite parameter '{name}' after Adam step {t}")
    return params, state
