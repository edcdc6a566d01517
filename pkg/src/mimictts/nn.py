"""Reusable neural layers over the autodiff tensor module.

Layers are pure functions of (inputs, parameters, mode); parameters live
in a flat registry keyed by stable path strings, so checkpoints can
serialize them by name. Batch-norm running statistics are registry
entries too, stored with ``requires_grad=False``.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError

_NEG_BIG = 1.0e30  # additive mask value for max/softmax over padded frames


@dataclass
class Mode:
    """Train/infer switch plus the rng used for dropout in train mode."""

    train: bool = False
    rng: np.random.Generator | None = None


def trainable(params):
    return {k: v for k, v in params.items() if v.requires_grad}


# -- initializers -----------------------------------------------------------------

def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_dense(params, name, d_in, d_out, rng, dtype=np.float32, bias=True):
    params[f"{name}/w"] = T.Tensor(glorot_uniform(rng, (d_in, d_out), d_in, d_out, dtype),
                                   requires_grad=True)
    if bias:
        params[f"{name}/b"] = T.Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)


def init_conv1d(params, name, kernel, c_in, c_out, rng, dtype=np.float32):
    fan_in = kernel * c_in
    params[f"{name}/w"] = T.Tensor(glorot_uniform(rng, (kernel, c_in, c_out), fan_in, c_out, dtype),
                                   requires_grad=True)
    params[f"{name}/b"] = T.Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)


def init_batch_norm(params, name, channels, dtype=np.float32):
    params[f"{name}/gamma"] = T.Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
    params[f"{name}/beta"] = T.Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
    params[f"{name}/running_mean"] = T.Tensor(np.zeros(channels, dtype=dtype))
    params[f"{name}/running_var"] = T.Tensor(np.ones(channels, dtype=dtype))


def init_gru(params, name, d_in, d_hidden, rng, dtype=np.float32):
    params[f"{name}/w_zr"] = T.Tensor(glorot_uniform(rng, (d_in, 2 * d_hidden), d_in, d_hidden, dtype),
                                      requires_grad=True)
    params[f"{name}/u_zr"] = T.Tensor(glorot_uniform(rng, (d_hidden, 2 * d_hidden), d_hidden, d_hidden, dtype),
                                      requires_grad=True)
    params[f"{name}/b_zr"] = T.Tensor(np.zeros(2 * d_hidden, dtype=dtype), requires_grad=True)
    params[f"{name}/w_h"] = T.Tensor(glorot_uniform(rng, (d_in, d_hidden), d_in, d_hidden, dtype),
                                     requires_grad=True)
    params[f"{name}/u_h"] = T.Tensor(glorot_uniform(rng, (d_hidden, d_hidden), d_hidden, d_hidden, dtype),
                                     requires_grad=True)
    params[f"{name}/b_h"] = T.Tensor(np.zeros(d_hidden, dtype=dtype), requires_grad=True)


def init_attention(params, name, query_dim, memory_dim, attn_dim, rng, dtype=np.float32):
    init_dense(params, f"{name}/query", query_dim, attn_dim, rng, dtype, bias=False)
    init_dense(params, f"{name}/memory", memory_dim, attn_dim, rng, dtype, bias=True)
    init_dense(params, f"{name}/score", attn_dim, 1, rng, dtype, bias=False)


# -- layers ------------------------------------------------------------------------

def dense(x, w, b=None):
    out = T.matmul(x, w)
    return out if b is None else T.add(out, b)


def dense_p(params, name, x):
    return dense(x, params[f"{name}/w"], params.get(f"{name}/b"))


def conv1d(x, w, b=None, stride=1):
    """1-D convolution over time with 'same-ceil' zero padding.

    ``x`` is (B, T, C_in) or (T, C_in); ``w`` is (kernel, C_in, C_out).
    Output length is ceil(T / stride).
    """
    kernel, c_in, c_out = w.shape
    if kernel % 2 == 0:
        raise ContractError(f"conv kernel width must be odd, got {kernel}")
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    batch, t, cx = x.shape
    if t == 0:
        raise ContractError("conv1d input has zero time steps")
    if cx != c_in:
        raise ContractError(f"conv input channels {cx} != kernel channels {c_in}")
    out_len = -(-t // stride)
    total_pad = max((out_len - 1) * stride + kernel - t, 0)
    left = total_pad // 2
    right = total_pad - left
    if total_pad:
        def zeros(n):
            return T.Tensor(np.zeros((batch, n, c_in), dtype=x.dtype))
        parts = ([zeros(left)] if left else []) + [x] + ([zeros(right)] if right else [])
        x = T.concat(parts, axis=1)
    idx = (np.arange(out_len)[:, None] * stride + np.arange(kernel)).reshape(-1)
    cols = T.take(x, idx, axis=1)                       # B x (out_len*kernel) x C_in
    cols = T.reshape(cols, (batch, out_len, kernel * c_in))
    out = T.matmul(cols, T.reshape(w, (kernel * c_in, c_out)))
    if b is not None:
        out = T.add(out, b)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def conv1d_p(params, name, x, stride=1):
    return conv1d(x, params[f"{name}/w"], params[f"{name}/b"], stride=stride)


def batch_norm(x, gamma, beta, running_mean, running_var, mode,
               mask=None, momentum=0.99, eps=1e-3):
    """Normalize per channel (last axis) over all leading axes.

    Train mode uses (optionally masked) batch statistics and updates the
    running buffers in place with ``new = momentum * old + (1 - momentum)
    * batch``; infer mode is a fixed affine map from the running stats.
    """
    reduce_axes = tuple(range(x.ndim - 1))
    if mode.train:
        if mask is not None:
            m3 = T.Tensor(np.expand_dims(mask, -1).astype(x.dtype))
            count = float(mask.sum())
            if count < 2:
                raise ContractError(f"batch norm needs >= 2 elements per channel, got {count}")
            mean = T.sum_(x * m3, axis=reduce_axes) / count
            centered = (x - mean) * m3
            var = T.sum_(centered * centered, axis=reduce_axes) / count
        else:
            count = int(np.prod([x.shape[a] for a in reduce_axes]))
            if count < 2:
                raise ContractError(f"batch norm needs >= 2 elements per channel, got {count}")
            mean = T.mean(x, axis=reduce_axes)
            diff = x - mean
            var = T.mean(diff * diff, axis=reduce_axes)
        running_mean.data *= momentum
        running_mean.data += (1.0 - momentum) * mean.data.astype(running_mean.dtype)
        running_var.data *= momentum
        running_var.data += (1.0 - momentum) * var.data.astype(running_var.dtype)
        normalized = (x - mean) / T.sqrt(var + eps)
    else:
        normalized = (x - running_mean.detach()) / T.sqrt(running_var.detach() + eps)
    return normalized * gamma + beta


def batch_norm_p(params, name, x, mode, mask=None, momentum=0.99, eps=1e-3):
    return batch_norm(x, params[f"{name}/gamma"], params[f"{name}/beta"],
                      params[f"{name}/running_mean"], params[f"{name}/running_var"],
                      mode, mask=mask, momentum=momentum, eps=eps)


def dropout(x, ratio, mode):
    """Inverted dropout: scale survivors by 1/(1-ratio) in train mode,
    exact identity at inference."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"dropout ratio must be in [0, 1), got {ratio}")
    if not mode.train or ratio == 0.0:
        return x
    if mode.rng is None:
        raise ContractError("train-mode dropout requires an rng")
    keep = (mode.rng.random(x.shape) >= ratio).astype(x.dtype) / np.asarray(1.0 - ratio, dtype=x.dtype)
    return x * T.Tensor(keep)


def gru_cell(x, h, params, name):
    """Standard GRU step; the update gate interpolates toward the previous
    state, so a saturated gate (z -> 1) keeps h unchanged."""
    zr = T.sigmoid(dense(x, params[f"{name}/w_zr"]) + dense(h, params[f"{name}/u_zr"])
                   + params[f"{name}/b_zr"])
    hidden = h.shape[-1]
    z = zr[..., :hidden]
    r = zr[..., hidden:]
    candidate = T.tanh(dense(x, params[f"{name}/w_h"]) + dense(r * h, params[f"{name}/u_h"])
                       + params[f"{name}/b_h"])
    return z * h + (1.0 - z) * candidate


def process_memory(params, name, memory):
    """Precompute the memory projection once per sequence for attention."""
    return dense_p(params, f"{name}/memory", memory)


def attention(params, name, query, memory, processed_memory=None, mask=None):
    """Additive content-based attention.

    query: (B, Q) or (Q,); memory: (B, T, M) or (T, M). Returns the
    context vector(s) and attention weights that sum to one over T.
    """
    squeeze = memory.ndim == 2
    if squeeze:
        memory = T.reshape(memory, (1,) + memory.shape)
        query = T.reshape(query, (1,) + query.shape)
        processed_memory = None
    batch, t, mdim = memory.shape
    if t == 0:
        raise ContractError("attention memory is empty")
    if processed_memory is None:
        processed_memory = process_memory(params, name, memory)
    q = T.reshape(dense_p(params, f"{name}/query", query), (batch, 1, -1))
    scores = dense_p(params, f"{name}/score", T.tanh(processed_memory + q))
    scores = T.reshape(scores, (batch, t))
    if mask is not None:
        scores = scores + T.Tensor(((mask - 1.0) * _NEG_BIG).astype(scores.dtype))
    weights = T.softmax(scores, axis=-1)
    context = T.reshape(T.matmul(T.reshape(weights, (batch, 1, t)), memory), (batch, mdim))
    if squeeze:
        return T.reshape(context, (mdim,)), T.reshape(weights, (t,))
    return context, weights


def max_over_time(x, mask=None):
    """Per-channel maximum over the time axis: (B, T, C) -> (B, C) or
    (T, C) -> (C,). Masked frames never win."""
    time_axis = x.ndim - 2
    if x.ndim < 2 or x.shape[time_axis] == 0:
        raise ContractError(f"max_over_time needs a non-empty time axis, got shape {x.shape}")
    if mask is not None:
        x = x + T.Tensor((np.expand_dims(mask - 1.0, -1) * _NEG_BIG).astype(x.dtype))
    return T.max_(x, axis=time_axis)
