"""Functional network layers over the autodiff tensor primitives.

Parameters live in a flat ``{name: Tensor}`` dict owned by the model;
the functions here just consume slices of that dict.  Running batch-norm
statistics are plain float32 Tensors kept in a separate buffer dict and are
never recorded on the tape.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
IN_EPS = 1e-5
LN_EPS = 1e-5


def init_linear(params, name, d_in, d_out, rng):
    scale = float(np.sqrt(6.0 / (d_in + d_out)))
    params[f"{name}.w"] = Tensor(rng.uniform(-scale, scale, (d_in, d_out)),
                                 requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros((1, d_out)), requires_grad=True)


def linear(params, name, x):
    return T.matmul(x, params[f"{name}.w"]) + params[f"{name}.b"]


def init_batchnorm(params, buffers, name, dim):
    params[f"{name}.gamma"] = Tensor(np.ones((1, dim)), requires_grad=True)
    params[f"{name}.beta"] = Tensor(np.zeros((1, dim)), requires_grad=True)
    buffers[f"{name}.running_mean"] = Tensor(np.zeros((1, dim)))
    buffers[f"{name}.running_var"] = Tensor(np.ones((1, dim)))


def batchnorm(params, buffers, name, x, train):
    """Batch norm over the time axis of a T x C activation."""
    gamma = params[f"{name}.gamma"]
    beta = params[f"{name}.beta"]
    if train:
        mu = T.mean(x, axis=0, keepdims=True)
        centered = x - mu
        var = T.mean(centered * centered, axis=0, keepdims=True)
        y = centered / T.sqrt(var + BN_EPS)
        rm = buffers[f"{name}.running_mean"]
        rv = buffers[f"{name}.running_var"]
        rm.data[...] = (1 - BN_MOMENTUM) * rm.data + BN_MOMENTUM * mu.data
        rv.data[...] = (1 - BN_MOMENTUM) * rv.data + BN_MOMENTUM * var.data
    else:
        rm = buffers[f"{name}.running_mean"]
        rv = buffers[f"{name}.running_var"]
        y = (x - rm) / np.sqrt(rv.data + BN_EPS)
    return gamma * y + beta


def instance_norm(x, eps=IN_EPS):
    """Per-channel normalization over time, no learned affine."""
    mu = T.mean(x, axis=0, keepdims=True)
    centered = x - mu
    var = T.mean(centered * centered, axis=0, keepdims=True)
    return centered / T.sqrt(var + eps)


def init_layernorm(params, name, dim):
    params[f"{name}.gamma"] = Tensor(np.ones((1, dim)), requires_grad=True)
    params[f"{name}.beta"] = Tensor(np.zeros((1, dim)), requires_grad=True)


def layer_norm(params, name, x):
    # per-row stats == per-column stats of the transpose, which row
    # broadcasting supports
    xt = T.transpose(x)
    mu = T.mean(xt, axis=0, keepdims=True)
    centered = xt - mu
    var = T.mean(centered * centered, axis=0, keepdims=True)
    y = T.transpose(centered / T.sqrt(var + LN_EPS))
    return params[f"{name}.gamma"] * y + params[f"{name}.beta"]


def init_conv1d(params, name, c_in, c_out, kernel, rng):
    scale = float(np.sqrt(6.0 / (c_in * kernel + c_out)))
    params[f"{name}.w"] = Tensor(rng.uniform(-scale, scale, (c_out, c_in, kernel)),
                                 requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(c_out), requires_grad=True)


def conv1d(params, name, x):
    return T.conv1d(x, params[f"{name}.w"], params[f"{name}.b"])


def swish(x):
    return x * T.sigmoid(x)


def glu(x):
    half = x.shape[1] // 2
    return T.cols(x, 0, half) * T.sigmoid(T.cols(x, half, 2 * half))


def init_mhsa(params, name, d_model, rng):
    for proj in ("q", "k", "v", "o"):
        init_linear(params, f"{name}.{proj}", d_model, d_model, rng)


def multi_head_self_attention(params, name, x, n_heads):
    d_model = x.shape[1]
    if d_model % n_heads:
        raise T.ShapeError(f"d_model {d_model} not divisible by {n_heads} heads")
    d_head = d_model // n_heads
    q = linear(params, f"{name}.q", x)
    k = linear(params, f"{name}.k", x)
    v = linear(params, f"{name}.v", x)
    heads = []
    scale = 1.0 / float(np.sqrt(d_head))
    for h in range(n_heads):
        lo, hi = h * d_head, (h + 1) * d_head
        qh, kh, vh = T.cols(q, lo, hi), T.cols(k, lo, hi), T.cols(v, lo, hi)
        scores = T.matmul(qh, T.transpose(kh)) * scale
        heads.append(T.matmul(T.softmax(scores, axis=1), vh))
    return linear(params, f"{name}.o", T.concat_cols(heads))


def init_conformer_block(params, buffers, name, cfg, rng):
    d = cfg.d_model
    init_layernorm(params, f"{name}.ff1.ln", d)
    init_linear(params, f"{name}.ff1.in", d, cfg.conformer_ff_dim, rng)
    init_linear(params, f"{name}.ff1.out", cfg.conformer_ff_dim, d, rng)
    init_layernorm(params, f"{name}.attn.ln", d)
    init_mhsa(params, f"{name}.attn", d, rng)
    init_layernorm(params, f"{name}.conv.ln", d)
    init_linear(params, f"{name}.conv.pw1", d, 2 * d, rng)
    scale = float(np.sqrt(3.0 / cfg.conformer_conv_kernel))
    params[f"{name}.conv.dw.w"] = Tensor(
        rng.uniform(-scale, scale, (d, cfg.conformer_conv_kernel)), requires_grad=True)
    params[f"{name}.conv.dw.b"] = Tensor(np.zeros(d), requires_grad=True)
    init_batchnorm(params, buffers, f"{name}.conv.bn", d)
    init_linear(params, f"{name}.conv.pw2", d, d, rng)
    init_layernorm(params, f"{name}.ff2.ln", d)
    init_linear(params, f"{name}.ff2.in", d, cfg.conformer_ff_dim, rng)
    init_linear(params, f"{name}.ff2.out", cfg.conformer_ff_dim, d, rng)
    init_layernorm(params, f"{name}.final.ln", d)


def _ff(params, name, x, train, drop_rate, rng):
    h = swish(linear(params, f"{name}.in", layer_norm(params, f"{name}.ln", x)))
    if train:
        h = T.dropout(h, drop_rate, rng)
    return linear(params, f"{name}.out", h)


def conformer_block(params, buffers, name, x, cfg, train=False, rng=None):
    """Pre-norm conformer: half-step FF, MHSA, conv module, half-step FF, LN."""
    drop = cfg.dropout if train else 0.0
    x = x + 0.5 * _ff(params, f"{name}.ff1", x, train, drop, rng)
    attn_in = layer_norm(params, f"{name}.attn.ln", x)
    x = x + multi_head_self_attention(params, f"{name}.attn", attn_in, cfg.conformer_heads)
    c = layer_norm(params, f"{name}.conv.ln", x)
    c = glu(linear(params, f"{name}.conv.pw1", c))
    c = T.depthwise_conv1d(c, params[f"{name}.conv.dw.w"], params[f"{name}.conv.dw.b"])
    c = swish(batchnorm(params, buffers, f"{name}.conv.bn", c, train))
    c = linear(params, f"{name}.conv.pw2", c)
    if train:
        c = T.dropout(c, drop, rng)
    x = x + c
    x = x + 0.5 * _ff(params, f"{name}.ff2", x, train, drop, rng)
    return layer_norm(params, f"{name}.final.ln", x)


def init_sap(params, name, d_model, rng):
    scale = float(np.sqrt(3.0 / d_model))
    params[f"{name}.w"] = Tensor(rng.uniform(-scale, scale, (d_model, 1)),
                                 requires_grad=True)


def self_attention_pool(params, name, h):
    """Learned weighted temporal average; returns a 1 x d row."""
    scores = T.matmul(h, params[f"{name}.w"])  # T x 1
    alpha = T.softmax(T.transpose(scores), axis=1)  # 1 x T
    return T.matmul(alpha, h)
