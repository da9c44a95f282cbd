"""Forward/backward pairs for every layer and loss of the embedding network.

Each ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes the upstream gradient plus that cache. A cache is only valid for the
batch that produced it.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import DTYPE, DimensionError, Rng

BN_EPS = 1e-5
L2_EPS = 1e-12


class BatchTooSmallError(ValueError):
    pass


# fully connected ----------------------------------------------------------

def fc_forward(x, w, b):
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"fc: input {x.shape} does not match weight {w.shape}")
    return x @ w + b, (x, w)


def fc_backward(dy, cache):
    x, w = cache
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


# relu ---------------------------------------------------------------------

def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(dy, cache):
    # gradient at exactly 0 is 0
    return np.where(cache, dy, 0.0)


# dropout ------------------------------------------------------------------

def dropout_forward(x, rate: float, mode: str, rng: Rng | None = None, mask=None):
    """Inverted dropout.

    In train mode a keep-mask is drawn from ``rng`` (or taken from ``mask``)
    and survivors are scaled by ``1 / (1 - rate)``; eval mode is the identity.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x, None
    if mask is None:
        mask = rng.bernoulli(x.shape, 1.0 - rate)
    scaled = mask / (1.0 - rate)
    return x * scaled, scaled


def dropout_backward(dy, cache):
    if cache is None:
        return dy
    return dy * cache


# batch normalization ------------------------------------------------------

def batchnorm_forward(x, gamma, beta, state: dict, mode: str, momentum: float = 0.9,
                      eps: float = BN_EPS):
    """Batch normalization over axis 0.

    ``state`` holds ``running_mean`` and ``running_var``; train mode updates
    them in place as ``momentum * old + (1 - momentum) * batch``.
    """
    if mode == "train":
        if x.shape[0] < 2:
            raise BatchTooSmallError(f"batch-norm needs B >= 2 in train mode, got {x.shape[0]}")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        state["running_mean"] = momentum * state["running_mean"] + (1 - momentum) * mu
        state["running_var"] = momentum * state["running_var"] + (1 - momentum) * var
    else:
        mu = state["running_mean"]
        var = state["running_var"]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma, mode)


def batchnorm_backward(dy, cache):
    xhat, inv_std, gamma, mode = cache
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    if mode != "train":
        return dxhat * inv_std, dgamma, dbeta
    n = dy.shape[0]
    dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


# l2 normalization ---------------------------------------------------------

def l2norm_forward(x, eps: float = L2_EPS):
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x / denom
    return y, (y, denom, norm > eps)


def l2norm_backward(dy, cache):
    y, denom, active = cache
    proj = (y * dy).sum(axis=1, keepdims=True)
    # rows clamped at eps are a plain scaling
    return np.where(active, (dy - y * proj) / denom, dy / denom)


# text CNN -----------------------------------------------------------------

def textcnn_forward(x, kernels: dict, biases: dict):
    """Valid 1-D convolutions over the length axis, ReLU, max-over-time.

    ``x`` is [B, L, d_word]; ``kernels[w]`` is [w, d_word, F] and
    ``biases[w]`` is [F]. Output is [B, F * len(kernels)], widths ascending.
    """
    if x.ndim != 3:
        raise DimensionError(f"textcnn expects [B, L, d_word], got {x.shape}")
    B, L, d = x.shape
    widths = sorted(kernels)
    if L < widths[-1]:
        raise DimensionError(f"sentence length {L} shorter than widest filter {widths[-1]}")
    feats, caches = [], []
    for w in widths:
        k = kernels[w]
        if k.shape[:2] != (w, d):
            raise DimensionError(f"kernel for width {w} has shape {k.shape}, expected ({w}, {d}, F)")
        P = L - w + 1
        # [B, P, d, w] -> [B, P, w, d]
        win = sliding_window_view(x, w, axis=1).transpose(0, 1, 3, 2).reshape(B * P, w * d)
        conv = (win @ k.reshape(w * d, -1)).reshape(B, P, -1) + biases[w]
        act = np.maximum(conv, 0.0)
        idx = act.argmax(axis=1)  # [B, F], first position on ties
        pooled = np.take_along_axis(act, idx[:, None, :], axis=1)[:, 0, :]
        feats.append(pooled)
        caches.append((w, win, idx, pooled > 0, P))
    return np.concatenate(feats, axis=1), (x.shape, kernels, caches)


def textcnn_backward(dfeat, cache):
    shape, kernels, caches = cache
    B, L, d = shape
    dx = np.zeros(shape, dtype=DTYPE)
    dk, db = {}, {}
    col = 0
    for w, win, idx, active, P in caches:
        F = kernels[w].shape[2]
        dpool = dfeat[:, col:col + F] * active
        col += F
        dconv = np.zeros((B, P, F), dtype=DTYPE)
        np.put_along_axis(dconv, idx[:, None, :], dpool[:, None, :], axis=1)
        dconv2 = dconv.reshape(B * P, F)
        dk[w] = (win.T @ dconv2).reshape(w, d, F)
        db[w] = dpool.sum(axis=0)
        dwin = (dconv2 @ kernels[w].reshape(w * d, F).T).reshape(B, P, w, d)
        for j in range(w):
            dx[:, j:j + P, :] += dwin[:, :, j, :]
    return dx, dk, db


# gradient reversal --------------------------------------------------------

def grl_forward(x):
    return x


def grl_backward(dy, lam: float):
    if lam < 0:
        raise ValueError(f"adaptation factor must be >= 0, got {lam}")
    return -lam * dy


# losses -------------------------------------------------------------------

def sigmoid_xent(logits, targets):
    """Mean sigmoid cross-entropy over all B*C entries and its gradient."""
    z = np.asarray(logits, dtype=DTYPE)
    t = np.asarray(targets, dtype=DTYPE)
    if z.shape != t.shape:
        raise DimensionError(f"logits {z.shape} vs targets {t.shape}")
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    return float(per.sum() / n), (expit(z) - t) / n


def triplet_ranking_loss(anchor, positive, negative, margin: float):
    """Hinge on squared euclidean distances, averaged over the batch."""
    if margin <= 0:
        raise ValueError("margin must be > 0")
    if not anchor.shape == positive.shape == negative.shape:
        raise DimensionError(
            f"triplet shapes differ: {anchor.shape}, {positive.shape}, {negative.shape}")
    dap = anchor - positive
    dan = anchor - negative
    hinge = margin + (dap * dap).sum(axis=1) - (dan * dan).sum(axis=1)
    active = (hinge > 0)[:, None] / anchor.shape[0]
    loss = float(np.maximum(hinge, 0.0).mean())
    da = 2.0 * (dap - dan) * active
    dp = -2.0 * dap * active
    dn = 2.0 * dan * active
    return loss, da, dp, dn
