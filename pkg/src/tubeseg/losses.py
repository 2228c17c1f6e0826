"""Segmentation objectives on softmax probabilities and one-hot targets.

All losses take ``probs`` as an (N, C, H, W) :class:`Tensor` (softmax
output) and ``onehot`` as an array or tensor of the same shape.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

EPS_LOG = 1e-7
EPS_RATIO = 1e-7


def one_hot(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """(N, H, W) or (H, W) integer labels -> (N, C, H, W) one-hot floats."""
    mask = np.asarray(mask)
    if mask.ndim == 2:
        mask = mask[None]
    if mask.size and (mask.min() < 0 or mask.max() >= num_classes):
        raise ValueError(f"labels outside 0..{num_classes - 1}")
    out = (mask[:, None, :, :] == np.arange(num_classes)[None, :, None, None])
    return out.astype(T.get_dtype())


def class_weights(pixel_counts) -> np.ndarray:
    """w_c = sum(x) / (C * x_c); classes with no pixels get weight 0."""
    x = np.asarray(pixel_counts, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("pixel_counts must be a non-empty vector")
    if np.any(x < 0):
        raise ValueError("pixel counts must be non-negative")
    total = x.sum()
    if total <= 0:
        raise ValueError("class_weights: every class count is zero")
    w = np.zeros_like(x)
    present = x > 0
    w[present] = total / (x.size * x[present])
    return w


def _target(onehot) -> Tensor:
    return onehot if isinstance(onehot, Tensor) else Tensor(onehot)


def _class_axes(probs: Tensor) -> tuple:
    return (0,) + tuple(range(2, probs.data.ndim))


def weighted_ce(probs: Tensor, onehot, weights=None) -> Tensor:
    """-(1/N) sum_n sum_c w_c y log(p), N = every pixel in the batch."""
    y = _target(onehot)
    c = probs.shape[1]
    if weights is None:
        weights = class_weights(y.data.sum(axis=_class_axes(probs)))
    w = np.asarray(weights, dtype=probs.dtype).reshape((1, c) + (1,) * (probs.data.ndim - 2))
    n_pixels = probs.size // c
    logp = T.log(T.clamp(probs, EPS_LOG, 1.0))
    return T.mul(T.tsum(T.mul(logp, y * w)), -1.0 / n_pixels)


def dice_loss(probs: Tensor, onehot) -> Tensor:
    """-(2/|C|) sum_c sum(p y) / (sum(p) + sum(y)); -1 for a perfect prediction."""
    y = _target(onehot)
    axes = _class_axes(probs)
    inter = T.tsum(T.mul(probs, y), axis=axes)
    denom = T.add(T.tsum(probs, axis=axes), y.data.sum(axis=axes) + EPS_RATIO)
    c = probs.shape[1]
    return T.mul(T.tsum(T.div(inter, denom)), -2.0 / c)


def dice_wce(probs: Tensor, onehot, weights=None) -> Tensor:
    return T.add(weighted_ce(probs, onehot, weights), dice_loss(probs, onehot))


def tversky(probs: Tensor, onehot, alpha: float = 0.3, beta: float = 0.7, doubled: bool = True) -> Tensor:
    """Tversky loss with false-positive weight ``alpha`` and false-negative ``beta``.

    ``doubled=True`` keeps the -2/|C| prefactor (perfect prediction -> -2);
    ``doubled=False`` uses -1/|C|, which reduces to :func:`dice_loss` at
    alpha = beta = 0.5.
    """
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    y = _target(onehot)
    axes = _class_axes(probs)
    tp = T.tsum(T.mul(probs, y), axis=axes)
    fp = T.tsum(T.mul(probs, 1.0 - y.data), axis=axes)
    fn = T.tsum(T.mul(T.sub(1.0, probs), y), axis=axes)
    denom = T.add(T.add(tp, T.mul(fp, alpha)), T.add(T.mul(fn, beta), EPS_RATIO))
    c = probs.shape[1]
    scale = -2.0 / c if doubled else -1.0 / c
    return T.mul(T.tsum(T.div(tp, denom)), scale)


def compute_loss(name: str, probs: Tensor, onehot, alpha: float = 0.3, beta: float = 0.7, weights=None, doubled: bool = True) -> Tensor:
    if name == "dice_wce":
        return dice_wce(probs, onehot, weights)
    if name == "tversky":
        return tversky(probs, onehot, alpha, beta, doubled=doubled)
    if name == "dice":
        return dice_loss(probs, onehot)
    if name == "wce":
        return weighted_ce(probs, onehot, weights)
    raise ValueError(f"unknown loss {name!r}; expected dice_wce or tversky")
