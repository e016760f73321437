"""Differentiable multi-class Jaccard surrogate loss.

Rows are per-voxel class probabilities p and one-hot ground truth y; the
batch is every voxel of every image, pooled (global-sum reduction).  With
p* the probability of the true class,

    J2 = 1 - sum_i p_i* / (N + sum_i(sum_c p_ic^2 - p_i*))

lies in [0, 1]: 0 is a perfect replication of the ground truth, 1 a fully
uncorrelated prediction.
"""

from __future__ import annotations

import numpy as np

ROW_SUM_TOL = 1e-4


def one_hot(labels, num_classes, dtype=np.float32):
    """One-hot encode integer labels along a trailing class axis."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels outside [0, {num_classes})")
    out = np.zeros(labels.shape + (num_classes,), dtype=dtype)
    np.put_along_axis(out, labels[..., None].astype(np.int64), 1, axis=-1)
    return out


def _as_rows(y, p):
    y, p = np.asarray(y), np.asarray(p)
    if y.shape != p.shape:
        raise ValueError(f"shape mismatch: ground truth {y.shape} vs probabilities {p.shape}")
    c = p.shape[-1]
    return y.reshape(-1, c), p.reshape(-1, c)


def _check_rows(yr, pr):
    rs = pr.sum(axis=1)
    if np.abs(rs - 1.0).max() > ROW_SUM_TOL:
        raise ValueError("probability rows must sum to 1 (tolerance 1e-4)")
    ys = yr.sum(axis=1)
    if ((ys != 1) | ((yr != 0) & (yr != 1)).any(axis=1)).any():
        raise ValueError("ground truth rows must be one-hot")


def _uv(yr, pr):
    u = float((yr * pr).sum())
    v = float(yr.shape[0] + (pr * pr).sum() - u)
    return u, v


def jacc2_loss(y, p):
    """Scalar loss over all voxels of the batch."""
    yr, pr = _as_rows(y, p)
    _check_rows(yr, pr)
    u, v = _uv(yr, pr)
    return 1.0 - u / v


def jacc2_grad(y, p):
    """Exact quotient-rule gradient dJ2/dp, same shape as p."""
    yr, pr = _as_rows(y, p)
    _check_rows(yr, pr)
    u, v = _uv(yr, pr)
    g = -(yr * v - u * (2.0 * pr - yr)) / (v * v)
    return g.reshape(p.shape).astype(p.dtype, copy=False)


def jacc2_loss_and_grad(y, p):
    """Loss and gradient in one pass (shared row validation and sums)."""
    yr, pr = _as_rows(y, p)
    _check_rows(yr, pr)
    u, v = _uv(yr, pr)
    g = -(yr * v - u * (2.0 * pr - yr)) / (v * v)
    return 1.0 - u / v, g.reshape(p.shape).astype(p.dtype, copy=False)


def jacc2_parts(y, p):
    """Additive numerator/denominator contributions of a voxel batch.

    Summing parts over batches and forming 1 - sum(u)/sum(v) equals the
    loss of the pooled batch, which lets large sets be evaluated in chunks.
    """
    yr, pr = _as_rows(y, p)
    _check_rows(yr, pr)
    return _uv(yr, pr)
