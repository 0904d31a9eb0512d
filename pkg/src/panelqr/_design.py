"""Local-linear design assembly shared by the fitting and CV modules.

Columns involving the index offset use the rescaled variable u = (Z - z)/h,
which keeps the local Gram matrices well conditioned for small bandwidths;
callers divide the matching coefficients by h to recover derivatives.
"""

from __future__ import annotations

import numpy as np


def _broadcast(x, u):
    """Broadcast covariates (..., T, d) against offsets (..., T)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    d = x.shape[-1]
    shape = np.broadcast_shapes(x.shape, u.shape + (d,))
    return np.broadcast_to(x, shape), np.broadcast_to(u[..., None], shape[:-1] + (1,))


def local_columns(x, u):
    """Full local-linear regressors [1, x, u, u*x].

    Returns (..., T, 2d + 2) with coefficient layout (intercept, slopes,
    h * intercept-derivative, h * slope-derivatives).
    """
    xb, ub = _broadcast(x, u)
    ones = np.ones(ub.shape)
    return np.concatenate([ones, xb, ub, ub * xb], axis=-1)


def shared_columns(x, u):
    """Pooled-fit shared block [x, u*x] of width 2d."""
    xb, ub = _broadcast(x, u)
    return np.concatenate([xb, ub * xb], axis=-1)


def member_columns(u):
    """Pooled-fit per-member block [1, u] of width 2."""
    u = np.asarray(u, dtype=float)[..., None]
    return np.concatenate([np.ones(u.shape), u], axis=-1)


def fold_labels(n_times, folds):
    """Assign times 0..T-1 to `folds` contiguous blocks of near-equal size."""
    return (np.arange(n_times) * folds) // n_times
