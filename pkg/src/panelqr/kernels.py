"""Kernel families, weight evaluation and cross-validated bandwidths.

Kernels here are weight profiles K(u) evaluated at u = (Z - z)/h without a
1/h normalisation; the quantile objectives only need relative weights.
Bandwidth selection scores each candidate by the held-out check loss of
local-linear refits, either subject by subject or pooled across a group
with per-subject intercepts, holding out whole time slices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import qrcore
from ._design import fold_labels, local_columns, member_columns, shared_columns
from .errors import BandwidthSelectionError

__all__ = [
    "KernelSpec",
    "kernel_profile",
    "kernel_weight",
    "kernel_moments",
    "rot_bandwidth",
    "default_bandwidth_grid",
    "select_bandwidth_cv",
]

KERNEL_FAMILIES = ("gaussian", "epanechnikov")

#: Observations with kernel weight below MIN_WEIGHT_RATIO * K(0) do not
#: count toward the local effective sample size.
MIN_WEIGHT_RATIO = 1e-8

_GRID_FACTORS = (0.5, 0.75, 1.0, 1.5, 2.0)
_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class KernelSpec:
    """A kernel family with bandwidth and optional hard truncation (in u)."""

    family: str = "gaussian"
    bandwidth: float = 0.1
    truncation_radius: Optional[float] = None

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(
                f"unknown kernel family {self.family!r}; choose from {KERNEL_FAMILIES}"
            )
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if self.truncation_radius is not None and not self.truncation_radius > 0:
            raise ValueError("truncation_radius must be positive when set")

    def with_bandwidth(self, h):
        return KernelSpec(self.family, float(h), self.truncation_radius)


def kernel_profile(family, u):
    """Evaluate the kernel density profile K(u)."""
    u = np.asarray(u, dtype=float)
    if family == "gaussian":
        return np.exp(-0.5 * u * u) / _SQRT_2PI
    if family == "epanechnikov":
        return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
    raise ValueError(f"unknown kernel family {family!r}")


def kernel_weight(spec, z_t, z):
    """Weight K((z_t - z)/h), zero beyond the truncation radius if set."""
    u = (np.asarray(z_t, dtype=float) - np.asarray(z, dtype=float)) / spec.bandwidth
    w = kernel_profile(spec.family, u)
    if spec.truncation_radius is not None:
        w = np.where(np.abs(u) <= spec.truncation_radius, w, 0.0)
    return w


def kernel_moments(spec):
    """Closed-form (mu2, nu0) = (int u^2 K, int K^2) for the family."""
    if spec.family == "gaussian":
        return 1.0, 1.0 / (2.0 * np.sqrt(np.pi))
    return 0.2, 0.6


def rot_bandwidth(z_values, n_times=None):
    """Rule-of-thumb anchor 1.06 * sd(Z) * T^(-1/5)."""
    z = np.asarray(z_values, dtype=float).ravel()
    n = z.size if n_times is None else n_times
    sd = z.std()
    if sd <= 0:
        raise ValueError("index values are constant; no bandwidth scale")
    return 1.06 * sd * n ** (-0.2)


def default_bandwidth_grid(z_values, n_times=None):
    """Candidate grid {0.5, 0.75, 1, 1.5, 2} x rule-of-thumb anchor."""
    h0 = rot_bandwidth(z_values, n_times)
    return np.array([f * h0 for f in _GRID_FACTORS])


def _pick(grid, scores):
    """Smallest score wins; ties and near-ties break toward larger h."""
    finite = np.isfinite(scores)
    if not finite.any():
        return None
    order = np.argsort(grid)
    g, s = np.asarray(grid)[order], np.asarray(scores)[order]
    best = np.inf
    pick = None
    for h, sc in zip(g, s):
        if np.isfinite(sc) and sc <= best:
            best, pick = sc, h
    return float(pick)


def _cv_weights(z_out, z_in, h, family, trunc, in_train):
    u = (z_in[None, :] - z_out[:, None]) / h
    kw = kernel_profile(family, u)
    if trunc is not None:
        kw = np.where(np.abs(u) <= trunc, kw, 0.0)
    return np.where(in_train, kw, 0.0)


def _score_subjects(y, x, z, tau, family, trunc, h, in_train, tol, max_iter):
    """Held-out check loss per subject for one candidate bandwidth.

    y : (N, T), x : (N, T, d), z : (T,). in_train : (T_out, T) bool.
    Returns (N,) scores; inf when some evaluation point lacks enough
    effectively-weighted observations.
    """
    N, T, d = x.shape
    p = 2 * d + 2
    wmat = _cv_weights(z, z, h, family, trunc, in_train)
    k0 = kernel_profile(family, 0.0)
    counts = (wmat >= MIN_WEIGHT_RATIO * k0).sum(axis=1)
    if (counts < p).any():
        return np.full(N, np.inf)

    u = (z[None, :] - z[:, None]) / h  # (T_out, T)
    scores = np.zeros(N)
    chunk = max(1, int(4e6 / (T * T * p)))
    for lo in range(0, N, chunk):
        hi = min(N, lo + chunk)
        c = hi - lo
        design = local_columns(x[lo:hi, None], u[None, :, :])  # (c, T_out, T, p)
        design = design.reshape(c * T, T, p)
        resp = np.broadcast_to(y[lo:hi, None, :], (c, T, T)).reshape(c * T, T)
        wrep = np.broadcast_to(wmat[None], (c, T, T)).reshape(c * T, T)
        coef, _, _, _, _ = qrcore.solve_batch(
            design, resp, wrep, tau, tol=tol, max_iter=max_iter
        )
        coef = coef.reshape(c, T, p)
        pred = coef[:, :, 0] + np.sum(coef[:, :, 1:1 + d] * x[lo:hi], axis=2)
        loss = qrcore.check_loss(y[lo:hi] - pred, tau)
        scores[lo:hi] = loss.sum(axis=1)
    return scores


def _score_pooled(y, x, z, tau, family, trunc, h, in_train, tol, max_iter):
    """Held-out check loss of the pooled fit for one candidate bandwidth."""
    m, T, d = x.shape
    wmat = _cv_weights(z, z, h, family, trunc, in_train)
    k0 = kernel_profile(family, 0.0)
    counts = (wmat >= MIN_WEIGHT_RATIO * k0).sum(axis=1)
    if (m * counts < 2 * d + 2 * m).any() or (counts < 2).any():
        return np.inf

    u = (z[None, :] - z[:, None]) / h
    total = 0.0
    chunk = max(1, int(8e6 / (m * T * 2 * d)))
    for lo in range(0, T, chunk):
        hi = min(T, lo + chunk)
        b = hi - lo
        shared = shared_columns(x[None], u[lo:hi, None, :])  # (b, m, T, 2d)
        mem = member_columns(u[lo:hi])                       # (b, T, 2)
        resp = np.broadcast_to(y[None], (b, m, T))
        sc, mc, _, _, _ = qrcore.solve_pooled_batch(
            shared, mem, resp, wmat[lo:hi], tau, tol=tol, max_iter=max_iter
        )
        pred = np.einsum("mbd,bd->mb", x[:, lo:hi, :], sc[:, :d])
        pred += mc[:, :, 0].T
        loss = qrcore.check_loss(y[:, lo:hi] - pred, tau)
        total += float(loss.sum())
    return total


def select_bandwidth_cv(ds, tau, family="gaussian", grid=None, mode="per_subject",
                        folds=None, members=None, truncation_radius=None,
                        tol=1e-6, max_iter=60):
    """Choose a bandwidth by cross-validated held-out check loss.

    Fits the local-linear estimator with each fold of time points held out
    and scores sum of rho_tau at the held-out observations; the candidate
    with the smallest score wins, ties broken toward the larger bandwidth.

    mode='per_subject' scores every subject separately and returns one
    bandwidth per subject (restricted to `members` when given);
    mode='pooled' scores the group fit with per-subject intercepts, holding
    out whole time slices, and returns a single bandwidth.

    folds defaults to min(T, 20) contiguous time blocks; folds=T is exact
    leave-one-out.
    """
    if mode not in ("per_subject", "pooled"):
        raise ValueError("mode must be 'per_subject' or 'pooled'")
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    T = ds.n_times
    if folds is None:
        folds = min(T, 20)
    if not 2 <= folds <= T:
        raise ValueError("folds must lie in [2, T]")
    if members is None:
        members = np.arange(ds.n_subjects)
    else:
        members = np.asarray(members, dtype=int)

    zs = ds.shared_index()
    if grid is None:
        grid = default_bandwidth_grid(zs if zs is not None else ds.index, T)
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0 or (grid <= 0).any():
        raise ValueError("candidate grid must be nonempty and positive")

    fold = fold_labels(T, folds)
    in_train = fold[None, :] != fold[:, None]

    x = ds.x[members]
    y = ds.y[members]

    if mode == "pooled":
        if zs is None:
            raise ValueError("pooled cross-validation needs a shared index")
        scores = np.array([
            _score_pooled(y, x, zs, tau, family, truncation_radius, h,
                          in_train, tol, max_iter)
            for h in grid
        ])
        h = _pick(grid, scores)
        if h is None:
            raise BandwidthSelectionError(
                "every candidate bandwidth produced an unusable pooled fit"
            )
        return h

    if zs is not None:
        scores = np.stack([
            _score_subjects(y, x, zs, tau, family, truncation_radius, h,
                            in_train, tol, max_iter)
            for h in grid
        ])  # (G, N)
    else:
        cols = []
        for row, i in enumerate(members):
            zi = ds.index[i]
            cols.append(np.concatenate([
                _score_subjects(y[row:row + 1], x[row:row + 1], zi, tau, family,
                                truncation_radius, h, in_train, tol, max_iter)
                for h in grid
            ]))
        scores = np.stack(cols, axis=1)

    chosen = np.empty(members.size)
    for j in range(members.size):
        h = _pick(grid, scores[:, j])
        if h is None:
            raise BandwidthSelectionError(
                "every candidate bandwidth failed for subject "
                f"{ds.subject_labels[members[j]]!r}"
            )
        chosen[j] = h
    return chosen
