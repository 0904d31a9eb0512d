"""Latent grouping uniformly over quantile levels, for linear models.

Instead of comparing coefficient paths over an observed index at one
quantile, subjects are compared through their linear quantile-regression
coefficient processes tau -> beta_i(tau) on a trimmed grid; distances and
deviations integrate over tau by the trapezoid rule and feed the same
clustering and ratio machinery as the functional-coefficient pipeline.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import qrcore
from .errors import AlignmentError
from .grouping import (
    DistanceMatrix,
    GroupNumberSelection,
    GroupStructure,
    agglomerate,
    cut_dendrogram,
    ratio_rule,
)

__all__ = [
    "TauPath",
    "fit_linear_per_tau",
    "uniform_distance_matrix",
    "uniform_deviation",
    "select_group_number_uniform",
]


@dataclass
class TauPath:
    """Linear QR coefficients of one subject along a quantile grid."""

    tau_grid: np.ndarray
    beta_star: np.ndarray   # (G, d)
    alpha_star: np.ndarray  # (G,)

    @property
    def dim(self):
        return self.beta_star.shape[1]

    def to_csv(self, path):
        d = self.dim
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tau"] + [f"beta_{j + 1}" for j in range(d)] + ["alpha"])
            for k, tau in enumerate(self.tau_grid):
                writer.writerow(
                    [repr(float(tau))]
                    + [repr(float(v)) for v in self.beta_star[k]]
                    + [repr(float(self.alpha_star[k]))]
                )


def fit_linear_per_tau(ds, spec, tol=1e-8, max_iter=200):
    """Plain linear quantile regression per subject at every grid level."""
    if spec.tau_grid is None:
        raise ValueError("spec.tau_grid is required for the uniform pathway")
    grid = np.asarray(spec.tau_grid, dtype=float)
    n, T, d = ds.n_subjects, ds.n_times, ds.dim_x

    for i in range(n):
        design = np.concatenate([np.ones((T, 1)), ds.x[i]], axis=1)
        eigs = np.linalg.eigvalsh(design.T @ design)
        if eigs[0] <= 1e-12 * max(eigs[-1], 1e-300):
            raise ValueError(
                f"rank-deficient regression design for subject "
                f"{ds.subject_labels[i]!r}"
            )

    G = grid.size
    designs = np.empty((n * G, T, d + 1))
    resps = np.empty((n * G, T))
    taus = np.empty(n * G)
    for i in range(n):
        block = np.concatenate([np.ones((T, 1)), ds.x[i]], axis=1)
        designs[i * G:(i + 1) * G] = block[None]
        resps[i * G:(i + 1) * G] = ds.y[i][None]
        taus[i * G:(i + 1) * G] = grid
    coef, _, _, _, _ = qrcore.solve_batch(
        designs, resps, np.ones((n * G, T)), taus, tol=tol, max_iter=max_iter
    )
    coef = coef.reshape(n, G, d + 1)
    return [
        TauPath(tau_grid=grid.copy(), beta_star=coef[i, :, 1:],
                alpha_star=coef[i, :, 0])
        for i in range(n)
    ]


def _aligned_tau_betas(paths):
    if not paths:
        raise AlignmentError("need at least one tau path")
    ref = paths[0]
    for p in paths[1:]:
        if p.beta_star.shape != ref.beta_star.shape or not np.array_equal(
            p.tau_grid, ref.tau_grid
        ):
            raise AlignmentError("tau paths must share the grid and dimension")
    return np.stack([p.beta_star for p in paths]), ref.tau_grid


def uniform_distance_matrix(paths):
    """Pairwise integral of the coefficient gap over the tau grid."""
    betas, grid = _aligned_tau_betas(paths)
    n = betas.shape[0]
    values = np.zeros((n, n))
    for j in range(n):
        diff = betas[j + 1:] - betas[j][None]
        if diff.size:
            gaps = np.linalg.norm(diff, axis=2)           # (n-j-1, G)
            values[j, j + 1:] = np.trapezoid(gaps, grid, axis=1)
            values[j + 1:, j] = values[j, j + 1:]
    return DistanceMatrix(values)


def uniform_deviation(paths, gs):
    """Average integrated deviation from the within-group mean process."""
    betas, grid = _aligned_tau_betas(paths)
    if gs.n_subjects != betas.shape[0]:
        raise AlignmentError("partition and paths disagree on N")
    total = 0.0
    for g in range(1, gs.n_groups + 1):
        idx = gs.members(g)
        mean = betas[idx].mean(axis=0)
        gaps = np.linalg.norm(betas[idx] - mean[None], axis=2)  # (n_g, G)
        total += np.trapezoid(gaps, grid, axis=1).sum() / idx.size
    return total / gs.n_groups


def select_group_number_uniform(paths, r_max=5, omega=("rel", 0.01)):
    """Group-count selection with the tau-integral deviation score."""
    if r_max < 2:
        raise ValueError("r_max must be at least 2")
    dm = uniform_distance_matrix(paths)
    full = agglomerate(dm, 1)
    n = dm.n_subjects
    r_max = min(r_max, n)
    scores = np.array([
        uniform_deviation(
            paths, GroupStructure(cut_dendrogram(full.merge_history, n, r))
        )
        for r in range(1, r_max + 1)
    ])

    if isinstance(omega, (int, float)):
        threshold = float(omega)
    else:
        kind, value = omega
        if kind == "rel":
            threshold = float(value) * scores[0]
        elif kind == "abs":
            threshold = float(value)
        else:
            raise ValueError("omega must be ('rel', f), ('abs', v) or a number")

    if scores[0] == 0.0:
        ratios = np.ones(r_max)
        return GroupNumberSelection(1, scores, scores.copy(), ratios, True)
    r_hat, thresholded, ratios = ratio_rule(scores, threshold)
    return GroupNumberSelection(r_hat, scores, thresholded, ratios, False)
