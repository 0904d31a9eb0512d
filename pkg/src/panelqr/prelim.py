"""Per-subject local-linear quantile estimation of coefficient paths.

At every evaluation point z the subject's observations are weighted by
K((Z_t - z)/h) and a linear expansion in (Z_t - z) is fitted by weighted
quantile regression, giving the coefficient vector, its derivative, the
local intercept and the intercept derivative. Solves are batched across
(subject, evaluation point) pairs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import qrcore
from ._design import local_columns
from .errors import LocalDesignError
from .kernels import MIN_WEIGHT_RATIO, KernelSpec, kernel_profile

__all__ = ["CoefficientPath", "fit_subject", "fit_all_subjects", "plotting_grid"]


@dataclass
class CoefficientPath:
    """Functional-coefficient estimates along an increasing grid of z."""

    eval_points: np.ndarray
    beta: np.ndarray
    beta_deriv: np.ndarray
    alpha: np.ndarray
    alpha_deriv: np.ndarray
    bandwidth: float
    tau: float

    @property
    def dim(self):
        return self.beta.shape[1]

    def beta_at(self, z):
        """Beta rows at requested z values (must be present in the grid)."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        pos = np.searchsorted(self.eval_points, z)
        pos = np.clip(pos, 0, len(self.eval_points) - 1)
        if not np.allclose(self.eval_points[pos], z, atol=1e-12):
            raise KeyError("requested z not among the evaluation points")
        return self.beta[pos]

    def to_csv(self, path):
        d = self.dim
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["z"]
                + [f"beta_{j + 1}" for j in range(d)]
                + [f"deriv_{j + 1}" for j in range(d)]
                + ["alpha", "alpha_deriv"]
            )
            for k in range(len(self.eval_points)):
                writer.writerow(
                    [repr(float(self.eval_points[k]))]
                    + [repr(float(v)) for v in self.beta[k]]
                    + [repr(float(v)) for v in self.beta_deriv[k]]
                    + [repr(float(self.alpha[k])), repr(float(self.alpha_deriv[k]))]
                )


def plotting_grid(points=101):
    """Uniform display grid on [0, 1]; never feeds the grouping statistics."""
    return np.linspace(0.0, 1.0, points)


def _as_kernel_list(kernel, n_subjects):
    if isinstance(kernel, KernelSpec):
        return [kernel] * n_subjects
    kernels = list(kernel)
    if len(kernels) != n_subjects:
        raise ValueError("need one kernel/bandwidth per subject")
    return [
        k if isinstance(k, KernelSpec) else KernelSpec(bandwidth=float(k))
        for k in kernels
    ]


def _check_unit_interval(ds, eval_points):
    if not ds.index_in_unit_interval():
        raise ValueError(
            "index values fall outside [0, 1]; normalize_index the dataset first"
        )
    if (eval_points < 0).any() or (eval_points > 1).any():
        raise ValueError("evaluation points must lie within [0, 1]")


def _fit_rows(ds, subjects, kernels, tau, eval_points, tol, max_iter):
    """Batched local-linear solves; returns per-subject coefficient arrays."""
    d = ds.dim_x
    p = 2 * d + 2
    T = ds.n_times

    tasks = []  # (subject row, unique z values, inverse map)
    for row, i in enumerate(subjects):
        if eval_points is None:
            pts = np.sort(ds.index_for(i))
        else:
            pts = np.sort(np.asarray(eval_points, dtype=float))
        uniq, inverse = np.unique(pts, return_inverse=True)
        tasks.append((row, pts, uniq, inverse))

    failures = []
    for row, pts, uniq, _ in tasks:
        i = subjects[row]
        spec = kernels[row]
        zi = ds.index_for(i)
        u = (zi[None, :] - uniq[:, None]) / spec.bandwidth
        w = kernel_profile(spec.family, u)
        if spec.truncation_radius is not None:
            w = np.where(np.abs(u) <= spec.truncation_radius, w, 0.0)
        counts = (w >= MIN_WEIGHT_RATIO * kernel_profile(spec.family, 0.0)).sum(axis=1)
        short = counts < p
        if short.any():
            failures.append((ds.subject_labels[i], uniq[short]))
    if failures:
        where = "; ".join(
            f"subject {label!r} at z={np.round(zs, 6).tolist()}"
            for label, zs in failures
        )
        raise LocalDesignError(
            f"fewer than {p} effectively-weighted observations: {where}",
            z=failures[0][1][0],
            subjects=[label for label, _ in failures],
        )

    results = {}
    pending_design = []
    pending_resp = []
    pending_w = []
    pending_key = []
    budget = max(1, int(6e6 / (T * p)))

    def flush():
        if not pending_design:
            return
        design = np.concatenate(pending_design, axis=0)
        resp = np.concatenate(pending_resp, axis=0)
        wts = np.concatenate(pending_w, axis=0)
        coefs, _, _, _, _ = qrcore.solve_batch(
            design, resp, wts, tau, tol=tol, max_iter=max_iter
        )
        for (row, sl) in pending_key:
            results.setdefault(row, []).append(coefs[sl])
        pending_design.clear()
        pending_resp.clear()
        pending_w.clear()
        pending_key.clear()

    offset = 0
    for row, pts, uniq, _ in tasks:
        i = subjects[row]
        spec = kernels[row]
        zi = ds.index_for(i)
        xi = ds.x[i]
        yi = ds.y[i]
        for lo in range(0, uniq.size, budget):
            hi = min(uniq.size, lo + budget)
            u = (zi[None, :] - uniq[lo:hi, None]) / spec.bandwidth
            w = kernel_profile(spec.family, u)
            if spec.truncation_radius is not None:
                w = np.where(np.abs(u) <= spec.truncation_radius, w, 0.0)
            design = local_columns(xi[None], u)  # (b, T, p)
            pending_design.append(design)
            pending_resp.append(np.broadcast_to(yi, (hi - lo, T)))
            pending_w.append(w)
            pending_key.append((row, slice(offset, offset + hi - lo)))
            offset += hi - lo
            if offset >= budget:
                flush()
                offset = 0
    flush()

    paths = []
    for row, pts, uniq, inverse in tasks:
        spec = kernels[row]
        coefs = np.concatenate(results[row], axis=0)[inverse]
        h = spec.bandwidth
        paths.append(
            CoefficientPath(
                eval_points=pts,
                beta=coefs[:, 1:1 + d],
                beta_deriv=coefs[:, 2 + d:] / h,
                alpha=coefs[:, 0],
                alpha_deriv=coefs[:, 1 + d] / h,
                bandwidth=h,
                tau=tau,
            )
        )
    return paths


def fit_subject(ds, subject, tau, kernel, eval_points=None, tol=1e-8, max_iter=200):
    """Local-linear quantile path for one subject.

    eval_points defaults to the subject's observed index values (sorted,
    multiplicity kept). Raises LocalDesignError when fewer than 2(d+1)
    observations carry non-negligible kernel weight at some point.
    """
    if not 0 <= subject < ds.n_subjects:
        raise IndexError(f"subject {subject} out of range")
    kernels = _as_kernel_list(kernel, 1)
    pts = None if eval_points is None else np.asarray(eval_points, dtype=float)
    _check_unit_interval(ds, pts if pts is not None else ds.index_for(subject))
    return _fit_rows(ds, [subject], kernels, tau, pts, tol, max_iter)[0]


def fit_all_subjects(ds, tau, kernel, eval_points=None, tol=1e-8, max_iter=200):
    """Independent local-linear paths for every subject, in subject order.

    kernel may be a single KernelSpec, a list of per-subject specs, or a
    per-subject array of bandwidths (Gaussian family assumed).
    """
    kernels = _as_kernel_list(kernel, ds.n_subjects)
    pts = None if eval_points is None else np.asarray(eval_points, dtype=float)
    _check_unit_interval(ds, pts if pts is not None else ds.index)
    return _fit_rows(ds, list(range(ds.n_subjects)), kernels, tau, pts, tol, max_iter)
