"""Pooled local-linear quantile estimation within groups.

All members of a group share one coefficient path while keeping their own
local intercept and intercept-derivative, so a group fit at z solves one
weighted quantile regression with a shared slope block and per-member
2-parameter blocks. Pointwise confidence intervals come from a plug-in
sandwich variance: an outer matrix estimated from kernel-smoothed
conditional residual densities and an inner score variance proportional to
tau(1 - tau), with bias handled by undersmoothing or jackknife averaging
rather than explicit curvature estimation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.stats import norm

from . import qrcore
from ._design import member_columns, shared_columns
from .errors import InferenceUnavailableError, LocalDesignError
from .kernels import MIN_WEIGHT_RATIO, KernelSpec, kernel_moments, kernel_profile

__all__ = [
    "GroupFit",
    "SandwichPieces",
    "fit_group",
    "estimate_sandwich",
    "score_variance",
    "confidence_intervals",
]

#: Undersmoothing shrink exponent: h -> h * (group size * T) ** UNDERSMOOTH_EXP.
UNDERSMOOTH_EXP = -1.0 / 20.0


@dataclass
class GroupFit:
    """Group-specific coefficient path with per-member intercept paths."""

    group_id: int
    members: tuple
    eval_points: np.ndarray
    gamma: np.ndarray         # (P, d)
    gamma_deriv: np.ndarray   # (P, d)
    alphas: np.ndarray        # (m, P)
    alpha_derivs: np.ndarray  # (m, P)
    bandwidth_h1: float
    tau: float
    family: str = "gaussian"
    ci_lower: Optional[np.ndarray] = None
    ci_upper: Optional[np.ndarray] = None

    @property
    def dim(self):
        return self.gamma.shape[1]

    @property
    def n_members(self):
        return len(self.members)

    def gamma_at(self, z):
        z = np.atleast_1d(np.asarray(z, dtype=float))
        pos = np.searchsorted(self.eval_points, z)
        pos = np.clip(pos, 0, len(self.eval_points) - 1)
        if not np.allclose(self.eval_points[pos], z, atol=1e-12):
            raise KeyError("requested z not among the evaluation points")
        return self.gamma[pos]

    def to_csv(self, path):
        d = self.dim
        has_ci = self.ci_lower is not None
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            header = (
                ["z"]
                + [f"gamma_{j + 1}" for j in range(d)]
                + [f"deriv_{j + 1}" for j in range(d)]
                + [f"ci_lo_{j + 1}" for j in range(d)]
                + [f"ci_hi_{j + 1}" for j in range(d)]
            )
            writer.writerow(header)
            for k in range(len(self.eval_points)):
                row = [repr(float(self.eval_points[k]))]
                row += [repr(float(v)) for v in self.gamma[k]]
                row += [repr(float(v)) for v in self.gamma_deriv[k]]
                if has_ci:
                    row += [repr(float(v)) for v in self.ci_lower[k]]
                    row += [repr(float(v)) for v in self.ci_upper[k]]
                else:
                    row += [""] * (2 * d)
                writer.writerow(row)


@dataclass
class SandwichPieces:
    """Plug-in variance ingredients at one evaluation point."""

    z: float
    omega_i: np.ndarray       # (m, d+1, d+1) per-member outer matrices
    omega_group: np.ndarray   # (d, d) intercept-projected average
    lambda_group: np.ndarray  # (d, d) score variance
    sigma_group: np.ndarray   # (d, d) sandwich
    nu0: float


def _resolve_members(ds, members):
    members = tuple(int(i) for i in members)
    if len(members) == 0:
        raise ValueError("members must be nonempty")
    if len(set(members)) != len(members):
        raise ValueError("members must be distinct")
    if min(members) < 0 or max(members) >= ds.n_subjects:
        raise IndexError("member index out of range")
    return members


def fit_group(ds, members, tau, kernel, eval_points=None, group_id=1,
              tol=1e-8, max_iter=200):
    """Fit the shared coefficient path of one group of subjects.

    eval_points defaults to the shared observed index values (sorted,
    multiplicity kept). Raises LocalDesignError when the pooled local
    sample at some point cannot identify the 2d + 2m parameters.
    """
    members = _resolve_members(ds, members)
    if not isinstance(kernel, KernelSpec):
        kernel = KernelSpec(bandwidth=float(kernel))
    zs = ds.shared_index()
    if zs is None:
        raise ValueError("group fitting requires a shared index")
    if not ds.index_in_unit_interval():
        raise ValueError(
            "index values fall outside [0, 1]; normalize_index the dataset first"
        )
    if eval_points is None:
        pts = np.sort(zs)
    else:
        pts = np.sort(np.asarray(eval_points, dtype=float))
        if (pts < 0).any() or (pts > 1).any():
            raise ValueError("evaluation points must lie within [0, 1]")
    uniq, inverse = np.unique(pts, return_inverse=True)

    m = len(members)
    d = ds.dim_x
    T = ds.n_times
    h = kernel.bandwidth

    u = (zs[None, :] - uniq[:, None]) / h  # (P, T)
    w = kernel_profile(kernel.family, u)
    if kernel.truncation_radius is not None:
        w = np.where(np.abs(u) <= kernel.truncation_radius, w, 0.0)
    counts = (w >= MIN_WEIGHT_RATIO * kernel_profile(kernel.family, 0.0)).sum(axis=1)
    short = m * counts < 2 * d + 2 * m
    if short.any():
        raise LocalDesignError(
            f"group {group_id}: pooled local sample too small at "
            f"z={np.round(uniq[short], 6).tolist()}",
            z=float(uniq[short][0]),
        )

    x = ds.x[list(members)]               # (m, T, d)
    y = ds.y[list(members)]               # (m, T)

    P = uniq.size
    gamma = np.empty((P, d))
    gamma_deriv = np.empty((P, d))
    alphas = np.empty((m, P))
    alpha_derivs = np.empty((m, P))
    chunk = max(1, int(8e6 / (m * T * 2 * d)))
    for lo in range(0, P, chunk):
        hi = min(P, lo + chunk)
        shared = shared_columns(x[None], u[lo:hi, None, :])   # (b, m, T, 2d)
        mem = member_columns(u[lo:hi])                        # (b, T, 2)
        resp = np.broadcast_to(y[None], (hi - lo, m, T))
        sc, mc, _, _, _ = qrcore.solve_pooled_batch(
            shared, mem, resp, w[lo:hi], tau, tol=tol, max_iter=max_iter
        )
        gamma[lo:hi] = sc[:, :d]
        gamma_deriv[lo:hi] = sc[:, d:] / h
        alphas[:, lo:hi] = mc[:, :, 0].T
        alpha_derivs[:, lo:hi] = mc[:, :, 1].T / h

    return GroupFit(
        group_id=int(group_id),
        members=members,
        eval_points=pts,
        gamma=gamma[inverse],
        gamma_deriv=gamma_deriv[inverse],
        alphas=alphas[:, inverse],
        alpha_derivs=alpha_derivs[:, inverse],
        bandwidth_h1=h,
        tau=tau,
        family=kernel.family,
    )


def _rot(values, n):
    sd = np.asarray(values).std()
    return 1.06 * max(sd, 1e-12) * n ** (-0.2)


def _residuals(ds, fit, prelim_paths, use_postgroup_residuals):
    """Residuals e_it = Y - X'beta_i(Z_t) - alpha_i(Z_t) for fit members."""
    zs = ds.shared_index()
    sorted_z = np.sort(zs)
    order = np.argsort(zs)
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)  # observed t -> position in sorted grid
    out = np.empty((fit.n_members, ds.n_times))
    for row, i in enumerate(fit.members):
        source = fit if use_postgroup_residuals else None
        if source is None:
            if prelim_paths is None:
                raise ValueError(
                    "prelim_paths is required unless use_postgroup_residuals=True"
                )
            source = prelim_paths[i]
        if not np.array_equal(source.eval_points, sorted_z):
            raise ValueError(
                "residual construction needs paths evaluated at the observed "
                "index values"
            )
        if use_postgroup_residuals:
            beta = fit.gamma[rank]
            alpha = fit.alphas[row][rank]
        else:
            beta = source.beta[rank]
            alpha = source.alpha[rank]
        out[row] = ds.y[i] - np.sum(ds.x[i] * beta, axis=1) - alpha
    return out


def _conditional_density_at_zero(x_i, z, resid_i, b1):
    """Kernel estimate of the residual density at zero given (X_it, Z_t).

    Product-kernel Nadaraya-Watson ratio evaluated at every observed
    (X_it, Z_t); b1 is one bandwidth per smoothing coordinate
    (residual, x_1..x_d, z).
    """
    T, d = x_i.shape
    b_e, b_x, b_z = b1[0], b1[1:1 + d], b1[1 + d]
    kx = np.ones((T, T))
    for j in range(d):
        kx *= kernel_profile("gaussian", (x_i[None, :, j] - x_i[:, None, j]) / b_x[j])
    kx *= kernel_profile("gaussian", (z[None, :] - z[:, None]) / b_z)
    ke = kernel_profile("gaussian", resid_i / b_e)
    num = kx @ ke
    den = b_e * kx.sum(axis=1)
    return np.where(den > 0, num / np.maximum(den, 1e-300), 0.0)


def _omega_stack(ds, fit, eval_points, prelim_paths, use_postgroup_residuals,
                 b1, b2):
    """Per-member outer matrices at every evaluation point.

    Returns (P, m, d+1, d+1) kernel-weighted averages of
    f_ie(0|X,Z) (1,X)(1,X)' scaled by the index density estimate.
    """
    zs = ds.shared_index()
    T, d = ds.n_times, ds.dim_x
    resid = _residuals(ds, fit, prelim_paths, use_postgroup_residuals)
    b2 = _rot(zs, T) if b2 is None else float(b2)

    eval_points = np.asarray(eval_points, dtype=float)
    kz = kernel_profile("gaussian", (zs[None, :] - eval_points[:, None]) / b2)
    kz_sum = np.maximum(kz.sum(axis=1), 1e-300)
    f_z = kz.sum(axis=1) / (T * b2)

    out = np.empty((eval_points.size, fit.n_members, d + 1, d + 1))
    for row, i in enumerate(fit.members):
        x_i = ds.x[i]
        if b1 is None:
            bw = np.array(
                [_rot(resid[row], T)]
                + [_rot(x_i[:, j], T) for j in range(d)]
                + [_rot(zs, T)]
            )
        else:
            bw = np.full(d + 2, float(b1))
        dens = _conditional_density_at_zero(x_i, zs, resid[row], bw)  # (T,)
        design = np.concatenate([np.ones((T, 1)), x_i], axis=1)      # (T, d+1)
        outer = design[:, :, None] * design[:, None, :]              # (T, d+1, d+1)
        weighted = np.tensordot(kz * dens[None, :], outer, axes=(1, 0))
        out[:, row] = weighted / kz_sum[:, None, None]
    return out * f_z[:, None, None, None]


def score_variance(x_group, cross, tau):
    """Score variance tau(1-tau) * average over members of the sample
    covariance of X_it - cross_i (covariance taken over t)."""
    x_group = np.asarray(x_group, dtype=float)
    cross = np.asarray(cross, dtype=float)
    m, _, d = x_group.shape
    lam = np.zeros((d, d))
    for row in range(m):
        v = x_group[row] - cross[row][None, :]
        if d > 1:
            lam += np.cov(v.T, ddof=1)
        else:
            lam += np.array([[np.var(v[:, 0], ddof=1)]])
    return tau * (1.0 - tau) * lam / m


def _sigma_curves(ds, fit, eval_points, tau, prelim_paths,
                  use_postgroup_residuals, b1, b2):
    """Sandwich variance at each evaluation point; NaN rows mark failures."""
    d = ds.dim_x
    omega = _omega_stack(
        ds, fit, eval_points, prelim_paths, use_postgroup_residuals, b1, b2
    )
    nu0 = kernel_moments(KernelSpec(fit.family, fit.bandwidth_h1))[1]
    P = len(eval_points)
    sigma = np.full((P, d, d), np.nan)
    pieces_percol = []
    x_group = ds.x[list(fit.members)]
    for k in range(P):
        om = omega[k]                       # (m, d+1, d+1)
        w_alpha = om[:, 0, 0]
        if (np.abs(w_alpha) < 1e-12).any():
            pieces_percol.append(None)
            continue
        cross = om[:, 1:, 0] / w_alpha[:, None]          # (m, d)
        gamma_block = om[:, 1:, 1:]
        corrected = gamma_block - cross[:, :, None] * om[:, None, 0, 1:]
        omega_group = corrected.mean(axis=0)

        lam = score_variance(x_group, cross, tau)

        try:
            inv = np.linalg.inv(omega_group)
        except np.linalg.LinAlgError:
            pieces_percol.append(None)
            continue
        sig = inv @ (nu0 * lam) @ inv
        sig = 0.5 * (sig + sig.T)
        sigma[k] = sig
        pieces_percol.append(
            SandwichPieces(
                z=float(eval_points[k]),
                omega_i=om,
                omega_group=omega_group,
                lambda_group=lam,
                sigma_group=sig,
                nu0=nu0,
            )
        )
    return sigma, pieces_percol


def estimate_sandwich(ds, fit, z, tau=None, b1=None, b2=None, prelim_paths=None,
                      use_postgroup_residuals=False):
    """Variance ingredients of the group coefficient estimate at one z.

    Residuals default to the preliminary per-subject fits (prelim_paths);
    set use_postgroup_residuals=True to rebuild them from the group fit
    itself. b1/b2 override the rule-of-thumb smoothing bandwidths.
    """
    tau = fit.tau if tau is None else float(tau)
    _, pieces = _sigma_curves(
        ds, fit, np.atleast_1d(float(z)), tau, prelim_paths,
        use_postgroup_residuals, b1, b2,
    )
    if pieces[0] is None:
        raise InferenceUnavailableError(
            f"outer matrix numerically singular at z={z}", z=float(z)
        )
    return pieces[0]


def confidence_intervals(ds, fit, alpha=0.05, undersmooth=True, jackknife=False,
                         prelim_paths=None, use_postgroup_residuals=False,
                         b1=None, b2=None, tol=1e-8, max_iter=200):
    """Attach pointwise coefficient intervals to a group fit.

    With undersmoothing (default) the path is refitted at
    h1 * (mT)^(-1/20) so the smoothing bias is negligible against the
    standard error; with jackknife the path is replaced by
    2 * gamma_{h/sqrt(2)} - gamma_h. Points where the variance estimate is
    unavailable get NaN bounds. Returns a new GroupFit.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    work = fit
    if undersmooth:
        h_new = fit.bandwidth_h1 * (fit.n_members * ds.n_times) ** UNDERSMOOTH_EXP
        work = fit_group(
            ds, fit.members, fit.tau, KernelSpec(fit.family, h_new),
            eval_points=fit.eval_points, group_id=fit.group_id,
            tol=tol, max_iter=max_iter,
        )
    if jackknife:
        half = fit_group(
            ds, work.members, work.tau,
            KernelSpec(work.family, work.bandwidth_h1 / np.sqrt(2.0)),
            eval_points=work.eval_points, group_id=work.group_id,
            tol=tol, max_iter=max_iter,
        )
        work = replace(work, gamma=2.0 * half.gamma - work.gamma)

    uniq, inverse = np.unique(work.eval_points, return_inverse=True)
    sigma, _ = _sigma_curves(
        ds, work, uniq, work.tau, prelim_paths, use_postgroup_residuals, b1, b2
    )
    sigma = sigma[inverse]
    crit = norm.ppf(1.0 - alpha / 2.0)
    scale = work.n_members * ds.n_times * work.bandwidth_h1
    diag = np.einsum("kii->ki", sigma)
    half_width = crit * np.sqrt(np.maximum(diag, 0.0) / scale)
    return replace(
        work,
        ci_lower=work.gamma - half_width,
        ci_upper=work.gamma + half_width,
    )
