"""Exact weighted linear quantile regression via interior point.

The weighted problem

    min_theta  sum_t w_t rho_tau(y_t - x_t' theta),      w_t >= 0,

is identical to the unweighted problem on the scaled rows (w_t x_t, w_t y_t)
because the check loss is positively homogeneous; zero-weight rows are then
exactly inert. The solver runs a Mehrotra predictor-corrector primal-dual
interior-point method on the bounded-variable dual LP

    max (Wy)'g   s.t.   (WX)'g = (1 - tau) (WX)'1,   0 <= g <= 1,

whose Newton steps reduce to p x p normal equations, so thousands of small
dense local fits are cheap. Coefficients are recovered from the duals of the
equality constraints and optimality is certified by the duality gap.

`solve_batch` runs many problems of identical shape simultaneously; the
local-polynomial modules rely on it heavily. `oracle_enumerate` is an exact
combinatorial reference solver kept deliberately independent of the interior
point path.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SolveStatus",
    "WeightedQRProblem",
    "QRSolution",
    "check_loss",
    "solve",
    "solve_batch",
    "solve_pooled_batch",
    "oracle_enumerate",
]

#: Rows with weight below WEIGHT_FLOOR * max(weight) are treated as absent.
WEIGHT_FLOOR = 1e-12

_STEP_DAMPING = 0.9995


class SolveStatus(enum.Enum):
    OPTIMAL = "Optimal"
    MAX_ITERATIONS = "MaxIterations"
    DEGENERATE = "Degenerate"


def check_loss(z, tau):
    """Asymmetric absolute loss z * (tau - 1{z <= 0}); accepts arrays."""
    z = np.asarray(z, dtype=float)
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    return z * (tau - (z <= 0.0))


@dataclass(frozen=True)
class WeightedQRProblem:
    """A weighted check-loss minimisation instance.

    design rows are regressor vectors; weights are nonnegative. Problems
    with fewer strictly positive-weight rows than parameters are accepted
    but will come back with Degenerate status.
    """

    design: np.ndarray
    response: np.ndarray
    weights: np.ndarray
    tau: float

    def __post_init__(self):
        design = np.atleast_2d(np.asarray(self.design, dtype=float))
        response = np.asarray(self.response, dtype=float).ravel()
        weights = np.asarray(self.weights, dtype=float).ravel()
        object.__setattr__(self, "design", design)
        object.__setattr__(self, "response", response)
        object.__setattr__(self, "weights", weights)
        n, p = design.shape
        if n < 1 or p < 1:
            raise ValueError("design must be a nonempty n x p matrix")
        if response.shape != (n,) or weights.shape != (n,):
            raise ValueError("response/weights must have one entry per design row")
        if not (np.isfinite(design).all() and np.isfinite(response).all()
                and np.isfinite(weights).all()):
            raise ValueError("design, response and weights must be finite")
        if (weights < 0).any():
            raise ValueError("weights must be nonnegative")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")

    @property
    def n_obs(self):
        return self.design.shape[0]

    @property
    def n_params(self):
        return self.design.shape[1]

    def objective(self, coefficients):
        """Weighted check loss at the given coefficient vector."""
        resid = self.response - self.design @ np.asarray(coefficients, dtype=float)
        return float(np.sum(self.weights * check_loss(resid, self.tau)))


@dataclass
class QRSolution:
    coefficients: np.ndarray
    objective: float
    iterations: int
    status: SolveStatus


class _DenseOps:
    """Normal-equation kernels for a batch of dense designs (B, n, p)."""

    def __init__(self, scaled_design):
        self.design = scaled_design
        self.p = scaled_design.shape[2]
        self._m = None

    def matvec(self, q):
        # (B, p) -> (B, n)
        return np.matmul(self.design, q[:, :, None])[:, :, 0]

    def rmatvec(self, v):
        # (B, n) -> (B, p)
        return np.matmul(self.design.transpose(0, 2, 1), v[:, :, None])[:, :, 0]

    def take(self, idx):
        return _DenseOps(self.design[idx])

    def prepare(self, diag):
        """Build the normal matrix X' diag X once per interior-point step."""
        m = np.matmul(self.design.transpose(0, 2, 1), diag[:, :, None] * self.design)
        jitter = 1e-13 * np.maximum(
            m.reshape(m.shape[0], -1)[:, :: self.p + 1].max(axis=1), 1.0
        )
        m[:, np.arange(self.p), np.arange(self.p)] += jitter[:, None]
        self._m = m

    def solve_prepared(self, rhs):
        # rhs of shape (B, p, k)
        return np.linalg.solve(self._m, rhs)


class _PooledOps:
    """Normal-equation kernels for pooled fits with per-member 2-blocks.

    The design has a shared slope block plus one small intercept block per
    member, so the normal matrix is solved by eliminating the
    block-diagonal member part first; cost per iteration is linear in
    members * times instead of cubic in the total parameter count.
    """

    def __init__(self, scaled_shared, scaled_member):
        # scaled_shared : (B, m, T, ks); scaled_member : (B, m, T, kc)
        self.xs = scaled_shared
        self.cs = scaled_member
        self.B, self.m, self.T, self.ks = scaled_shared.shape
        self.kc = scaled_member.shape[3]
        self.p = self.ks + self.m * self.kc

    def take(self, idx):
        return _PooledOps(self.xs[idx], self.cs[idx])

    def _split(self, q):
        qs = q[:, : self.ks]
        qc = q[:, self.ks:].reshape(self.B, self.m, self.kc)
        return qs, qc

    def matvec(self, q):
        qs, qc = self._split(q)
        out = np.matmul(self.xs, qs[:, None, :, None])[..., 0]
        out += np.matmul(self.cs, qc[..., None])[..., 0]
        return out.reshape(self.B, self.m * self.T)

    def rmatvec(self, v):
        vr = v.reshape(self.B, self.m, self.T)
        rs = np.matmul(
            self.xs.reshape(self.B, -1, self.ks).transpose(0, 2, 1),
            vr.reshape(self.B, -1, 1),
        )[..., 0]
        rc = np.matmul(self.cs.transpose(0, 1, 3, 2), vr[..., None])[..., 0]
        return np.concatenate([rs, rc.reshape(self.B, -1)], axis=1)

    def prepare(self, diag):
        """Assemble and Schur-reduce the blocked normal matrix for one step."""
        dg = diag.reshape(self.B, self.m, self.T)
        xs_t = self.xs.transpose(0, 1, 3, 2)          # (B, m, ks, T)
        xs_td = xs_t * dg[:, :, None, :]
        mss = np.matmul(
            xs_td.transpose(0, 2, 1, 3).reshape(self.B, self.ks, -1),
            self.xs.reshape(self.B, -1, self.ks),
        )
        msc = np.matmul(xs_td, self.cs)                # (B, m, ks, kc)
        cs_t = self.cs.transpose(0, 1, 3, 2) * dg[:, :, None, :]
        mcc = np.matmul(cs_t, self.cs)                 # (B, m, kc, kc)
        jit = 1e-13 * np.maximum(
            mcc.reshape(self.B, self.m, -1)[:, :, :: self.kc + 1].sum(axis=2).max(axis=1),
            1.0,
        )[:, None, None, None]
        mcc = mcc + jit * np.eye(self.kc)
        mcc_inv = np.linalg.inv(mcc)

        msc_inv = np.matmul(msc, mcc_inv)              # (B, m, ks, kc)
        schur = mss - np.matmul(
            msc_inv.transpose(0, 2, 1, 3).reshape(self.B, self.ks, -1),
            msc.transpose(0, 2, 1, 3).reshape(self.B, self.ks, -1).transpose(0, 2, 1),
        )
        diag_idx = np.arange(self.ks)
        jit_s = 1e-13 * np.maximum(schur[:, diag_idx, diag_idx].sum(axis=1), 1.0)
        schur = schur + jit_s[:, None, None] * np.eye(self.ks)
        self._msc = msc
        self._mcc_inv = mcc_inv
        self._msc_inv = msc_inv
        self._schur = schur

    def solve_prepared(self, rhs):
        n_rhs = rhs.shape[2]
        rs = rhs[:, : self.ks, :]
        rc = rhs[:, self.ks:, :].reshape(self.B, self.m, self.kc, n_rhs)
        rhs_s = rs - np.matmul(
            self._msc_inv.transpose(0, 2, 1, 3).reshape(self.B, self.ks, -1),
            rc.reshape(self.B, -1, n_rhs),
        )
        qs = np.linalg.solve(self._schur, rhs_s)
        qc = np.matmul(
            self._mcc_inv,
            rc - np.matmul(self._msc.transpose(0, 1, 3, 2), qs[:, None]),
        )
        return np.concatenate([qs, qc.reshape(self.B, -1, n_rhs)], axis=1)


def _max_step(v1, dv1, v2, dv2):
    """Largest damped alpha in (0, 1] keeping both pairs positive, per batch."""
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.where(dv1 < 0, v1 / -dv1, np.inf).min(axis=1)
        r2 = np.where(dv2 < 0, v2 / -dv2, np.inf).min(axis=1)
    return np.minimum(1.0, _STEP_DAMPING * np.minimum(r1, r2))


def _ip_core(ops, c, tau, tol, max_iter, init_dual=None):
    """Mehrotra predictor-corrector on min c'g s.t. A g = b, 0 <= g <= 1.

    A is represented by `ops` (A = scaled-design transposed); b is the
    tau-dependent right-hand side of the quantile dual. Returns the
    equality duals q (coefficients are -q), the final primal vector g,
    per-problem iteration counts and convergence flags. Converged problems
    are compacted out of the working set so long batches do not pay for
    stragglers.
    """
    B, n = c.shape
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (B,))
    ones = np.ones((B, n))
    b = (1.0 - tau)[:, None] * ops.rmatvec(ones)

    if init_dual is not None:
        x = np.clip(init_dual, 0.01, 0.99).copy()
    else:
        x = np.broadcast_to((1.0 - tau)[:, None], (B, n)).copy()
    s = 1.0 - x

    ops.prepare(ones)
    q = ops.solve_prepared(ops.rmatvec(c)[:, :, None])[:, :, 0]
    rc = c - ops.matvec(q)
    delta = 1e-4 * (1.0 + np.abs(rc).max(axis=1, keepdims=True))
    z = np.maximum(rc, 0.0) + delta
    r = np.maximum(-rc, 0.0) + delta

    q_out = q.copy()
    x_out = x.copy()
    iterations = np.full(B, max_iter, dtype=int)
    converged = np.zeros(B, dtype=bool)
    idx = np.arange(B)  # working-set rows in terms of the original batch

    for it in range(max_iter):
        pobj = (c * x).sum(axis=1)
        gap = pobj - (b * q).sum(axis=1) + r.sum(axis=1)
        done = gap <= tol * (1.0 + np.abs(pobj))
        if done.any():
            rows = idx[done]
            q_out[rows] = q[done]
            x_out[rows] = x[done]
            iterations[rows] = it
            converged[rows] = True
            if done.all():
                idx = idx[:0]
                break
            keep = ~done
            idx = idx[keep]
            c, b, x, s, z, r, q = (a[keep] for a in (c, b, x, s, z, r, q))
            tau = tau[keep]
            ops = ops.take(keep)

        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            rb = b - ops.rmatvec(x)
            rc = c - ops.matvec(q)
            rd = rc + r - z
            zx = z / x
            rs = r / s
            d = 1.0 / (zx + rs)
            ops.prepare(d)

            # affine scaling direction
            rhs_x_aff = rc  # rd - (-xz)/x + (-sr)/s collapses to c - Aq
            dq_a = ops.solve_prepared(
                (rb + ops.rmatvec(d * rhs_x_aff))[:, :, None]
            )[:, :, 0]
            dx_a = d * (ops.matvec(dq_a) - rhs_x_aff)
            dz_a = -z - zx * dx_a
            dr_a = -r + rs * dx_a

            ap = _max_step(x, dx_a, s, -dx_a)
            ad = _max_step(z, dz_a, r, dr_a)

            mu = ((x * z).sum(axis=1) + (s * r).sum(axis=1)) / (2 * n)
            mu_aff = (
                ((x + ap[:, None] * dx_a) * (z + ad[:, None] * dz_a)).sum(axis=1)
                + ((s - ap[:, None] * dx_a) * (r + ad[:, None] * dr_a)).sum(axis=1)
            ) / (2 * n)
            sigma = np.clip((mu_aff / mu) ** 3, 0.0, 1.0)
            sigma = np.where(np.isfinite(sigma), sigma, 1.0)
            target = (sigma * mu)[:, None]

            # corrector direction with centering
            comp_x = (target - dx_a * dz_a) / x
            comp_s = (target + dx_a * dr_a) / s
            rhs_x = rd + z - r - comp_x + comp_s
            dq = ops.solve_prepared(
                (rb + ops.rmatvec(d * rhs_x))[:, :, None]
            )[:, :, 0]
            dx = d * (ops.matvec(dq) - rhs_x)
            dz = comp_x - z - zx * dx
            dr = comp_s - r + rs * dx

            ap = _max_step(x, dx, s, -dx)[:, None]
            ad = _max_step(z, dz, r, dr)[:, None]

        x = np.clip(x + ap * dx, 1e-14, None)
        s = np.clip(s - ap * dx, 1e-14, None)
        z = np.clip(z + ad * dz, 1e-14, None)
        r = np.clip(r + ad * dr, 1e-14, None)
        q = q + ad * dq

    if idx.size:
        q_out[idx] = q
        x_out[idx] = x

    return q_out, x_out, iterations, converged


def _scaled_rows(design, response, weights):
    """Fold weights into rows, flooring negligible weights to exact zero."""
    w = np.where(
        weights < WEIGHT_FLOOR * weights.max(axis=-1, keepdims=True), 0.0, weights
    )
    return design * w[..., None], response * w, w


def solve_batch(design, response, weights, tau, tol=1e-8, max_iter=200,
                init_dual=None):
    """Solve a batch of same-shape weighted QR problems.

    Parameters
    ----------
    design : (B, n, p) array
    response : (B, n) array
    weights : (B, n) or (n,) array of nonnegative weights
    tau : scalar or (B,) quantile levels
    init_dual : optional (B, n) dual vector from a related solve, used as a
        warm start after clipping into the interior.

    Returns
    -------
    coef : (B, p) minimisers
    objective : (B,) weighted check loss at coef
    iterations : (B,) interior point iteration counts
    converged : (B,) bool duality-gap certificates
    dual : (B, n) final dual vector (reusable as init_dual)
    """
    design = np.asarray(design, dtype=float)
    response = np.asarray(response, dtype=float)
    B, n, p = design.shape
    weights = np.broadcast_to(np.asarray(weights, dtype=float), (B, n))
    xs, ys, w = _scaled_rows(design, response, weights)

    ops = _DenseOps(xs)
    q, dual, iterations, converged = _ip_core(
        ops, -ys, tau, tol, max_iter, init_dual=init_dual
    )
    coef = -q
    resid = response - np.matmul(design, coef[:, :, None])[:, :, 0]
    tau_b = np.broadcast_to(np.asarray(tau, dtype=float), (B,))[:, None]
    objective = np.sum(w * resid * (tau_b - (resid <= 0.0)), axis=1)
    return coef, objective, iterations, converged, dual


def solve_pooled_batch(shared_design, member_design, response, weights, tau,
                       tol=1e-8, max_iter=200):
    """Solve a batch of pooled QR problems with per-member intercept blocks.

    Each problem stacks m members over T times; the shared block (width ks)
    is common to all members while each member owns a copy of the small
    member block (width kc, typically [1, u]).

    Parameters
    ----------
    shared_design : (B, m, T, ks)
    member_design : (B, T, kc) or (B, m, T, kc)
    response : (B, m, T)
    weights : (B, T) or (B, m, T), nonnegative
    tau : scalar or (B,)

    Returns
    -------
    shared_coef : (B, ks)
    member_coef : (B, m, kc)
    objective : (B,) weighted check loss
    iterations, converged : (B,) diagnostics
    """
    shared_design = np.asarray(shared_design, dtype=float)
    member_design = np.asarray(member_design, dtype=float)
    response = np.asarray(response, dtype=float)
    B, m, T, ks = shared_design.shape
    kc = member_design.shape[-1]
    if member_design.ndim == 3:
        member_design = np.broadcast_to(
            member_design[:, None], (B, m, T, kc)
        )
    weights = np.asarray(weights, dtype=float)
    if weights.ndim == 2:
        weights = np.broadcast_to(weights[:, None], (B, m, T))
    wmax = weights.reshape(B, -1).max(axis=1)
    w = np.where(weights < WEIGHT_FLOOR * wmax[:, None, None], 0.0, weights)

    xs = shared_design * w[..., None]
    cs = member_design * w[..., None]
    ys = (response * w).reshape(B, m * T)

    ops = _PooledOps(xs, cs)
    q, _, iterations, converged = _ip_core(ops, -ys, tau, tol, max_iter)
    coef = -q
    shared_coef = coef[:, :ks]
    member_coef = coef[:, ks:].reshape(B, m, kc)

    fitted = np.matmul(shared_design, shared_coef[:, None, :, None])[..., 0]
    fitted += np.matmul(member_design, member_coef[..., None])[..., 0]
    resid = response - fitted
    tau_b = np.broadcast_to(np.asarray(tau, dtype=float), (B,))[:, None, None]
    objective = np.sum(w * resid * (tau_b - (resid <= 0.0)), axis=(1, 2))
    return shared_coef, member_coef, objective, iterations, converged


def _effective_rank_deficient(problem):
    """True when the positive-weight rows cannot identify p parameters."""
    pos = problem.weights > WEIGHT_FLOOR * problem.weights.max() if problem.weights.max() > 0 else np.zeros(problem.n_obs, dtype=bool)
    if pos.sum() < problem.n_params:
        return True
    rows = problem.design[pos] * problem.weights[pos, None]
    gram = rows.T @ rows
    eigs = np.linalg.eigvalsh(gram)
    return eigs[0] <= 1e-12 * max(eigs[-1], 1e-300)


def solve(problem, tol=1e-8, max_iter=200, init_dual=None):
    """Minimise the weighted check loss of one problem exactly.

    Runs the interior point method and certifies optimality by the duality
    gap. Rank-deficient effective designs are solved on the row space of
    the scaled design (null-space component zero, i.e. a minimum-norm
    optimum) and reported as Degenerate.
    """
    if not isinstance(problem, WeightedQRProblem):
        raise TypeError("expected a WeightedQRProblem")
    if tol <= 0:
        raise ValueError("tol must be positive")

    deficient = _effective_rank_deficient(problem)
    if not deficient:
        init = None if init_dual is None else np.asarray(init_dual, float)[None, :]
        coef, obj, iters, conv, _ = solve_batch(
            problem.design[None], problem.response[None], problem.weights[None],
            problem.tau, tol=tol, max_iter=max_iter, init_dual=init,
        )
        status = SolveStatus.OPTIMAL if conv[0] else SolveStatus.MAX_ITERATIONS
        return QRSolution(coef[0], float(obj[0]), int(iters[0]), status)

    # Rank-deficient: restrict to the span of the scaled rows.
    xs, ys, w = _scaled_rows(problem.design, problem.response, problem.weights)
    u, svals, vt = np.linalg.svd(xs, full_matrices=False)
    keep = svals > 1e-12 * max(svals[0], 1e-300) if svals.size else np.zeros(0, bool)
    if not keep.any():
        coef = np.zeros(problem.n_params)
        return QRSolution(coef, problem.objective(coef), 0, SolveStatus.DEGENERATE)
    basis = vt[keep]  # (r, p)
    reduced = problem.design @ basis.T
    coef_r, obj, iters, conv, _ = solve_batch(
        reduced[None], problem.response[None], problem.weights[None],
        problem.tau, tol=tol, max_iter=max_iter,
    )
    coef = basis.T @ coef_r[0]
    return QRSolution(coef, float(obj[0]), int(iters[0]), SolveStatus.DEGENERATE)


def oracle_enumerate(problem):
    """Exact reference solver by vertex enumeration.

    Some optimum of the piecewise-linear objective interpolates p
    observations, so trying every nonsingular p-subset of positive-weight
    rows and keeping the best check loss is exact up to linear-solve
    roundoff. Guarded to n <= 25, p <= 3; intended for tests.
    """
    if not isinstance(problem, WeightedQRProblem):
        raise TypeError("expected a WeightedQRProblem")
    n, p = problem.n_obs, problem.n_params
    if n > 25 or p > 3:
        raise ValueError("oracle_enumerate is guarded to n <= 25 and p <= 3")

    wmax = problem.weights.max()
    pos = np.flatnonzero(problem.weights > WEIGHT_FLOOR * wmax) if wmax > 0 else np.array([], int)
    best_coef = None
    best_obj = np.inf
    tried = 0
    for subset in itertools.combinations(pos.tolist(), p):
        sub = problem.design[list(subset)]
        if abs(np.linalg.det(sub)) < 1e-12 * max(1.0, np.abs(sub).max() ** p):
            continue
        theta = np.linalg.solve(sub, problem.response[list(subset)])
        tried += 1
        obj = problem.objective(theta)
        if obj < best_obj:
            best_obj, best_coef = obj, theta
    if best_coef is None:
        coef = np.zeros(p)
        return QRSolution(coef, problem.objective(coef), 0, SolveStatus.DEGENERATE)
    return QRSolution(best_coef, best_obj, tried, SolveStatus.OPTIMAL)
