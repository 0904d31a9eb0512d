import numpy as np
import pandas as pd
import pytest

from panelqr.errors import InferenceUnavailableError, LocalDesignError
from panelqr.kernels import KernelSpec, kernel_weight
from panelqr.panelio import PanelDataset
from panelqr.postgroup import (
    confidence_intervals,
    estimate_sandwich,
    fit_group,
    score_variance,
)
from panelqr.prelim import fit_all_subjects, fit_subject
from panelqr.qrcore import check_loss


def group_panel(m=4, T=60, d=2, seed=0, noise=0.5, alphas=None,
                beta_fn=None, x_corr=0.5):
    """Panel whose subjects share one coefficient path."""
    rng = np.random.default_rng(seed)
    z = np.sort(rng.uniform(size=T))
    e1 = rng.normal(size=(m, T))
    e2 = rng.normal(size=(m, T))
    x = np.stack([e1, x_corr * e1 + np.sqrt(1 - x_corr**2) * e2], axis=2)[:, :, :d]
    if beta_fn is None:
        def beta_fn(zv):
            return np.stack([1.0 + zv, 2.0 - zv**2], axis=-1)[..., :d]
    b = beta_fn(z)
    alphas = np.zeros(m) if alphas is None else np.asarray(alphas, float)
    y = (x * b[None]).sum(axis=2) + alphas[:, None] + noise * rng.normal(size=(m, T))
    return PanelDataset(y=y, x=x, index=z), b


def pooled_objective(ds, members, tau, spec, z0, fit):
    k = np.searchsorted(fit.eval_points, z0)
    total = 0.0
    for row, i in enumerate(members):
        u = ds.index - z0
        fitted = (
            fit.alphas[row, k]
            + ds.x[i] @ fit.gamma[k]
            + u * (fit.alpha_derivs[row, k] + ds.x[i] @ fit.gamma_deriv[k])
        )
        w = kernel_weight(spec, ds.index, z0)
        total += float(np.sum(w * check_loss(ds.y[i] - fitted, tau)))
    return total


class TestFitGroup:
    def test_singleton_group_matches_subject_fit(self):
        ds, _ = group_panel(m=1, T=50, seed=1)
        spec = KernelSpec("gaussian", 0.25)
        gf = fit_group(ds, [0], 0.5, spec)
        single = fit_subject(ds, 0, 0.5, spec)
        for z0 in gf.eval_points[::9]:
            k = np.searchsorted(gf.eval_points, z0)
            obj_group = pooled_objective(ds, [0], 0.5, spec, z0, gf)
            u = ds.index - z0
            fitted = (
                single.alpha[k]
                + ds.x[0] @ single.beta[k]
                + u * (single.alpha_deriv[k] + ds.x[0] @ single.beta_deriv[k])
            )
            w = kernel_weight(spec, ds.index, z0)
            obj_single = float(np.sum(w * check_loss(ds.y[0] - fitted, 0.5)))
            assert obj_group == pytest.approx(obj_single, rel=1e-6, abs=1e-9)

    def test_noiseless_common_model_recovered_exactly(self):
        alphas = np.array([0.5, -1.0, 2.0])
        ds, _ = group_panel(
            m=3, T=40, seed=2, noise=0.0, alphas=alphas,
            beta_fn=lambda zv: np.stack(
                [np.full_like(zv, 1.2), np.full_like(zv, -0.7)], axis=-1
            ),
        )
        gf = fit_group(ds, [0, 1, 2], 0.5, KernelSpec("gaussian", 0.3))
        assert np.allclose(gf.gamma[:, 0], 1.2, atol=1e-6)
        assert np.allclose(gf.gamma[:, 1], -0.7, atol=1e-6)
        for row in range(3):
            assert np.allclose(gf.alphas[row], alphas[row], atol=1e-6)

    def test_local_design_error_names_group_and_z(self):
        ds, _ = group_panel(m=2, T=6, seed=3)
        with pytest.raises(LocalDesignError) as err:
            fit_group(ds, [0, 1], 0.5, KernelSpec("gaussian", 1e-4),
                      eval_points=[0.5], group_id=7)
        assert "group 7" in str(err.value)

    def test_optimality_against_truth(self):
        ds, b = group_panel(m=3, T=80, seed=4, noise=0.8)
        spec = KernelSpec("gaussian", 0.2)
        gf = fit_group(ds, [0, 1, 2], 0.5, spec)
        order = np.argsort(ds.index)
        for pos in range(0, 80, 17):
            z0 = gf.eval_points[pos]
            truth_fit = type(gf)(
                group_id=1, members=gf.members, eval_points=gf.eval_points,
                gamma=b[order], gamma_deriv=np.zeros_like(gf.gamma),
                alphas=np.zeros_like(gf.alphas),
                alpha_derivs=np.zeros_like(gf.alpha_derivs),
                bandwidth_h1=spec.bandwidth, tau=0.5,
            )
            assert pooled_objective(ds, gf.members, 0.5, spec, z0, gf) <= (
                pooled_objective(ds, gf.members, 0.5, spec, z0, truth_fit) + 1e-9
            )

    def test_member_shift_equivariance(self):
        ds, _ = group_panel(m=3, T=50, seed=5, noise=0.6)
        spec = KernelSpec("gaussian", 0.25)
        base = fit_group(ds, [0, 1, 2], 0.5, spec)
        shifts = np.array([1.0, -2.0, 0.5])
        ds2 = PanelDataset(
            y=ds.y + shifts[:, None], x=ds.x, index=ds.index
        )
        moved = fit_group(ds2, [0, 1, 2], 0.5, spec)
        for row in range(3):
            assert np.allclose(
                moved.alphas[row], base.alphas[row] + shifts[row], atol=1e-4
            )
        for z0 in base.eval_points[::13]:
            a = pooled_objective(ds, base.members, 0.5, spec, z0, base)
            b2 = pooled_objective(ds2, moved.members, 0.5, spec, z0, moved)
            assert b2 == pytest.approx(a, rel=1e-5, abs=1e-6)

    def test_csv_schema(self, tmp_path):
        ds, _ = group_panel(m=2, T=30, seed=6)
        gf = fit_group(ds, [0, 1], 0.5, KernelSpec("gaussian", 0.3))
        prelim = fit_all_subjects(ds, 0.5, KernelSpec("gaussian", 0.3))
        gf = confidence_intervals(ds, gf, prelim_paths=prelim, undersmooth=False)
        out = tmp_path / "group.csv"
        gf.to_csv(out)
        frame = pd.read_csv(out)
        assert list(frame.columns) == [
            "z", "gamma_1", "gamma_2", "deriv_1", "deriv_2",
            "ci_lo_1", "ci_lo_2", "ci_hi_1", "ci_hi_2",
        ]


class TestSandwich:
    def test_tau_prefactor_scales_lambda(self):
        ds, _ = group_panel(m=3, T=60, seed=7, noise=0.7)
        spec = KernelSpec("gaussian", 0.25)
        gf = fit_group(ds, [0, 1, 2], 0.5, spec)
        prelim = fit_all_subjects(ds, 0.5, spec)
        p_half = estimate_sandwich(ds, gf, 0.5, tau=0.5, prelim_paths=prelim)
        p_quarter = estimate_sandwich(ds, gf, 0.5, tau=0.25, prelim_paths=prelim)
        ratio = 0.25 / (0.25 * 0.75)
        assert np.allclose(
            p_half.lambda_group, ratio * p_quarter.lambda_group, rtol=1e-12
        )

    def test_constant_covariate_gives_zero_score_variance(self):
        x_group = np.tile(np.array([2.0, -1.0]), (3, 40, 1))
        cross = np.zeros((3, 2))
        lam = score_variance(x_group, cross, 0.5)
        assert np.allclose(lam, 0.0)

    def test_symmetry_and_psd_direction(self):
        ds, _ = group_panel(m=4, T=70, seed=8, noise=0.6)
        spec = KernelSpec("gaussian", 0.25)
        gf = fit_group(ds, [0, 1, 2, 3], 0.5, spec)
        prelim = fit_all_subjects(ds, 0.5, spec)
        pieces = estimate_sandwich(ds, gf, 0.4, prelim_paths=prelim)
        sig = pieces.sigma_group
        assert np.allclose(sig, sig.T)
        for u in np.eye(ds.dim_x):
            assert u @ sig @ u >= -1e-10
        for om in pieces.omega_i:
            assert np.allclose(om, om.T, atol=1e-12)

    def test_postgroup_residual_flag(self):
        ds, _ = group_panel(m=3, T=50, seed=9, noise=0.5)
        spec = KernelSpec("gaussian", 0.25)
        gf = fit_group(ds, [0, 1, 2], 0.5, spec)
        pieces = estimate_sandwich(ds, gf, 0.5, use_postgroup_residuals=True)
        assert np.isfinite(pieces.sigma_group).all()

    def test_requires_residual_source(self):
        ds, _ = group_panel(m=2, T=40, seed=10)
        gf = fit_group(ds, [0, 1], 0.5, KernelSpec("gaussian", 0.3))
        with pytest.raises(ValueError):
            estimate_sandwich(ds, gf, 0.5)

    def test_sampling_sd_within_band_of_plugin(self):
        # empirical spread of the group estimate across replications should
        # match the plug-in standard error to within +-30 percent
        m, T = 8, 300
        z0 = 0.5
        h1 = 1.06 * 0.2887 * (m * T) ** (-0.2)
        gammas = []
        plugin_sd = []
        for seed in range(60):
            rng = np.random.default_rng(1000 + seed)
            z = np.sort(rng.uniform(size=T))
            e1, e2 = rng.normal(size=(2, m, T))
            x = np.stack([e1, 0.5 * e1 + np.sqrt(0.75) * e2], axis=2)
            beta = np.stack([np.sin(2 * np.pi * z), z**2], axis=-1)
            y = (x * beta[None]).sum(axis=2) + rng.normal(size=(m, T))
            ds = PanelDataset(y=y, x=x, index=z)
            gf = fit_group(ds, list(range(m)), 0.5, KernelSpec("gaussian", h1),
                           eval_points=[z0])
            gammas.append(gf.gamma[0])
            if seed < 10:
                gf_full = fit_group(ds, list(range(m)), 0.5,
                                    KernelSpec("gaussian", h1))
                pieces = estimate_sandwich(
                    ds, gf_full, z0, use_postgroup_residuals=True
                )
                plugin_sd.append(
                    np.sqrt(np.diag(pieces.sigma_group) / (m * T * h1))
                )
        emp_sd = np.array(gammas).std(axis=0)
        ref_sd = np.mean(plugin_sd, axis=0)
        assert np.all(emp_sd / ref_sd > 0.7)
        assert np.all(emp_sd / ref_sd < 1.3)


class TestConfidenceIntervals:
    def test_bounds_bracket_gamma(self):
        ds, _ = group_panel(m=3, T=60, seed=11, noise=0.6)
        spec = KernelSpec("gaussian", 0.25)
        gf = fit_group(ds, [0, 1, 2], 0.5, spec)
        prelim = fit_all_subjects(ds, 0.5, spec)
        out = confidence_intervals(ds, gf, prelim_paths=prelim)
        ok = np.isfinite(out.ci_lower)
        assert ok.any()
        assert np.all(out.ci_lower[ok] <= out.gamma[ok])
        assert np.all(out.gamma[ok] <= out.ci_upper[ok])

    def test_undersmoothing_shrinks_bandwidth(self):
        ds, _ = group_panel(m=3, T=60, seed=12, noise=0.6)
        spec = KernelSpec("gaussian", 0.3)
        gf = fit_group(ds, [0, 1, 2], 0.5, spec)
        prelim = fit_all_subjects(ds, 0.5, spec)
        out = confidence_intervals(ds, gf, prelim_paths=prelim, undersmooth=True)
        expected = 0.3 * (3 * 60) ** (-1 / 20)
        assert out.bandwidth_h1 == pytest.approx(expected)

    def test_normal_critical_value(self):
        from scipy.stats import norm

        assert norm.ppf(0.975) == pytest.approx(1.959964, abs=1e-6)

    def test_zero_variance_degenerate_interval(self):
        ds, _ = group_panel(m=2, T=50, seed=13, noise=0.4)
        spec = KernelSpec("gaussian", 0.3)
        gf = fit_group(ds, [0, 1], 0.5, spec)
        half = np.zeros_like(gf.gamma)
        lower, upper = gf.gamma - half, gf.gamma + half
        assert np.array_equal(lower, upper)

    def test_jackknife_runs(self):
        ds, _ = group_panel(m=3, T=60, seed=14, noise=0.5)
        spec = KernelSpec("gaussian", 0.3)
        gf = fit_group(ds, [0, 1, 2], 0.5, spec)
        prelim = fit_all_subjects(ds, 0.5, spec)
        out = confidence_intervals(
            ds, gf, prelim_paths=prelim, undersmooth=False, jackknife=True
        )
        assert np.isfinite(out.gamma).all()

    def test_alpha_validation(self):
        ds, _ = group_panel(m=2, T=40, seed=15)
        gf = fit_group(ds, [0, 1], 0.5, KernelSpec("gaussian", 0.3))
        with pytest.raises(ValueError):
            confidence_intervals(ds, gf, alpha=1.5, use_postgroup_residuals=True)
