import numpy as np
import pandas as pd
import pytest

from panelqr.errors import LocalDesignError
from panelqr.kernels import KernelSpec, kernel_weight
from panelqr.panelio import PanelDataset
from panelqr.prelim import CoefficientPath, fit_all_subjects, fit_subject, plotting_grid
from panelqr.qrcore import check_loss


def linear_panel(n_subjects=2, n_times=30, d=2, seed=0, beta=None, alpha=None, noise=0.0):
    rng = np.random.default_rng(seed)
    z = np.sort(rng.uniform(size=n_times))
    x = rng.normal(size=(n_subjects, n_times, d))
    beta = np.full(d, 1.5) if beta is None else np.asarray(beta, float)
    alpha = np.zeros(n_subjects) if alpha is None else np.asarray(alpha, float)
    y = x @ beta + alpha[:, None] + noise * rng.normal(size=(n_subjects, n_times))
    return PanelDataset(y=y, x=x, index=z)


def local_objective(ds, subject, tau, spec, z0, path):
    """Kernel-weighted check loss of a path's local expansion at z0."""
    k = np.searchsorted(path.eval_points, z0)
    zi = ds.index_for(subject)
    u = zi - z0
    fitted = (
        path.alpha[k]
        + ds.x[subject] @ path.beta[k]
        + u * (path.alpha_deriv[k] + ds.x[subject] @ path.beta_deriv[k])
    )
    w = kernel_weight(spec, zi, z0)
    return float(np.sum(w * check_loss(ds.y[subject] - fitted, tau)))


class TestExactRecovery:
    def test_noiseless_linear_model_is_interpolated(self):
        beta = np.array([2.0, -1.0])
        ds = linear_panel(beta=beta, alpha=np.array([0.7, -0.3]))
        spec = KernelSpec("gaussian", 0.2)
        for i in range(2):
            path = fit_subject(ds, i, 0.5, spec)
            assert np.allclose(path.beta, beta[None, :], atol=1e-6)
            assert np.allclose(path.beta_deriv, 0.0, atol=1e-5)
            assert np.allclose(path.alpha, [0.7, -0.3][i], atol=1e-6)
            for z0 in path.eval_points[::7]:
                assert local_objective(ds, i, 0.5, spec, z0, path) < 1e-8

    def test_varying_coefficient_recovered_without_noise(self):
        rng = np.random.default_rng(3)
        T = 200
        z = np.sort(rng.uniform(size=T))
        x = rng.normal(size=(1, T, 1))
        beta_true = 1.0 + 2.0 * z**2
        y = x[:, :, 0] * beta_true[None]
        ds = PanelDataset(y=y, x=x, index=z)
        path = fit_subject(ds, 0, 0.5, KernelSpec("gaussian", 0.1))
        interior = (path.eval_points > 0.15) & (path.eval_points < 0.85)
        err = np.abs(path.beta[interior, 0] - beta_true[interior])
        assert err.max() < 0.08


class TestErrors:
    def test_local_design_error_names_z(self):
        z = np.array([0.1, 0.3, 0.5, 0.7, 0.9])
        rng = np.random.default_rng(1)
        ds = PanelDataset(
            y=rng.normal(size=(1, 5)), x=rng.normal(size=(1, 5, 2)), index=z
        )
        # h=0.05: only 3 observations carry weight >= 1e-8 K(0) at z=0.5,
        # below the 2(d+1)=6 needed
        with pytest.raises(LocalDesignError) as err:
            fit_subject(ds, 0, 0.5, KernelSpec("gaussian", 0.05), eval_points=[0.5])
        assert "0.5" in str(err.value)

    def test_failing_subject_is_named(self):
        ds = linear_panel(n_subjects=3, n_times=40, seed=2, noise=0.5)
        kernels = [
            KernelSpec("gaussian", 0.2),
            KernelSpec("gaussian", 1e-4),
            KernelSpec("gaussian", 0.2),
        ]
        with pytest.raises(LocalDesignError) as err:
            fit_all_subjects(ds, 0.5, kernels)
        assert err.value.subjects == ("2",)

    def test_unnormalized_index_rejected(self):
        rng = np.random.default_rng(4)
        ds = PanelDataset(
            y=rng.normal(size=(1, 10)),
            x=rng.normal(size=(1, 10, 1)),
            index=np.linspace(2, 6, 10),
        )
        with pytest.raises(ValueError):
            fit_subject(ds, 0, 0.5, KernelSpec("gaussian", 0.3))


class TestInvariants:
    def test_fixed_effect_location_equivariance(self):
        ds = linear_panel(n_subjects=1, n_times=60, seed=5, noise=0.8)
        spec = KernelSpec("gaussian", 0.25)
        base = fit_subject(ds, 0, 0.5, spec)
        shifted_ds = PanelDataset(y=ds.y + 3.25, x=ds.x, index=ds.index)
        shifted = fit_subject(shifted_ds, 0, 0.5, spec)
        assert np.allclose(shifted.alpha, base.alpha + 3.25, atol=1e-5)
        for z0 in base.eval_points[::11]:
            a = local_objective(ds, 0, 0.5, spec, z0, base)
            b = local_objective(shifted_ds, 0, 0.5, spec, z0, shifted)
            assert b == pytest.approx(a, rel=1e-5, abs=1e-7)

    def test_solution_beats_truth_in_local_loss(self):
        beta = np.array([1.0, -0.5])
        ds = linear_panel(n_subjects=1, n_times=80, seed=6, beta=beta, noise=1.0)
        spec = KernelSpec("gaussian", 0.2)
        path = fit_subject(ds, 0, 0.5, spec)
        truth = CoefficientPath(
            eval_points=path.eval_points,
            beta=np.tile(beta, (len(path.eval_points), 1)),
            beta_deriv=np.zeros_like(path.beta),
            alpha=np.zeros(len(path.eval_points)),
            alpha_deriv=np.zeros(len(path.eval_points)),
            bandwidth=spec.bandwidth,
            tau=0.5,
        )
        for z0 in path.eval_points[::9]:
            assert local_objective(ds, 0, 0.5, spec, z0, path) <= local_objective(
                ds, 0, 0.5, spec, z0, truth
            ) + 1e-9

    def test_zero_weight_observations_are_ignored(self):
        ds = linear_panel(n_subjects=1, n_times=50, seed=7, noise=0.6)
        spec = KernelSpec("gaussian", 0.1, truncation_radius=3.0)
        z0 = 0.5
        path = fit_subject(ds, 0, 0.5, spec, eval_points=[z0])
        far = np.abs(ds.index - z0) / spec.bandwidth > 3.0
        y2 = ds.y.copy()
        y2[0, far] = 0.0
        ds2 = PanelDataset(y=y2, x=ds.x, index=ds.index)
        path2 = fit_subject(ds2, 0, 0.5, spec, eval_points=[z0])
        assert np.allclose(path.beta, path2.beta, atol=1e-9)
        assert np.allclose(path.alpha, path2.alpha, atol=1e-9)

    def test_identical_subjects_identical_paths(self):
        base = linear_panel(n_subjects=1, n_times=40, seed=8, noise=0.7)
        ds = PanelDataset(
            y=np.vstack([base.y, base.y]),
            x=np.concatenate([base.x, base.x], axis=0),
            index=base.index,
        )
        paths = fit_all_subjects(ds, 0.5, KernelSpec("gaussian", 0.2))
        assert np.array_equal(paths[0].beta, paths[1].beta)
        assert np.array_equal(paths[0].alpha, paths[1].alpha)

    def test_improves_with_longer_series(self):
        # average sup-norm error over seeds shrinks when T doubles
        def sup_err(T, seed):
            rng = np.random.default_rng(seed)
            z = rng.uniform(size=T)
            x = rng.normal(size=(1, T, 1))
            beta_true = np.sin(2 * np.pi * z)
            y = x[:, :, 0] * beta_true[None] + 0.5 * rng.normal(size=(1, T))
            ds = PanelDataset(y=y, x=x, index=z)
            h = 0.3 * T ** (-0.2)
            path = fit_subject(ds, 0, 0.5, KernelSpec("gaussian", h))
            interior = (path.eval_points > 0.1) & (path.eval_points < 0.9)
            truth = np.sin(2 * np.pi * path.eval_points[interior])
            return np.abs(path.beta[interior, 0] - truth).max()

        errs_small = np.mean([sup_err(200, s) for s in range(6)])
        errs_big = np.mean([sup_err(400, s) for s in range(6)])
        assert errs_big < errs_small


class TestOutput:
    def test_eval_points_default_to_sorted_observed(self):
        ds = linear_panel(n_subjects=1, n_times=25, seed=9, noise=0.2)
        path = fit_subject(ds, 0, 0.5, KernelSpec("gaussian", 0.3))
        assert np.array_equal(path.eval_points, np.sort(ds.index))

    def test_csv_schema(self, tmp_path):
        ds = linear_panel(n_subjects=1, n_times=20, seed=10, noise=0.2)
        path = fit_subject(ds, 0, 0.5, KernelSpec("gaussian", 0.3))
        out = tmp_path / "path.csv"
        path.to_csv(out)
        frame = pd.read_csv(out, float_precision="round_trip")
        assert list(frame.columns) == [
            "z", "beta_1", "beta_2", "deriv_1", "deriv_2", "alpha", "alpha_deriv",
        ]
        assert np.array_equal(frame["beta_1"].to_numpy(), path.beta[:, 0])

    def test_plotting_grid(self):
        g = plotting_grid()
        assert len(g) == 101 and g[0] == 0.0 and g[-1] == 1.0

    def test_custom_eval_points(self):
        ds = linear_panel(n_subjects=2, n_times=30, seed=11, noise=0.1)
        pts = np.array([0.25, 0.5, 0.75])
        paths = fit_all_subjects(ds, 0.5, KernelSpec("gaussian", 0.3), eval_points=pts)
        assert all(np.array_equal(p.eval_points, pts) for p in paths)
