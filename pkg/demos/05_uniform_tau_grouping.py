"""Group subjects uniformly over quantile levels (linear models).

When the model is linear in covariates, subjects can be grouped by their
whole quantile-coefficient process instead of one level at a time: fit
plain quantile regressions on a trimmed tau grid, integrate coefficient
gaps over tau, and run the same clustering and ratio rule.
"""

import numpy as np

from panelqr import (
    PanelDataset,
    QuantileSpec,
    agglomerate,
    fit_linear_per_tau,
    select_group_number_uniform,
    uniform_distance_matrix,
)

rng = np.random.default_rng(5)
slopes = [0.0] * 4 + [2.5] * 4          # two latent groups
T = 250
x = rng.normal(size=(8, T, 1))
y = x[:, :, 0] * np.array(slopes)[:, None] + rng.normal(size=(8, T))
# heteroscedastic twist: the second group's coefficient drifts across tau
y[4:] += 0.5 * np.abs(x[4:, :, 0]) * rng.normal(size=(4, T))
ds = PanelDataset(y=y, x=x, index=np.linspace(0, 1, T))

spec = QuantileSpec.default_grid(points=9)
paths = fit_linear_per_tau(ds, spec)
print("subject 0 coefficient process over tau:",
      np.round(paths[0].beta_star[:, 0], 2))
print("subject 7 coefficient process over tau:",
      np.round(paths[7].beta_star[:, 0], 2))

dm = uniform_distance_matrix(paths)
sel = select_group_number_uniform(paths, r_max=4, omega=("rel", 0.1))
print("\nintegrated deviations:", np.round(sel.scores, 3))
print("selected group count:", sel.r_hat)
print("membership:", agglomerate(dm, sel.r_hat).assignments.tolist())
