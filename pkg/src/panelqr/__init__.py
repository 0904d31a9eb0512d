"""Functional-coefficient panel quantile regression with latent groups.

The pipeline: load a balanced panel (`panelio`), fit per-subject
local-linear quantile coefficient paths (`prelim`, bandwidths from
`kernels`), cluster subjects by path distance and pick the group count by
a deviation-ratio rule (`grouping`), then refit each group jointly with
subject intercepts and attach pointwise confidence intervals
(`postgroup`). `variants` groups linear models uniformly over quantile
levels; `simlab` houses the seeded synthetic studies; `cli` exposes the
batch commands.
"""

from .errors import (
    AlignmentError,
    BandwidthSelectionError,
    DegenerateIndexError,
    InferenceUnavailableError,
    LocalDesignError,
    PanelBalanceError,
    PanelDataError,
    PanelQRError,
    PanelSchemaError,
)
from .grouping import (
    DistanceMatrix,
    GroupNumberSelection,
    GroupStructure,
    agglomerate,
    cut_dendrogram,
    deviation_score,
    distance_matrix,
    nmi,
    purity,
    ratio_rule,
    select_group_number,
)
from .kernels import (
    KernelSpec,
    default_bandwidth_grid,
    kernel_moments,
    kernel_weight,
    rot_bandwidth,
    select_bandwidth_cv,
)
from .panelio import PanelDataset, QuantileSpec, load_panel_csv, normalize_index
from .postgroup import (
    GroupFit,
    SandwichPieces,
    confidence_intervals,
    estimate_sandwich,
    fit_group,
)
from .prelim import CoefficientPath, fit_all_subjects, fit_subject, plotting_grid
from .qrcore import (
    QRSolution,
    SolveStatus,
    WeightedQRProblem,
    check_loss,
    oracle_enumerate,
    solve,
)
from .simlab import (
    DGPConfig,
    SimulationReport,
    generate,
    oracle_fit,
    rmse,
    run_coverage_study,
    run_study,
    true_gamma,
)
from .variants import (
    TauPath,
    fit_linear_per_tau,
    select_group_number_uniform,
    uniform_distance_matrix,
)

__version__ = "0.1.0"
