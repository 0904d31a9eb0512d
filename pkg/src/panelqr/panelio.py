"""Panel data loading, validation and indexing.

Datasets are balanced long-format panels: N subjects observed at the same T
times, with a univariate response, d covariates and an index variable that
is either a shared time series Z_t, a subject-specific Z_it, or scaled time
t/T (materialised at load so downstream code never special-cases it).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from .errors import (
    DegenerateIndexError,
    PanelBalanceError,
    PanelDataError,
    PanelSchemaError,
)

__all__ = [
    "PanelDataset",
    "QuantileSpec",
    "load_panel_csv",
    "normalize_index",
    "parse_schema",
]

INDEX_KINDS = ("shared", "subject", "time")


@dataclass(frozen=True)
class PanelDataset:
    """Immutable balanced panel with N subjects over T common times.

    index holds Z_t (shape (T,)) for kind 'shared' or 'time', and Z_it
    (shape (N, T)) for kind 'subject'. index_offset/index_scale record the
    affine map back to original index units: original = offset + scale * z.
    """

    y: np.ndarray
    x: np.ndarray
    index: np.ndarray
    index_kind: str = "shared"
    subject_labels: tuple = ()
    time_labels: tuple = ()
    index_offset: float = 0.0
    index_scale: float = 1.0

    def __post_init__(self):
        def frozen(a):
            a = np.ascontiguousarray(np.asarray(a, dtype=float))
            if a.flags.writeable:
                a = a.copy()
            return a

        y = frozen(self.y)
        x = frozen(self.x)
        z = frozen(self.index)
        if y.ndim != 2:
            raise ValueError("y must be an N x T matrix")
        n, t = y.shape
        if x.ndim != 3 or x.shape[:2] != (n, t):
            raise ValueError("x must be an N x T x d array aligned with y")
        if self.index_kind not in INDEX_KINDS:
            raise ValueError(f"index_kind must be one of {INDEX_KINDS}")
        expected = (n, t) if self.index_kind == "subject" else (t,)
        if z.shape != expected:
            raise ValueError(f"index must have shape {expected}, got {z.shape}")
        for name, arr in (("y", y), ("x", x), ("index", z)):
            if not np.isfinite(arr).all():
                raise PanelDataError(f"non-finite values in {name}")
        labels = tuple(str(s) for s in self.subject_labels) or tuple(
            str(i + 1) for i in range(n)
        )
        if len(labels) != n:
            raise ValueError("subject_labels must have one entry per subject")
        tlabels = tuple(self.time_labels) or tuple(range(1, t + 1))
        if len(tlabels) != t:
            raise ValueError("time_labels must have one entry per time")
        for arr in (y, x, z):
            arr.flags.writeable = False
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "index", z)
        object.__setattr__(self, "subject_labels", labels)
        object.__setattr__(self, "time_labels", tlabels)

    @property
    def n_subjects(self):
        return self.y.shape[0]

    @property
    def n_times(self):
        return self.y.shape[1]

    @property
    def dim_x(self):
        return self.x.shape[2]

    def shared_index(self):
        """The common Z_t series, or None when the index varies by subject."""
        return None if self.index_kind == "subject" else self.index

    def index_for(self, subject):
        """Index series seen by one subject."""
        return self.index[subject] if self.index_kind == "subject" else self.index

    def index_in_unit_interval(self):
        return bool((self.index >= 0.0).all() and (self.index <= 1.0).all())

    def to_csv(self, path):
        """Write the long-format panel; floats use repr so values round-trip."""
        d = self.dim_x
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["subject", "time", "y"] + [f"x{j + 1}" for j in range(d)] + ["z"]
            )
            for i, label in enumerate(self.subject_labels):
                zi = self.index_for(i)
                for t in range(self.n_times):
                    writer.writerow(
                        [label, self.time_labels[t], repr(float(self.y[i, t]))]
                        + [repr(float(self.x[i, t, j])) for j in range(d)]
                        + [repr(float(zi[t]))]
                    )


@dataclass(frozen=True)
class QuantileSpec:
    """Quantile level(s) of interest with the trimming constant used by
    the uniform-over-tau pathway."""

    tau: float = 0.5
    tau_grid: Optional[tuple] = None
    epsilon: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")
        if self.tau_grid is not None:
            grid = tuple(float(t) for t in self.tau_grid)
            if len(grid) == 0:
                raise ValueError("tau_grid must be nonempty when given")
            if any(b <= a for a, b in zip(grid, grid[1:])):
                raise ValueError("tau_grid must be strictly increasing")
            if grid[0] < self.epsilon or grid[-1] > 1.0 - self.epsilon:
                raise ValueError("tau_grid must lie within [epsilon, 1 - epsilon]")
            object.__setattr__(self, "tau_grid", grid)

    @staticmethod
    def default_grid(epsilon=0.05, points=19):
        return QuantileSpec(
            tau=0.5,
            tau_grid=tuple(np.linspace(epsilon, 1.0 - epsilon, points)),
            epsilon=epsilon,
        )


def parse_schema(spec):
    """Parse 'y=price,x=pop+inc,z=inf,id=region,t=quarter' into a mapping."""
    if isinstance(spec, dict):
        mapping = dict(spec)
    else:
        mapping = {}
        for part in str(spec).split(","):
            part = part.strip()
            if not part:
                continue
            if "=" not in part:
                raise PanelSchemaError(f"malformed schema fragment {part!r}")
            key, value = part.split("=", 1)
            mapping[key.strip()] = value.strip()
    for required in ("id", "t", "y", "x"):
        if required not in mapping or not mapping[required]:
            raise PanelSchemaError(f"schema is missing the {required!r} column")
    if isinstance(mapping["x"], str):
        mapping["x"] = [c.strip() for c in mapping["x"].split("+") if c.strip()]
    mapping.setdefault("z", None)
    return mapping


def load_panel_csv(path, schema, index="z", normalize=False):
    """Load and validate a balanced long-format panel.

    schema maps roles to column names: id, t, y, x (list or '+'-joined
    string) and optionally z. index='time' ignores the z column and
    materialises scaled time t/T; index='z' requires the z column.
    Subjects keep their order of first appearance; rows are sorted by time
    within subject. With normalize=True the index is affinely rescaled onto
    [0, 1].
    """
    schema = parse_schema(schema)
    if index not in ("z", "time"):
        raise ValueError("index must be 'z' or 'time'")
    if index == "z" and schema["z"] is None:
        raise PanelSchemaError("index='z' requires a z column in the schema")

    frame = pd.read_csv(path, float_precision="round_trip")
    needed = [schema["id"], schema["t"], schema["y"], *schema["x"]]
    if index == "z":
        needed.append(schema["z"])
    missing = [c for c in needed if c not in frame.columns]
    if missing:
        raise PanelSchemaError(f"missing column(s) {missing} in {path}")

    value_cols = [schema["y"], *schema["x"]] + ([schema["z"]] if index == "z" else [])
    for col in value_cols:
        values = pd.to_numeric(frame[col], errors="coerce")
        bad = ~np.isfinite(values.to_numpy(dtype=float))
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise PanelDataError(
                f"non-finite value at row {row + 2} (1-based, incl. header), "
                f"column {col!r}",
                row=row,
                column=col,
            )
        frame[col] = values

    ids = frame[schema["id"]].astype(str)
    subjects = list(dict.fromkeys(ids))
    times = sorted(frame[schema["t"]].unique().tolist())
    t_count = len(times)

    offenders = []
    for s in subjects:
        sub_t = frame.loc[ids == s, schema["t"]].tolist()
        if sorted(sub_t) != times or len(sub_t) != t_count:
            offenders.append(s)
    if offenders:
        raise PanelBalanceError(
            f"unbalanced panel; offending subject(s): {offenders}",
            subjects=offenders,
        )

    n, d = len(subjects), len(schema["x"])
    y = np.empty((n, t_count))
    x = np.empty((n, t_count, d))
    z_subj = np.empty((n, t_count)) if index == "z" else None
    pos = {s: i for i, s in enumerate(subjects)}
    tpos = {t: j for j, t in enumerate(times)}
    rows_i = ids.map(pos).to_numpy()
    rows_t = frame[schema["t"]].map(tpos).to_numpy()
    y[rows_i, rows_t] = frame[schema["y"]].to_numpy(dtype=float)
    for j, col in enumerate(schema["x"]):
        x[rows_i, rows_t, j] = frame[col].to_numpy(dtype=float)

    if index == "time":
        z = np.arange(1, t_count + 1) / t_count
        kind = "time"
    else:
        z_subj[rows_i, rows_t] = frame[schema["z"]].to_numpy(dtype=float)
        if np.all(z_subj == z_subj[0:1, :]):
            z, kind = z_subj[0].copy(), "shared"
        else:
            z, kind = z_subj, "subject"

    ds = PanelDataset(
        y=y, x=x, index=z, index_kind=kind,
        subject_labels=tuple(subjects), time_labels=tuple(times),
    )
    return normalize_index(ds) if normalize else ds


def normalize_index(ds):
    """Affinely map the index onto [0, 1]; a no-op if already spanning it.

    The mapping parameters compose with any previous ones so original
    units stay recoverable as offset + scale * z.
    """
    z = ds.index
    zmin, zmax = float(z.min()), float(z.max())
    if zmax == zmin:
        raise DegenerateIndexError(
            f"index is constant at {zmin}; cannot rescale to [0, 1]"
        )
    if zmin == 0.0 and zmax == 1.0:
        return ds
    znew = (z - zmin) / (zmax - zmin)
    return PanelDataset(
        y=ds.y,
        x=ds.x,
        index=znew,
        index_kind=ds.index_kind,
        subject_labels=ds.subject_labels,
        time_labels=ds.time_labels,
        index_offset=ds.index_offset + ds.index_scale * zmin,
        index_scale=ds.index_scale * (zmax - zmin),
    )
