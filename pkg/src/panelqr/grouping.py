"""Subject clustering from coefficient paths and group-count selection.

Subjects are compared through the time-average Euclidean distance between
their estimated coefficient paths; complete-linkage agglomeration with a
deterministic tie-break builds the dendrogram, a ratio rule on the
within-group deviation picks the number of groups, and NMI/purity measure
agreement with a reference partition.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import AlignmentError

__all__ = [
    "DistanceMatrix",
    "GroupStructure",
    "GroupNumberSelection",
    "distance_matrix",
    "agglomerate",
    "cut_dendrogram",
    "deviation_score",
    "ratio_rule",
    "select_group_number",
    "nmi",
    "purity",
]


@dataclass(frozen=True)
class DistanceMatrix:
    """Symmetric nonnegative subject-by-subject dissimilarities."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("distance matrix must be square")
        if not np.allclose(v, v.T, atol=1e-12):
            raise ValueError("distance matrix must be symmetric")
        if (v < 0).any():
            raise ValueError("distances must be nonnegative")
        if not np.allclose(np.diag(v), 0.0, atol=1e-12):
            raise ValueError("diagonal must be zero")
        v = 0.5 * (v + v.T)
        np.fill_diagonal(v, 0.0)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def n_subjects(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class GroupStructure:
    """A partition of subjects into groups 1..R, numbered by smallest member.

    merge_history, when present, is the full dendrogram as (a, b, distance)
    triples where a < b are the smallest member indices (0-based) of the
    merged clusters; partitions from external sources carry None.
    """

    assignments: np.ndarray
    merge_history: Optional[tuple] = None

    def __post_init__(self):
        a = np.asarray(self.assignments, dtype=int)
        if a.ndim != 1 or a.size == 0:
            raise ValueError("assignments must be a nonempty vector")
        r = a.max()
        if a.min() < 1 or set(np.unique(a)) != set(range(1, r + 1)):
            raise ValueError("groups must be numbered 1..R with none empty")
        a = a.copy()
        a.flags.writeable = False
        object.__setattr__(self, "assignments", a)
        if self.merge_history is not None:
            hist = tuple(
                (int(x), int(y), float(dist)) for x, y, dist in self.merge_history
            )
            if len(hist) != a.size - 1:
                raise ValueError("merge history must contain N - 1 merges")
            object.__setattr__(self, "merge_history", hist)

    @property
    def n_subjects(self):
        return self.assignments.size

    @property
    def n_groups(self):
        return int(self.assignments.max())

    def members(self, group):
        return np.flatnonzero(self.assignments == group)

    @staticmethod
    def from_labels(labels):
        """Build a partition from arbitrary labels, renumbering groups by
        smallest member index."""
        labels = np.asarray(labels)
        order = {}
        for lab in labels:
            if lab not in order:
                order[lab] = len(order) + 1
        return GroupStructure(np.array([order[lab] for lab in labels]))

    def to_csv(self, path, subject_labels=None):
        n = self.n_subjects
        subject_labels = subject_labels or [str(i + 1) for i in range(n)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["subject_label", "group_id"])
            for label, g in zip(subject_labels, self.assignments):
                writer.writerow([label, int(g)])

    def merges_to_csv(self, path):
        if self.merge_history is None:
            raise ValueError("this partition carries no merge history")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "a", "b", "distance"])
            for step, (a, b, dist) in enumerate(self.merge_history, start=1):
                writer.writerow([step, a + 1, b + 1, repr(dist)])


def _aligned_betas(paths):
    if not paths:
        raise AlignmentError("need at least one coefficient path")
    ref = paths[0]
    for p in paths[1:]:
        if p.beta.shape != ref.beta.shape or not np.array_equal(
            p.eval_points, ref.eval_points
        ):
            raise AlignmentError(
                "coefficient paths must share evaluation points and dimension"
            )
    return np.stack([p.beta for p in paths])


def distance_matrix(paths, eval_at=None):
    """Pairwise time-average Euclidean distance between beta paths.

    eval_at restricts the comparison to the given index values (which must
    be present in every path); by default all shared evaluation points are
    used, with observed multiplicity kept.
    """
    betas = _aligned_betas(paths)
    if eval_at is not None:
        eval_at = np.asarray(eval_at, dtype=float)
        betas = np.stack([p.beta_at(eval_at) for p in paths])
    n = betas.shape[0]
    values = np.zeros((n, n))
    for j in range(n):
        diff = betas[j + 1:] - betas[j][None]
        if diff.size:
            dist = np.linalg.norm(diff, axis=2).mean(axis=1)
            values[j, j + 1:] = dist
            values[j + 1:, j] = dist
    return DistanceMatrix(values)


def agglomerate(dm, stop_at):
    """Complete-linkage agglomeration down to `stop_at` clusters.

    Always records the full dendrogram. Equal-distance merge candidates are
    broken by the lexicographically smallest pair of cluster ids, a cluster
    id being its smallest member index; groups in the returned partition
    are numbered by smallest member.
    """
    n = dm.n_subjects
    if not 1 <= stop_at <= n:
        raise ValueError("stop_at must lie in [1, N]")
    work = dm.values.copy()
    np.fill_diagonal(work, np.inf)
    alive = np.ones(n, dtype=bool)
    merges = []
    for _ in range(n - 1):
        sub = np.where(alive[:, None] & alive[None, :], work, np.inf)
        flat = np.argmin(sub)  # first occurrence = lexicographically smallest
        a, b = divmod(int(flat), n)
        if a > b:
            a, b = b, a
        merges.append((a, b, float(work[a, b])))
        new_row = np.maximum(work[a], work[b])
        work[a] = new_row
        work[:, a] = new_row
        work[a, a] = np.inf
        alive[b] = False
    return GroupStructure(
        cut_dendrogram(merges, n, stop_at), merge_history=tuple(merges)
    )


def cut_dendrogram(merge_history, n_subjects, r):
    """Partition implied by applying the first N - r merges, groups
    numbered by smallest member index."""
    if not 1 <= r <= n_subjects:
        raise ValueError("r must lie in [1, N]")
    parent = np.arange(n_subjects)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b, _ in list(merge_history)[: n_subjects - r]:
        ra, rb = find(a), find(b)
        lo, hi = min(ra, rb), max(ra, rb)
        parent[hi] = lo
    roots = np.array([find(i) for i in range(n_subjects)])
    ordered = {root: k + 1 for k, root in enumerate(sorted(set(roots.tolist())))}
    return np.array([ordered[r_] for r_ in roots])


def deviation_score(paths, gs):
    """Average within-group deviation of beta paths from their group mean.

    Sums the Euclidean distance to the pointwise group-mean path over all
    evaluation points and members, normalised per group size, per group and
    per evaluation point.
    """
    betas = _aligned_betas(paths)
    if gs.n_subjects != betas.shape[0]:
        raise AlignmentError("partition and paths disagree on N")
    n_pts = betas.shape[1]
    total = 0.0
    for g in range(1, gs.n_groups + 1):
        idx = gs.members(g)
        mean = betas[idx].mean(axis=0)
        dev = np.linalg.norm(betas[idx] - mean[None], axis=2)
        total += dev.sum() / idx.size
    return total / (n_pts * gs.n_groups)


@dataclass(frozen=True)
class GroupNumberSelection:
    r_hat: int
    scores: np.ndarray      # raw D(1..R_max)
    thresholded: np.ndarray
    ratios: np.ndarray      # D(R)/D(R-1) with the 1 and 0/0 conventions
    degenerate: bool = False


def ratio_rule(scores, threshold):
    """Apply the deviation-ratio rule to raw scores D(1..R_max).

    Scores below `threshold` are floored to zero; the first ratio is fixed
    at 1, 0/0 counts as 1 and positive/0 as infinity. Returns the selected
    R (smallest argmin), the floored scores and the ratios.
    """
    scores = np.asarray(scores, dtype=float)
    thresholded = np.where(scores < threshold, 0.0, scores)
    ratios = np.empty(scores.size)
    ratios[0] = 1.0
    for r in range(1, scores.size):
        num, den = thresholded[r], thresholded[r - 1]
        if num == 0.0 and den == 0.0:
            ratios[r] = 1.0
        elif den == 0.0:
            ratios[r] = np.inf
        else:
            ratios[r] = num / den
    return int(np.argmin(ratios)) + 1, thresholded, ratios


def select_group_number(paths, dm, r_max=5, omega=("rel", 0.01)):
    """Pick the group count by the smallest deviation ratio.

    Computes D(R) for R = 1..r_max by cutting the complete-linkage
    dendrogram, floors values below the threshold omega to zero
    (omega=('rel', f) means f * D(1); ('abs', v) an absolute value), then
    minimises D(R)/D(R-1) with D(1)/D(0) := 1 and 0/0 := 1. Ties go to the
    smallest R. An all-identical panel returns R=1 with a degeneracy flag.
    """
    if r_max < 2:
        raise ValueError("r_max must be at least 2")
    full = agglomerate(dm, 1)
    n = dm.n_subjects
    r_max = min(r_max, n)
    scores = np.array([
        deviation_score(
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


def _contingency(est, truth):
    if est.n_subjects != truth.n_subjects:
        raise AlignmentError("partitions must cover the same subjects")
    table = np.zeros((est.n_groups, truth.n_groups))
    for k in range(1, est.n_groups + 1):
        rows = truth.assignments[est.members(k)]
        for j in range(1, truth.n_groups + 1):
            table[k - 1, j - 1] = np.count_nonzero(rows == j)
    return table


def _entropy(sizes, n):
    probs = sizes[sizes > 0] / n
    return float(-(probs * np.log2(probs)).sum())


def nmi(est, truth):
    """Normalised mutual information 2 I / (H_est + H_truth), base-2 logs.

    Two single-cluster partitions agree perfectly (1); a single-cluster
    partition against a non-trivial one carries no information (0).
    """
    table = _contingency(est, truth)
    n = est.n_subjects
    h_est = _entropy(table.sum(axis=1), n)
    h_truth = _entropy(table.sum(axis=0), n)
    if h_est == 0.0 and h_truth == 0.0:
        return 1.0
    if h_est == 0.0 or h_truth == 0.0:
        return 0.0
    rows = table.sum(axis=1, keepdims=True)
    cols = table.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = (table / n) * np.log2(n * table / (rows * cols))
    info = float(np.nansum(terms))
    return 2.0 * info / (h_est + h_truth)


def purity(est, truth):
    """Share of subjects in the majority reference group of their cluster."""
    table = _contingency(est, truth)
    return float(table.max(axis=1).sum() / est.n_subjects)
