"""Batch command-line surface.

Three subcommands cover the workflows: `estimate` runs the full pipeline
on a CSV panel (preliminary paths, distances, dendrogram, group count,
membership, pooled group fits with confidence intervals), `group-only`
stops after membership, and `simulate` runs the seeded synthetic study.
Options resolve as CLI flags over config-file entries over the
PANELQR_THREADS environment variable over defaults, and every run writes
a manifest of the resolved options.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import PanelQRError
from .grouping import agglomerate, distance_matrix, select_group_number
from .kernels import KernelSpec, default_bandwidth_grid, select_bandwidth_cv
from .panelio import QuantileSpec, load_panel_csv, normalize_index
from .postgroup import confidence_intervals, fit_group
from .prelim import fit_all_subjects
from .simlab import DGPConfig, run_study
from .variants import (
    fit_linear_per_tau,
    select_group_number_uniform,
    uniform_distance_matrix,
)

__all__ = ["main", "build_parser"]


def _parse_omega(text):
    kind, _, value = str(text).partition(":")
    if kind not in ("rel", "abs") or not value:
        raise argparse.ArgumentTypeError(
            "omega must look like rel:<factor> or abs:<value>"
        )
    return (kind, float(value))


def _parse_tau_list(text):
    taus = [float(t) for t in str(text).split(",") if t.strip()]
    if not taus or any(not 0.0 < t < 1.0 for t in taus):
        raise argparse.ArgumentTypeError("tau values must lie in (0, 1)")
    return taus


def _parse_tau_grid(text):
    if ":" in str(text):
        lo, hi, n = str(text).split(":")
        return tuple(np.linspace(float(lo), float(hi), int(n)))
    return tuple(float(t) for t in str(text).split(","))


def build_parser():
    parser = argparse.ArgumentParser(
        prog="panelqr",
        description="Functional-coefficient panel quantile regression "
                    "with latent group discovery",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value option file")
        p.add_argument("--tau", type=_parse_tau_list, help="quantile level(s), comma separated")
        p.add_argument("--kernel", choices=("gaussian", "epanechnikov"))
        p.add_argument("--bandwidth", help="'cv' or a fixed numeric bandwidth")
        p.add_argument("--rmax", type=int, help="largest group count tried (default 5)")
        p.add_argument("--omega", type=_parse_omega,
                       help="deviation floor, rel:<factor> or abs:<value>")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int)
        p.add_argument("--folds", type=int,
                       help="CV folds over time (default min(T, 20))")

    est = sub.add_parser("estimate", help="full pipeline on a CSV panel")
    grp = sub.add_parser("group-only", help="stop after group membership")
    for p in (est, grp):
        common(p)
        p.add_argument("--input", help="long-format CSV panel")
        p.add_argument("--schema", help="y=...,x=a+b,z=...,id=...,t=...")
        p.add_argument("--index", choices=("z", "time"),
                       help="observed index column or scaled time")
        p.add_argument("--no-normalize", action="store_true",
                       help="skip affine index rescaling onto [0, 1]")
        p.add_argument("--uniform-tau", action="store_true",
                       help="group on linear QR processes over a tau grid")
        p.add_argument("--tau-grid",
                       help="grid for --uniform-tau: lo:hi:n or comma list")
    est.add_argument("--alpha", type=float, help="CI miscoverage (default 0.05)")
    est.add_argument("--no-undersmooth", action="store_true",
                     help="skip undersmoothing before intervals")

    sim = sub.add_parser("simulate", help="seeded synthetic study")
    common(sim)
    sim.add_argument("--dgp", choices=("dgp1", "dgp2"))
    sim.add_argument("--subjects", type=int, help="N (default 50)")
    sim.add_argument("--times", type=int, help="T (default 100)")
    sim.add_argument("--errors", choices=("normal", "t5", "chi2"))
    sim.add_argument("--reps", type=int, help="replications (default 200)")
    return parser


DEFAULTS = {
    "tau": [0.5],
    "kernel": "gaussian",
    "bandwidth": "cv",
    "rmax": 5,
    "omega": ("rel", 0.55),
    "alpha": 0.05,
    "seed": 0,
    "out": "panelqr-out",
    "threads": 1,
    "folds": None,
    "index": "z",
    "dgp": "dgp1",
    "subjects": 50,
    "times": 100,
    "errors": "normal",
    "reps": 200,
    "tau_grid": None,
}

_CONFIG_PARSERS = {
    "tau": _parse_tau_list,
    "omega": _parse_omega,
    "tau_grid": _parse_tau_grid,
    "rmax": int,
    "seed": int,
    "threads": int,
    "folds": int,
    "subjects": int,
    "times": int,
    "reps": int,
    "alpha": float,
    "no_normalize": lambda v: v.lower() in ("1", "true", "yes"),
    "uniform_tau": lambda v: v.lower() in ("1", "true", "yes"),
    "no_undersmooth": lambda v: v.lower() in ("1", "true", "yes"),
}


def _read_config_file(path):
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise PanelQRError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        values[key] = _CONFIG_PARSERS.get(key, str)(value.strip())
    return values


def resolve_options(args):
    """CLI flags override config-file values override env over defaults."""
    opts = dict(DEFAULTS)
    env_threads = os.environ.get("PANELQR_THREADS")
    if env_threads:
        opts["threads"] = int(env_threads)
    if getattr(args, "config", None):
        opts.update(_read_config_file(args.config))
    for key, value in vars(args).items():
        if key == "config" or value in (None, False):
            continue
        if key == "tau_grid" and isinstance(value, str):
            value = _parse_tau_grid(value)
        opts[key] = value
    return opts


def _write_manifest(out, command, opts):
    record = {
        "command": command,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "options": {
            k: (list(v) if isinstance(v, (tuple, list)) else v)
            for k, v in sorted(opts.items())
        },
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_distance_csv(path, dm, labels):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject"] + list(labels))
        for i, label in enumerate(labels):
            writer.writerow([label] + [repr(float(v)) for v in dm.values[i]])


def _write_ratio_csv(path, sel):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["R", "deviation", "thresholded", "ratio", "selected"])
        for r in range(1, len(sel.scores) + 1):
            writer.writerow([
                r,
                repr(float(sel.scores[r - 1])),
                repr(float(sel.thresholded[r - 1])),
                repr(float(sel.ratios[r - 1])),
                int(r == sel.r_hat),
            ])


def _estimate_one_tau(ds, tau, opts, out, with_groups):
    """Pipeline at one quantile level; writes artifacts under `out`."""
    out.mkdir(parents=True, exist_ok=True)
    labels = ds.subject_labels
    family = opts["kernel"]

    if opts.get("uniform_tau"):
        grid = opts.get("tau_grid") or QuantileSpec.default_grid().tau_grid
        spec = QuantileSpec(tau=tau, tau_grid=grid)
        paths = fit_linear_per_tau(ds, spec)
        tau_dir = out / "tau_paths"
        tau_dir.mkdir(exist_ok=True)
        for label, path in zip(labels, paths):
            path.to_csv(tau_dir / f"subject_{label}.csv")
        dm = uniform_distance_matrix(paths)
        sel = select_group_number_uniform(paths, r_max=opts["rmax"],
                                          omega=opts["omega"])
        gs = agglomerate(dm, sel.r_hat)
        _write_distance_csv(out / "distance_matrix.csv", dm, labels)
        gs.merges_to_csv(out / "dendrogram.csv")
        _write_ratio_csv(out / "deviation_ratios.csv", sel)
        gs.to_csv(out / "membership.csv", subject_labels=labels)
        return

    if opts["bandwidth"] == "cv":
        hs = select_bandwidth_cv(
            ds, tau, family=family, mode="per_subject", folds=opts["folds"]
        )
        kernels = [KernelSpec(family, h) for h in hs]
    else:
        kernels = KernelSpec(family, float(opts["bandwidth"]))
    paths = fit_all_subjects(ds, tau, kernels)
    path_dir = out / "prelim_paths"
    path_dir.mkdir(exist_ok=True)
    for label, path in zip(labels, paths):
        path.to_csv(path_dir / f"subject_{label}.csv")

    dm = distance_matrix(paths)
    sel = select_group_number(paths, dm, r_max=opts["rmax"], omega=opts["omega"])
    gs = agglomerate(dm, sel.r_hat)
    _write_distance_csv(out / "distance_matrix.csv", dm, labels)
    gs.merges_to_csv(out / "dendrogram.csv")
    _write_ratio_csv(out / "deviation_ratios.csv", sel)
    gs.to_csv(out / "membership.csv", subject_labels=labels)

    if not with_groups:
        return
    group_dir = out / "groups"
    group_dir.mkdir(exist_ok=True)
    for g in range(1, gs.n_groups + 1):
        members = gs.members(g)
        if opts["bandwidth"] == "cv":
            h1 = select_bandwidth_cv(
                ds, tau, family=family, mode="pooled", folds=opts["folds"],
                members=members,
            )
        else:
            h1 = float(opts["bandwidth"])
        fit = fit_group(ds, members, tau, KernelSpec(family, h1), group_id=g)
        fit = confidence_intervals(
            ds, fit, alpha=opts["alpha"],
            undersmooth=not opts.get("no_undersmooth", False),
            prelim_paths=paths,
        )
        fit.to_csv(group_dir / f"group_{g}.csv")


def cmd_estimate(opts, with_groups=True):
    if not opts.get("input") or not opts.get("schema"):
        raise PanelQRError("estimate requires --input and --schema")
    ds = load_panel_csv(
        opts["input"], opts["schema"], index=opts["index"],
        normalize=not opts.get("no_normalize", False),
    )
    if not ds.index_in_unit_interval():
        ds = normalize_index(ds)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    taus = opts["tau"]
    if len(taus) == 1:
        _estimate_one_tau(ds, taus[0], opts, out, with_groups)
    else:
        for tau in taus:
            _estimate_one_tau(ds, tau, opts, out / f"tau_{tau}", with_groups)
    _write_manifest(out, "estimate" if with_groups else "group-only", opts)
    return 0


def cmd_simulate(opts):
    taus = opts["tau"]
    if len(taus) != 1:
        raise PanelQRError("simulate runs one quantile level at a time")
    cfg = DGPConfig(
        dgp=opts["dgp"], n_subjects=opts["subjects"], n_times=opts["times"],
        tau=taus[0], error_dist=opts["errors"], seed=opts["seed"],
    )
    report = run_study(
        cfg, opts["reps"], r_max=opts["rmax"], omega=opts["omega"],
        folds=opts["folds"], threads=opts["threads"],
    )
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    report.records_to_csv(out / "replications.csv")
    report.aggregate_to_csv(out / "aggregate.csv")
    (out / "summary.txt").write_text(report.summary_text() + "\n", encoding="utf-8")
    _write_manifest(out, "simulate", opts)
    print(report.summary_text())
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opts = resolve_options(args)
        if args.command == "estimate":
            return cmd_estimate(opts, with_groups=True)
        if args.command == "group-only":
            return cmd_estimate(opts, with_groups=False)
        return cmd_simulate(opts)
    except (PanelQRError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
