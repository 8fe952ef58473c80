"""Command-line front end.

    gapdecomp decompose --input data.csv --outcome wealth --group race \\
        --continuous income --out results/
    gapdecomp simulate --spec dgp.json --out sim/
    gapdecomp inspect-support --input data.csv --outcome wealth --group race \\
        --continuous income --out support/

Every flag has a key in the JSON accepted by ``--config``; keys given there
override the flags.  Failures exit with status 1 and print one JSON error
object on stdout; no partial outputs are left behind.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import shutil
import sys
import tempfile
import time
from dataclasses import dataclass, field, fields

import numpy as np
import scipy

from . import __version__
from .data import ColumnMapping, GridPolicy, load_table, make_grid, write_table
from .decompose import (
    PropensityConfig,
    contribution_shares,
    decompose_conventional,
    decompose_relaxed,
    dfl_counterfactual,
    fit_group_models,
    theta,
    Selector,
    write_json,
    write_long_csv,
)
from .distreg import LOGIT, PROBIT, SolverConfig, TransformSpec
from .errors import DecompositionError, InvalidConfig
from .support import SupportStrategy, estimate_partition
from .synth import DISCRETE_CELLS, generate, load_spec, oracle_decompose, population_grid

log = logging.getLogger("gapdecomp")

MODES = ("relaxed", "conventional", "dfl", "shares")


@dataclass
class RunConfig:
    input: str | None = None
    columns: ColumnMapping | None = None
    support: SupportStrategy = field(default_factory=SupportStrategy)
    transform: TransformSpec = field(default_factory=TransformSpec)
    link: str = LOGIT
    grid: GridPolicy = field(default_factory=GridPolicy)
    modes: tuple = ("relaxed", "shares")
    share_models: bool = False
    solver: SolverConfig = field(default_factory=SolverConfig)
    propensity: PropensityConfig = field(default_factory=PropensityConfig)
    out: str | None = None
    seed: int | None = None
    jobs: int = 1

    _NESTED = {
        "columns": ColumnMapping, "support": SupportStrategy, "transform": TransformSpec,
        "grid": GridPolicy, "solver": SolverConfig, "propensity": PropensityConfig,
    }

    def update(self, d: dict):
        names = {f.name for f in fields(self)}
        unknown = set(d) - names
        if unknown:
            raise InvalidConfig(f"unknown config keys {sorted(unknown)}")
        for key, value in d.items():
            if key in self._NESTED and isinstance(value, dict):
                value = self._NESTED[key].from_dict(value)
            elif key == "modes":
                value = tuple(value.split(",") if isinstance(value, str) else value)
            setattr(self, key, value)
        return self

    def validate(self):
        if not self.input:
            raise InvalidConfig("no input file given")
        if self.columns is None:
            raise InvalidConfig("no column mapping given (need --outcome and --group)")
        if not self.out:
            raise InvalidConfig("no output directory given")
        bad = set(self.modes) - set(MODES)
        if bad or not self.modes:
            raise InvalidConfig(f"modes must be a non-empty subset of {MODES}, got {self.modes}")
        if self.link not in (LOGIT, PROBIT):
            raise InvalidConfig(f"unknown link {self.link!r}")
        if int(self.jobs) < 1:
            raise InvalidConfig("jobs must be >= 1")
        return self

    def to_dict(self):
        """Everything that determines the output contents (``jobs`` and ``out`` do not)."""
        return {
            "input": self.input,
            "columns": self.columns.to_dict() if self.columns else None,
            "support": self.support.to_dict(),
            "transform": self.transform.to_dict(),
            "link": self.link,
            "grid": self.grid.to_dict(),
            "modes": list(self.modes),
            "share_models": self.share_models,
            "solver": self.solver.to_dict(),
            "propensity": self.propensity.to_dict(),
            "seed": self.seed,
        }


def _split(text):
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def _add_data_flags(p):
    p.add_argument("--config", help="JSON file; its keys override flags")
    p.add_argument("--input", help="CSV file with a header row")
    p.add_argument("--outcome", help="outcome column")
    p.add_argument("--group", help="group column (exactly two labels)")
    p.add_argument("--weight", help="sampling-weight column (default: all 1)")
    p.add_argument("--continuous", help="comma-separated continuous covariates")
    p.add_argument("--discrete", help="comma-separated discrete covariates")
    p.add_argument("--w-label", help="label of the group whose conditional CDF is reused")
    p.add_argument("--b-label", help="label of the other group")
    p.add_argument("--support", default="auto",
                   choices=["auto", "range_1d", "cell_range", "explicit"])
    p.add_argument("--bounds", help="JSON file of explicit per-group covariate bounds")
    p.add_argument("--out", help="output directory")


def _build_parser():
    parser = argparse.ArgumentParser(prog="gapdecomp", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    d = sub.add_parser("decompose", help="run decompositions and write curve tables")
    _add_data_flags(d)
    d.add_argument("--degree", type=int, default=3, help="polynomial degree per continuous covariate")
    d.add_argument("--interactions", help="pairs a:b,c:d of continuous covariates")
    d.add_argument("--discrete-basis", default="dummies", choices=["dummies", "cells", "none"])
    d.add_argument("--link", default=LOGIT, choices=[LOGIT, PROBIT])
    d.add_argument("--grid", default="auto", choices=["auto", "unique", "quantiles", "explicit"])
    d.add_argument("--grid-points", help="comma-separated points for --grid explicit")
    d.add_argument("--max-unique", type=int, default=200)
    d.add_argument("--n-quantiles", type=int, default=199)
    d.add_argument("--mode", default="relaxed,shares",
                   help="comma-separated subset of relaxed,conventional,dfl,shares")
    d.add_argument("--share-models", action="store_true",
                   help="conventional mode reuses the full-sample models instead of refitting")
    d.add_argument("--max-iter", type=int, default=100)
    d.add_argument("--tol", type=float, default=1e-8)
    d.add_argument("--psi-cap", type=float, default=1e6)
    d.add_argument("--seed", type=int, help="replication seed, recorded in the manifest")
    d.add_argument("--jobs", type=int, default=1, help="threads for threshold fits")

    s = sub.add_parser("simulate", help="draw a synthetic table from a DGP spec")
    s.add_argument("--spec", required=True, help="DGP spec JSON")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, help="override the spec's seed")

    i = sub.add_parser("inspect-support", help="tag rows by support region")
    _add_data_flags(i)
    return parser


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig()
    if args.outcome and args.group:
        covs = [(c, "continuous") for c in _split(args.continuous)]
        covs += [(c, "discrete") for c in _split(args.discrete)]
        cfg.columns = ColumnMapping(args.outcome, args.group, tuple(covs), args.weight,
                                    args.w_label, args.b_label)
    cfg.input = args.input
    cfg.out = args.out
    bounds = None
    if args.bounds:
        with open(args.bounds, encoding="utf-8") as fh:
            bounds = json.load(fh)
    cfg.support = SupportStrategy(args.support, bounds)
    if args.command == "decompose":
        pairs = tuple(tuple(p.split(":")) for p in _split(args.interactions))
        cfg.transform = TransformSpec.from_dict(
            {"degree": args.degree, "interactions": pairs, "discrete": args.discrete_basis})
        cfg.link = args.link
        pts = tuple(float(v) for v in _split(args.grid_points)) or None
        cfg.grid = GridPolicy(args.grid, args.max_unique, args.n_quantiles, pts)
        cfg.modes = tuple(_split(args.mode))
        cfg.share_models = args.share_models
        cfg.solver = SolverConfig(max_iter=args.max_iter, tol=args.tol)
        cfg.propensity = PropensityConfig(cfg.transform, cfg.link, cfg.solver, args.psi_cap)
        cfg.seed = args.seed
        cfg.jobs = args.jobs
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg.update(json.load(fh))
    return cfg.validate()


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    return {"gapdecomp": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


class _Staging:
    """Write into a temporary directory, then move files into place."""

    def __init__(self, out):
        self.out = os.path.abspath(out)

    def __enter__(self):
        parent = os.path.dirname(self.out)
        os.makedirs(parent, exist_ok=True)
        self.tmp = tempfile.mkdtemp(prefix=".gapdecomp-", dir=parent)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            os.makedirs(self.out, exist_ok=True)
            for name in sorted(os.listdir(self.tmp)):
                os.replace(os.path.join(self.tmp, name), os.path.join(self.out, name))
        shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _timed(label, timings, fn, *a, **kw):
    t0 = time.perf_counter()
    out = fn(*a, **kw)
    timings[label] = time.perf_counter() - t0
    log.info("%s: %.3fs", label, timings[label])
    return out


def cmd_decompose(cfg: RunConfig) -> int:
    timings = {}
    table = _timed("load", timings, load_table, cfg.input, cfg.columns)
    partition = _timed("support", timings, estimate_partition, table, cfg.support)
    grid = make_grid(table, cfg.grid)
    fit_kw = dict(transform=cfg.transform, link=cfg.link, config=cfg.solver, n_jobs=cfg.jobs)

    with _Staging(cfg.out) as tmp:
        curves_series = {}
        documents = []
        model_w, model_b = _timed("fit", timings, fit_group_models, table, grid, **fit_kw)
        write_json(os.path.join(tmp, "model_W.json"), model_w.to_dict())
        write_json(os.path.join(tmp, "model_B.json"), model_b.to_dict())
        relaxed = None
        if "relaxed" in cfg.modes or "shares" in cfg.modes:
            relaxed = _timed("relaxed", timings, decompose_relaxed, table, partition,
                             model_w, model_b, grid)
            curves_series.update(relaxed.series())
            documents.append(relaxed.to_dict())
        if "conventional" in cfg.modes:
            if cfg.share_models:
                mw_os, mb_os = model_w, model_b
            else:
                mw_os, mb_os = _timed("fit_trimmed", timings, fit_group_models, table, grid,
                                      partition, trimmed=True, **fit_kw)
                write_json(os.path.join(tmp, "model_W_os.json"), mw_os.to_dict())
                write_json(os.path.join(tmp, "model_B_os.json"), mb_os.to_dict())
            conv = _timed("conventional", timings, decompose_conventional, table, partition,
                          mw_os, mb_os, grid)
            curves_series.update(conv.series())
            documents.append(conv.to_dict())
        if "dfl" in cfg.modes:
            h0_dfl, weights = _timed("dfl", timings, dfl_counterfactual, table, partition, grid,
                                     cfg.propensity)
            h0_plugin = theta(model_w, table, Selector("B")).curve
            curves_series["h0_dfl"] = h0_dfl
            curves_series["h0_plugin"] = h0_plugin
            write_json(os.path.join(tmp, "dfl.json"), {
                "propensity_model": weights.propensity_model,
                "n_capped": int(weights.capped.sum()),
                "n_zero_weight": int(np.count_nonzero(weights.psi == 0)),
                "n_zero_weight_outside_support": weights.zero_outside_support,
                "sup_distance_to_plugin": float(np.max(np.abs(h0_dfl - h0_plugin))),
            })
        write_long_csv(os.path.join(tmp, "curves.csv"), grid, curves_series)
        write_json(os.path.join(tmp, "curves.json"), {"grid": grid.to_list(), "curves": documents})
        if "shares" in cfg.modes:
            shares = contribution_shares(relaxed)
            write_long_csv(os.path.join(tmp, "shares.csv"), grid, shares.series())
        write_json(os.path.join(tmp, "masses.json"), partition.summary(table))
        write_json(os.path.join(tmp, "manifest.json"), {
            "command": "decompose",
            "config": cfg.to_dict(),
            "input_sha256": _sha256(cfg.input),
            "n_rows": len(table),
            "grid_size": len(grid),
            "versions": _versions(),
            "outputs": sorted(os.listdir(tmp)) + ["manifest.json"],
        })
    log.info("timings: %s", json.dumps(timings))
    return 0


def cmd_simulate(spec_path, out, seed=None) -> int:
    spec = load_spec(spec_path)
    if seed is not None:
        raw = dict(spec.raw)
        raw["seed"] = seed
        spec = type(spec).from_dict(raw)
    table = generate(spec)
    with _Staging(out) as tmp:
        write_table(table, os.path.join(tmp, "data.csv"))
        manifest = {"command": "simulate", "spec": spec.to_dict(), "seed": spec.seed,
                    "n_rows": len(table), "supports": spec.supports(),
                    "versions": _versions(), "outputs": ["data.csv"]}
        if spec.kind == DISCRETE_CELLS:
            grid = population_grid(spec)
            oracle = oracle_decompose(spec, grid)
            write_long_csv(os.path.join(tmp, "oracle_curves.csv"), grid, oracle.series())
            write_json(os.path.join(tmp, "oracle_masses.json"), oracle.masses)
            manifest["outputs"] += ["oracle_curves.csv", "oracle_masses.json"]
        else:
            manifest["note"] = "no oracle: exact enumeration is only available for discrete_cells specs"
        manifest["outputs"].append("manifest.json")
        write_json(os.path.join(tmp, "manifest.json"), manifest)
    return 0


def cmd_inspect_support(cfg: RunConfig) -> int:
    table = load_table(cfg.input, cfg.columns)
    partition = estimate_partition(table, cfg.support)
    with _Staging(cfg.out) as tmp:
        # re-read the raw rows so every input column is kept verbatim
        with open(cfg.input, newline="", encoding="utf-8") as src, \
                open(os.path.join(tmp, "regions.csv"), "w", newline="", encoding="utf-8") as dst:
            reader = csv.reader(src)
            writer = csv.writer(dst, lineterminator="\n")
            writer.writerow(next(reader) + ["region"])
            rows = (r for r in reader if r and any(c.strip() for c in r))
            for rec, region in zip(rows, partition.region):
                writer.writerow(rec + [region])
        write_json(os.path.join(tmp, "masses.json"), partition.summary(table))
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "simulate":
            return cmd_simulate(args.spec, args.out, args.seed)
        cfg = _config_from_args(args)
        if args.command == "decompose":
            return cmd_decompose(cfg)
        return cmd_inspect_support(cfg)
    except DecompositionError as exc:
        print(json.dumps(exc.to_dict(), sort_keys=True))
        return 1
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}, sort_keys=True))
        return 1


if __name__ == "__main__":
    sys.exit(main())
