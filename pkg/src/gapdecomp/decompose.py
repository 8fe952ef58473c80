"""Gap decompositions built from plug-in averages of fitted conditional CDFs.

Every term is a difference of averages ``theta[model | rows]`` -- a fitted
conditional CDF averaged over a weighted subsample -- so only two kinds of
estimate are needed: the conditional CDF models and the region masses.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import EvaluationGrid, ObservationTable, format_float, weighted_ecdf
from .distreg import (
    ConditionalCdf,
    CovariateTransform,
    LOGIT,
    SolverConfig,
    TransformSpec,
    fit_binary,
    fit_conditional_cdf,
    collapse_rows,
)
from .errors import (
    EmptyCommonSupport,
    EmptySelector,
    GridMismatch,
    InvalidConfig,
    PropensityOverflow,
    WrongMode,
)
from .support import B_ONLY, COMMON, W_ONLY, SupportPartition

RELAXED = "relaxed"
CONVENTIONAL_OS = "conventional_os"

_CHUNK = 20000


@dataclass(frozen=True)
class Selector:
    """Rows of one group role (``"W"`` or ``"B"``), optionally one region."""

    group: str
    region: str | None = None

    def mask(self, table, partition=None):
        g = table.is_w if self.group == "W" else table.is_b
        if self.region is None:
            return g
        if partition is None:
            raise InvalidConfig("a region selector needs a partition")
        return g & (partition.region == self.region)

    def describe(self, table):
        label = table.w_label if self.group == "W" else table.b_label
        return f"{label} rows" + (f" tagged {self.region}" if self.region else "")


@dataclass(frozen=True, eq=False)
class ThetaEstimate:
    group: str
    region: str
    curve: np.ndarray


def _average_curve(model: ConditionalCdf, table: ObservationTable, mask) -> np.ndarray:
    rows = np.flatnonzero(mask)
    w = table.weight[rows]
    acc = np.zeros(len(model.grid))
    for start in range(0, rows.size, _CHUNK):
        sub = np.zeros(len(table), bool)
        sub[rows[start:start + _CHUNK]] = True
        acc += w[start:start + _CHUNK] @ model.predict_table(table, sub)
    return acc / w.sum()


def theta(model: ConditionalCdf, table: ObservationTable, selector: Selector,
          partition: SupportPartition | None = None) -> ThetaEstimate:
    """Weighted average of ``model``'s predicted CDF over the selected rows."""
    mask = selector.mask(table, partition)
    if not mask.any():
        raise EmptySelector(f"no rows match {selector.describe(table)}")
    return ThetaEstimate(model.group, selector.describe(table), _average_curve(model, table, mask))


@dataclass(frozen=True, eq=False)
class DecompositionCurves:
    grid: EvaluationGrid
    total: np.ndarray
    composition: np.ndarray
    structure: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    mode: str
    empirical_total: np.ndarray
    masses: dict
    flags: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    _NAMES = ("total", "composition", "structure", "w_out", "b_out", "empirical_total")

    def series(self) -> dict:
        """Named curves in output order (conventional names get ``_os``)."""
        if self.mode == RELAXED:
            out = {n: getattr(self, n) for n in self._NAMES}
        else:
            out = {f"{n}_os": getattr(self, n)
                   for n in ("total", "composition", "structure", "empirical_total")}
        out.update(self.extra)
        return out

    def to_dict(self):
        return {
            "mode": self.mode,
            "grid": self.grid.to_list(),
            "masses": self.masses,
            "flags": self.flags,
            "series": {k: [float(v) for v in arr] for k, arr in self.series().items()},
        }


def _check_grids(model_w, model_b, grid):
    if model_w.grid != model_b.grid:
        raise GridMismatch("models were fitted on different grids")
    if grid is not None and grid != model_w.grid:
        raise GridMismatch("requested grid differs from the models' grid")
    return model_w.grid


def _mass_dict(partition):
    return {"mass_W_in": partition.mass_w_in, "mass_W_out": partition.mass_w_out,
            "mass_B_in": partition.mass_b_in, "mass_B_out": partition.mass_b_out}


def _empirical_gap(table, w_mask, b_mask, grid):
    return (weighted_ecdf(table.outcome[w_mask], table.weight[w_mask], grid.points)
            - weighted_ecdf(table.outcome[b_mask], table.weight[b_mask], grid.points))


def decompose_relaxed(table: ObservationTable, partition: SupportPartition,
                      model_w: ConditionalCdf, model_b: ConditionalCdf,
                      grid: EvaluationGrid | None = None) -> DecompositionCurves:
    """Four-term decomposition keeping every observation.

    composition  = theta[W | W common] - theta[W | B common]
    structure    = theta[W | B common] - theta[B | B common]
    w_out        = (theta[W | W only] - theta[W | W common]) * mu_W(outside S_B)
    b_out        = (theta[B | B common] - theta[B | B only]) * mu_B(outside S_W)

    ``total`` is their sum, so the adding-up identity holds by
    construction.  A term is the zero curve when its leading mass is 0 or
    a subsample it averages over is empty.
    """
    g = _check_grids(model_w, model_b, grid)
    m = len(g)
    zero = np.zeros(m)
    wc = partition.mask(table, "W", COMMON)
    bc = partition.mask(table, "B", COMMON)
    wo = partition.mask(table, "W", W_ONLY)
    bo = partition.mask(table, "B", B_ONLY)

    def avg(model, mask):
        return _average_curve(model, table, mask) if mask.any() else None

    th_w_wc = avg(model_w, wc)
    th_w_bc = avg(model_w, bc)
    th_b_bc = avg(model_b, bc)
    th_w_wo = avg(model_w, wo) if partition.mass_w_out > 0 else None
    th_b_bo = avg(model_b, bo) if partition.mass_b_out > 0 else None

    flags = {}
    comp = th_w_wc - th_w_bc if th_w_wc is not None and th_w_bc is not None else zero.copy()
    struct = th_w_bc - th_b_bc if th_w_bc is not None else zero.copy()
    if th_w_wo is not None and th_w_wc is not None:
        w_out = (th_w_wo - th_w_wc) * partition.mass_w_out
    else:
        w_out = zero.copy()
    if th_b_bo is not None and th_b_bc is not None:
        b_out = (th_b_bc - th_b_bo) * partition.mass_b_out
    else:
        b_out = zero.copy()
    if th_w_wc is None or th_b_bc is None:
        flags["empty_common_region"] = True
    total = comp + struct + w_out + b_out

    extra = {
        "ecdf_W": weighted_ecdf(table.outcome[table.is_w], table.weight[table.is_w], g.points),
        "ecdf_B": weighted_ecdf(table.outcome[table.is_b], table.weight[table.is_b], g.points),
    }
    return DecompositionCurves(
        g, total, comp, struct, w_out, b_out, RELAXED,
        _empirical_gap(table, table.is_w, table.is_b, g), _mass_dict(partition), flags, extra,
    )


def decompose_conventional(table: ObservationTable, partition: SupportPartition,
                           model_w: ConditionalCdf, model_b: ConditionalCdf,
                           grid: EvaluationGrid | None = None) -> DecompositionCurves:
    """Two-term decomposition on the common-support rows only.

    The models are normally fitted on the trimmed sample
    (see :func:`fit_group_models` with ``trimmed=True``).
    """
    g = _check_grids(model_w, model_b, grid)
    wc = partition.mask(table, "W", COMMON)
    bc = partition.mask(table, "B", COMMON)
    if not wc.any() or not bc.any():
        raise EmptyCommonSupport("a group has no rows in the common support")
    th_w_wc = _average_curve(model_w, table, wc)
    th_w_bc = _average_curve(model_w, table, bc)
    th_b_bc = _average_curve(model_b, table, bc)
    comp = th_w_wc - th_w_bc
    struct = th_w_bc - th_b_bc
    zero = np.zeros(len(g))
    return DecompositionCurves(
        g, comp + struct, comp, struct, zero, zero.copy(), CONVENTIONAL_OS,
        _empirical_gap(table, wc, bc, g), _mass_dict(partition),
    )


def fit_group_models(table: ObservationTable, grid: EvaluationGrid,
                     partition: SupportPartition | None = None, trimmed: bool = False,
                     transform: TransformSpec | None = None, link: str = LOGIT,
                     config: SolverConfig | None = None, n_jobs: int = 1):
    """Fit ``(model_W, model_B)``, on the common-support rows if ``trimmed``."""
    mask = None
    if trimmed:
        if partition is None:
            raise InvalidConfig("trimmed fits need a partition")
        mask = partition.region == COMMON
        for role, is_g in (("W", table.is_w), ("B", table.is_b)):
            if not np.any(mask & is_g):
                raise EmptyCommonSupport(f"group {role} has no rows in the common support")
    kw = dict(transform=transform, link=link, config=config, n_jobs=n_jobs, mask=mask)
    return (fit_conditional_cdf(table, table.w_label, grid, **kw),
            fit_conditional_cdf(table, table.b_label, grid, **kw))


# ---------------------------------------------------------------------------
# reweighting baseline

@dataclass(frozen=True)
class PropensityConfig:
    transform: TransformSpec = TransformSpec()
    link: str = LOGIT
    solver: SolverConfig = SolverConfig()
    psi_cap: float = 1e6

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"transform", "link", "solver", "psi_cap"}
        if unknown:
            raise InvalidConfig(f"unknown propensity keys {sorted(unknown)}")
        return cls(TransformSpec.from_dict(d.get("transform", {})), d.get("link", LOGIT),
                   SolverConfig.from_dict(d.get("solver", {})), float(d.get("psi_cap", 1e6)))

    def to_dict(self):
        return {"transform": self.transform.to_dict(), "link": self.link,
                "solver": self.solver.to_dict(), "psi_cap": self.psi_cap}


@dataclass(frozen=True, eq=False)
class DflWeights:
    psi: np.ndarray            # one per W row, in table order
    capped: np.ndarray         # rows whose factor hit the cap
    propensity_model: dict
    zero_outside_support: int  # W rows outside S_B with psi == 0


def dfl_counterfactual(table: ObservationTable, partition: SupportPartition | None,
                       grid: EvaluationGrid, config: PropensityConfig | None = None):
    """Reweighted counterfactual CDF of W outcomes under B's covariate law.

    ``psi(x) = [p(x) / P(B)] / [(1 - p(x)) / P(W)]`` with ``p(x)`` a fitted
    model of ``P(B | x)`` on the pooled weighted sample.  Returns the curve
    on ``grid`` and the per-row factors.
    """
    config = config or PropensityConfig()
    transform = CovariateTransform.fit(config.transform, table)
    X = transform.design(table)
    Xu, inverse = collapse_rows(X)
    w = table.weight
    a1 = np.bincount(inverse, weights=np.where(table.is_b, w, 0.0), minlength=Xu.shape[0])
    a0 = np.bincount(inverse, weights=np.where(table.is_b, 0.0, w), minlength=Xu.shape[0])
    fit = fit_binary(Xu, a1, a0, config.link, config.solver)

    p = fit.probabilities(X[table.is_w], config.link)
    share_b = w[table.is_b].sum() / w.sum()
    share_w = w[table.is_w].sum() / w.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        psi = (p / share_b) / ((1.0 - p) / share_w)
    capped = ~np.isfinite(psi) | (psi > config.psi_cap)
    psi = np.where(capped, config.psi_cap, psi)
    if capped.any():
        warnings.warn(PropensityOverflow(
            f"{int(capped.sum())} reweighting factors capped at {config.psi_cap:g}"), stacklevel=2)
    ww = w[table.is_w] * psi
    if not np.any(ww > 0):
        raise EmptySelector("all reweighting factors are zero")
    yw = table.outcome[table.is_w]
    keep = ww > 0
    curve = weighted_ecdf(yw[keep], ww[keep], grid.points)
    zero_out = 0
    if partition is not None:
        outside = partition.region[table.is_w] == W_ONLY
        zero_out = int(np.count_nonzero(outside & (psi == 0)))
    descriptor = {"transform": transform.to_dict(), "link": config.link, "flag": fit.flag,
                  "coefficients": fit.coef.tolist(), "grad_norm": None if math.isnan(fit.grad_norm) else fit.grad_norm,
                  "share_B": float(share_b), "share_W": float(share_w)}
    return curve, DflWeights(psi, capped, descriptor, zero_out)


# ---------------------------------------------------------------------------
# contribution shares

@dataclass(frozen=True, eq=False)
class ContributionShares:
    grid: EvaluationGrid
    composition: np.ndarray
    structure: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    out_of_support: np.ndarray
    degenerate: np.ndarray

    def series(self):
        return {"share_composition": self.composition, "share_structure": self.structure,
                "share_w_out": self.w_out, "share_b_out": self.b_out,
                "share_out_of_support": self.out_of_support,
                "degenerate": self.degenerate.astype(float)}


def contribution_shares(curves: DecompositionCurves) -> ContributionShares:
    """``|term| / sum of |terms|`` at each grid point; all zero (and flagged)
    where every term vanishes."""
    if curves.mode != RELAXED:
        raise WrongMode("contribution shares need relaxed-mode curves")
    terms = np.abs(np.vstack([curves.composition, curves.structure, curves.w_out, curves.b_out]))
    denom = terms.sum(axis=0)
    degenerate = denom == 0
    safe = np.where(degenerate, 1.0, denom)
    shares = np.where(degenerate, 0.0, terms / safe)
    oos = np.where(degenerate, 0.0, (terms[2] + terms[3]) / safe)
    return ContributionShares(curves.grid, *shares, oos, degenerate)


# ---------------------------------------------------------------------------
# serialisation

def write_long_csv(path, grid: EvaluationGrid, series: dict):
    """Long format: one ``y, series, value`` row per grid point and curve."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y", "series", "value"])
        for name, values in series.items():
            for y, v in zip(grid.points, values):
                w.writerow([format_float(y), name, format_float(v)])


def read_long_csv(path):
    """Inverse of :func:`write_long_csv`: ``(grid array, {series: array})``."""
    data = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            data.setdefault(rec["series"], []).append((float(rec["y"]), float(rec["value"])))
    grid = None
    out = {}
    for name, pairs in data.items():
        ys = np.array([p[0] for p in pairs])
        grid = ys if grid is None else grid
        out[name] = np.array([p[1] for p in pairs])
    return grid, out


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False, allow_nan=False)
        fh.write("\n")
