"""Distribution regression: conditional CDFs from per-threshold binary fits.

For every grid point ``t`` a binary model ``P(Y <= t | x) = link(T(x)' a)``
is fitted by weighted maximum likelihood.  Fits at different thresholds
share nothing, so they may run in any order or in parallel with identical
results.

Separated thresholds (some direction ``d`` with ``T(x_i)' d >= 0`` for every
response-1 row and ``<= 0`` for every response-0 row) have no finite MLE.
They are fitted in the extended sense: rows strictly separated by ``d`` get
probability exactly 0 or 1 and the remaining rows are fitted normally.
This is the pointwise limit of the likelihood-maximising sequence and is
what makes saturated models reproduce within-cell frequencies exactly.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, sparse, special

from .data import CONTINUOUS, EvaluationGrid, ObservationTable
from .errors import (
    InvalidConfig,
    NonConformableCovariates,
    RankDeficientDesign,
    SolverDivergence,
)

LOGIT = "logit"
PROBIT = "probit"

FITTED = "fitted"
ALL_BELOW = "all_below"    # every response is 1: predict 1
ALL_ABOVE = "all_above"    # every response is 0: predict 0
SEPARATED = "separated"    # extended MLE with a separating direction
ECDF_FALLBACK = "ecdf_fallback"
DIVERGED = "diverged"

# a final Newton step moving the index this much triggers the separation check
_DRIFT_SEPARATION = 1e-2
# direction scores at or beyond this (after scaling) count as separated
_DIRECTION_CUT = 0.5


# ---------------------------------------------------------------------------
# links

def link_cdf(eta, link):
    if link == LOGIT:
        return special.expit(eta)
    if link == PROBIT:
        return special.ndtr(eta)
    raise InvalidConfig(f"unknown link {link!r}")


def link_inverse(p, link):
    if link == LOGIT:
        return special.logit(p)
    if link == PROBIT:
        return special.ndtri(p)
    raise InvalidConfig(f"unknown link {link!r}")


def _loglik_terms(eta, link):
    """log F(eta), log(1 - F(eta))."""
    if link == LOGIT:
        return -np.logaddexp(0.0, -eta), -np.logaddexp(0.0, eta)
    return special.log_ndtr(eta), special.log_ndtr(-eta)


def _score_curvature(eta, a1, a0, link):
    """Per-row d loglik / d eta and -d^2 loglik / d eta^2."""
    if link == LOGIT:
        p = special.expit(eta)
        return a1 * (1.0 - p) - a0 * p, (a1 + a0) * p * (1.0 - p)
    logphi = -0.5 * eta * eta - 0.5 * math.log(2.0 * math.pi)
    lam1 = np.exp(logphi - special.log_ndtr(eta))
    lam0 = np.exp(logphi - special.log_ndtr(-eta))
    score = a1 * lam1 - a0 * lam0
    curv = a1 * lam1 * (eta + lam1) + a0 * lam0 * (lam0 - eta)
    return score, curv


# ---------------------------------------------------------------------------
# covariate transform

@dataclass(frozen=True)
class TransformSpec:
    """Basis recipe: intercept, polynomial powers of each (standardised)
    continuous covariate up to ``degree``, products of the named
    ``interactions`` pairs, and discrete covariates as per-level dummies
    (``dummies``), one dummy per observed cell of all discrete covariates
    jointly (``cells``, the saturated choice) or ``none``."""

    degree: int = 3
    interactions: tuple = ()
    discrete: str = "dummies"

    @classmethod
    def intercept_only(cls):
        return cls(degree=0, discrete="none")

    @classmethod
    def saturated(cls):
        return cls(degree=0, discrete="cells")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"degree", "interactions", "discrete"}
        if unknown:
            raise InvalidConfig(f"unknown transform keys {sorted(unknown)}")
        spec = cls(int(d.get("degree", 3)),
                   tuple(tuple(p) for p in d.get("interactions", ())),
                   d.get("discrete", "dummies"))
        if spec.discrete not in ("dummies", "cells", "none"):
            raise InvalidConfig(f"unknown discrete expansion {spec.discrete!r}")
        if spec.degree < 0:
            raise InvalidConfig("degree must be >= 0")
        return spec

    def to_dict(self):
        return {"degree": self.degree, "interactions": [list(p) for p in self.interactions],
                "discrete": self.discrete}


@dataclass(frozen=True)
class CovariateTransform:
    """A :class:`TransformSpec` bound to data-derived constants
    (standardisation of continuous covariates, discrete levels)."""

    spec: TransformSpec
    schema: tuple
    centers: dict = field(default_factory=dict)
    scales: dict = field(default_factory=dict)
    levels: dict = field(default_factory=dict)   # dummies: covariate -> levels
    cells: tuple = ()                            # cells: observed level tuples

    @classmethod
    def fit(cls, spec: TransformSpec, table: ObservationTable, mask=None):
        mask = np.ones(len(table), bool) if mask is None else np.asarray(mask, bool)
        centers, scales, levels = {}, {}, {}
        for name in table.continuous:
            col = table.covariates[name][mask]
            c = float(col.mean())
            s = float(col.std())
            centers[name] = c
            scales[name] = s if s > 0 else 1.0
        disc = table.discrete
        cells = ()
        if spec.discrete == "dummies":
            for name in disc:
                levels[name] = sorted(set(table.covariates[name][mask].tolist()))
        elif spec.discrete == "cells" and disc:
            cols = [table.covariates[name][mask] for name in disc]
            cells = tuple(sorted(set(zip(*[c.tolist() for c in cols]))))
        for a, b in spec.interactions:
            for v in (a, b):
                if v not in centers:
                    raise InvalidConfig(f"interaction names non-continuous covariate {v!r}")
        return cls(spec, tuple(table.schema), centers, scales, levels, cells)

    @property
    def names(self):
        out = ["(intercept)"]
        for name, kind in self.schema:
            if kind == CONTINUOUS:
                out += [name if k == 1 else f"{name}^{k}" for k in range(1, self.spec.degree + 1)]
        out += [f"{a}*{b}" for a, b in self.spec.interactions]
        if self.spec.discrete == "dummies":
            for name, lv in self.levels.items():
                out += [f"{name}={v}" for v in lv[1:]]
        elif self.spec.discrete == "cells":
            out += ["cell=" + "|".join(c) for c in self.cells[1:]]
        return out

    @property
    def dim(self):
        return len(self.names)

    def design_from_columns(self, cols: dict, n: int) -> np.ndarray:
        parts = [np.ones((n, 1))]
        z = {}
        for name, kind in self.schema:
            if kind != CONTINUOUS:
                continue
            zc = (np.asarray(cols[name], float) - self.centers[name]) / self.scales[name]
            z[name] = zc
            for k in range(1, self.spec.degree + 1):
                parts.append((zc ** k)[:, None])
        for a, b in self.spec.interactions:
            parts.append((z[a] * z[b])[:, None])
        if self.spec.discrete == "dummies":
            for name, lv in self.levels.items():
                col = np.asarray(cols[name]).astype(str)
                unknown = set(col.tolist()) - set(lv)
                if unknown:
                    raise NonConformableCovariates(
                        f"covariate {name!r} has levels {sorted(unknown)} unseen when fitting")
                for v in lv[1:]:
                    parts.append((col == v).astype(float)[:, None])
        elif self.spec.discrete == "cells" and self.cells:
            disc = [name for name, kind in self.schema if kind != CONTINUOUS]
            keys = list(zip(*[np.asarray(cols[c]).astype(str).tolist() for c in disc]))
            index = {c: j for j, c in enumerate(self.cells)}
            missing = set(keys) - set(index)
            if missing:
                raise NonConformableCovariates(f"cells {sorted(missing)} unseen when fitting")
            D = np.zeros((n, len(self.cells) - 1))
            for i, k in enumerate(keys):
                j = index[k]
                if j:
                    D[i, j - 1] = 1.0
            parts.append(D)
        return np.hstack(parts)

    def design(self, table: ObservationTable, mask=None) -> np.ndarray:
        if [tuple(s) for s in table.schema] != [tuple(s) for s in self.schema]:
            raise NonConformableCovariates("table schema differs from the fitted transform")
        if mask is None:
            return self.design_from_columns(table.covariates, len(table))
        mask = np.asarray(mask, bool)
        cols = {k: v[mask] for k, v in table.covariates.items()}
        return self.design_from_columns(cols, int(np.count_nonzero(mask)))

    def design_row(self, x) -> np.ndarray:
        """Design row for one covariate vector (schema order, or a name -> value dict)."""
        if isinstance(x, dict):
            missing = [n for n, _ in self.schema if n not in x]
            if missing:
                raise NonConformableCovariates(f"missing covariates {missing}")
            x = [x[n] for n, _ in self.schema]
        x = list(x)
        if len(x) != len(self.schema):
            raise NonConformableCovariates(
                f"expected {len(self.schema)} covariates, got {len(x)}")
        cols = {}
        for (name, kind), v in zip(self.schema, x):
            cols[name] = np.array([float(v)]) if kind == CONTINUOUS else np.array([str(v)])
        return self.design_from_columns(cols, 1)[0]

    def to_dict(self):
        return {
            "spec": self.spec.to_dict(),
            "schema": [list(s) for s in self.schema],
            "centers": self.centers,
            "scales": self.scales,
            "levels": self.levels,
            "cells": [list(c) for c in self.cells],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            TransformSpec.from_dict(d["spec"]),
            tuple(tuple(s) for s in d["schema"]),
            dict(d.get("centers", {})),
            dict(d.get("scales", {})),
            {k: list(v) for k, v in d.get("levels", {}).items()},
            tuple(tuple(c) for c in d.get("cells", ())),
        )


# ---------------------------------------------------------------------------
# binary MLE

@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 100
    tol: float = 1e-8          # on the gradient norm of the mean log-likelihood
    ridge: float = 1e-10       # added to the Hessian diagonal
    coef_bound: float = 1e4    # larger coefficient norms trigger the ECDF fallback

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"max_iter", "tol", "ridge", "coef_bound"}
        if unknown:
            raise InvalidConfig(f"unknown solver keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {"max_iter": self.max_iter, "tol": self.tol, "ridge": self.ridge,
                "coef_bound": self.coef_bound}


@dataclass
class BinaryFit:
    coef: np.ndarray
    direction: np.ndarray | None
    flag: str
    grad_norm: float
    iterations: int
    n_separated: int = 0

    def probabilities(self, X, link=LOGIT):
        """Fitted ``P(response = 1 | x)`` for the rows of ``X``."""
        X = np.atleast_2d(X)
        if self.flag == ALL_BELOW:
            return np.ones(X.shape[0])
        if self.flag == ALL_ABOVE:
            return np.zeros(X.shape[0])
        p = link_cdf(X @ self.coef, link)
        if self.direction is not None:
            sc = X @ self.direction
            p = np.where(sc >= _DIRECTION_CUT, 1.0, np.where(sc <= -_DIRECTION_CUT, 0.0, p))
        return p


def _objective(X, a1, a0, coef, link):
    eta = X @ coef
    l1, l0 = _loglik_terms(eta, link)
    # rows with zero weight must not contribute -inf * 0
    return float(np.sum(np.where(a1 > 0, a1 * l1, 0.0)) + np.sum(np.where(a0 > 0, a0 * l0, 0.0)))


def _newton(X, a1, a0, link, cfg):
    """Maximise sum a1 log F + a0 log(1-F).

    Returns ``(coef, grad_norm, iters, drift)`` where ``drift`` is the
    largest change of the linear index over the rows from the final Newton
    step.  At a finite optimum it is negligible; along a separating
    direction curvature and gradient vanish together and it stays near 1.
    """
    p = X.shape[1]
    coef = np.zeros(p)
    m = a1.sum() / (a1.sum() + a0.sum())
    coef[0] = float(link_inverse(min(max(m, 1e-12), 1 - 1e-12), link))
    f = _objective(X, a1, a0, coef, link)
    eye = cfg.ridge * np.eye(p)
    polished = False
    gnorm = math.inf
    drift = math.inf
    live = (a1 + a0) > 0
    it = 0
    for it in range(1, cfg.max_iter + 1):
        score, curv = _score_curvature(X @ coef, a1, a0, link)
        grad = X.T @ score
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= cfg.tol:
            if polished:
                break
            polished = True
        hess = (X * curv[:, None]).T @ X + eye
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        if polished:
            # objective changes are below rounding here; judge by the gradient
            drift = float(np.max(np.abs(X[live] @ step)))
            cand = coef + step
            s2, _ = _score_curvature(X @ cand, a1, a0, link)
            g2 = float(np.linalg.norm(X.T @ s2))
            if g2 <= gnorm:
                coef, gnorm = cand, g2
            break
        t = 1.0
        for _ in range(40):
            cand = coef + t * step
            fc = _objective(X, a1, a0, cand, link)
            if fc >= f:
                break
            t *= 0.5
        else:
            break
        coef, f = cand, fc
    else:
        score, _ = _score_curvature(X @ coef, a1, a0, link)
        gnorm = float(np.linalg.norm(X.T @ score))
    return coef, gnorm, it, drift


def _separating_direction(X, a1, a0):
    """Direction strictly separating a maximal set of rows, or None.

    Solves ``max sum s_k`` s.t. ``s_k <= sign_k x_k' d``, ``0 <= s_k <= 1``
    over the signed rows (a row with both responses contributes both signs,
    which pins ``x' d = 0``).  At the optimum ``s_k = 1`` exactly on the
    maximal separable set.
    """
    rows1 = np.flatnonzero(a1 > 0)
    rows0 = np.flatnonzero(a0 > 0)
    S = np.vstack([X[rows1], -X[rows0]])
    m, p = S.shape
    c = np.concatenate([np.zeros(p), -np.ones(m)])
    A = sparse.hstack([sparse.csr_matrix(-S), sparse.identity(m, format="csr")], format="csr")
    bounds = np.array([(-1e6, 1e6)] * p + [(0.0, 1.0)] * m)
    res = optimize.linprog(c, A_ub=A, b_ub=np.zeros(m), bounds=bounds, method="highs")
    if res.status != 0 or -res.fun < 0.5:
        return None
    d = res.x[:p]
    scores = S @ d
    sep = scores > _DIRECTION_CUT
    if not sep.any():
        return None
    d = d / scores[sep].min()
    return d


def fit_binary(X, a1, a0, link=LOGIT, cfg: SolverConfig | None = None) -> BinaryFit:
    """Weighted binary MLE on a design ``X``.

    ``a1`` / ``a0`` are per-row weights of response 1 / response 0 (a row
    may carry both, which is how duplicate design rows are collapsed).
    """
    cfg = cfg or SolverConfig()
    X = np.asarray(X, float)
    a1 = np.asarray(a1, float)
    a0 = np.asarray(a0, float)
    total = a1.sum() + a0.sum()
    a1, a0 = a1 / total, a0 / total
    p = X.shape[1]
    if a1.sum() == 0:
        return BinaryFit(np.zeros(p), None, ALL_ABOVE, 0.0, 0)
    if a0.sum() == 0:
        return BinaryFit(np.zeros(p), None, ALL_BELOW, 0.0, 0)

    coef, gnorm, iters, drift = _newton(X, a1, a0, link, cfg)
    live = (a1 + a0) > 0
    direction = None
    n_sep = 0
    if gnorm > cfg.tol or drift > _DRIFT_SEPARATION:
        direction = _separating_direction(X, a1, a0)
        if direction is not None:
            sc = X @ direction
            separated = np.abs(sc) >= _DIRECTION_CUT
            n_sep = int(np.count_nonzero(separated & live))
            b1 = np.where(separated, 0.0, a1)
            b0 = np.where(separated, 0.0, a0)
            if b1.sum() > 0 and b0.sum() > 0:
                coef, gnorm, more, _ = _newton(X, b1, b0, link, cfg)
                iters += more
            else:
                coef, gnorm = np.zeros(p), 0.0
    flag = SEPARATED if direction is not None else FITTED
    if not np.all(np.isfinite(coef)) or np.linalg.norm(coef) > cfg.coef_bound:
        m = a1.sum()
        coef = np.zeros(p)
        coef[0] = float(link_inverse(m, link))
        return BinaryFit(coef, None, ECDF_FALLBACK, float("nan"), iters)
    if gnorm > cfg.tol:
        flag = DIVERGED
    return BinaryFit(coef, direction, flag, gnorm, iters, n_sep)


# ---------------------------------------------------------------------------
# conditional CDF model

@dataclass(frozen=True, eq=False)
class ConditionalCdf:
    group: str
    grid: EvaluationGrid
    transform: CovariateTransform
    link: str
    coefficients: np.ndarray           # (M, dim)
    flags: tuple                       # one per grid point
    directions: np.ndarray | None = None   # (M, dim); zero rows where unused
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        coef = np.array(self.coefficients, float, ndmin=2)
        if coef.shape != (len(self.grid), self.transform.dim):
            raise InvalidConfig(
                f"coefficients shape {coef.shape} != ({len(self.grid)}, {self.transform.dim})")
        if len(self.flags) != len(self.grid):
            raise InvalidConfig("one flag per grid point required")
        dirs = self.directions
        dirs = np.zeros_like(coef) if dirs is None else np.array(dirs, float, ndmin=2)
        coef.flags.writeable = False
        dirs.flags.writeable = False
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "directions", dirs)
        object.__setattr__(self, "flags", tuple(self.flags))

    def raw_curves(self, design: np.ndarray) -> np.ndarray:
        """Unrearranged predictions, shape (rows, grid)."""
        design = np.atleast_2d(design)
        out = link_cdf(design @ self.coefficients.T, self.link)
        for m, flag in enumerate(self.flags):
            if flag == ALL_BELOW:
                out[:, m] = 1.0
            elif flag == ALL_ABOVE:
                out[:, m] = 0.0
            elif flag == SEPARATED:
                sc = design @ self.directions[m]
                out[sc >= _DIRECTION_CUT, m] = 1.0
                out[sc <= -_DIRECTION_CUT, m] = 0.0
        return out

    def curves(self, design: np.ndarray) -> np.ndarray:
        """Monotone predicted CDF at every grid point, shape (rows, grid)."""
        return rearrange(self.raw_curves(design))

    def predict_table(self, table: ObservationTable, mask=None) -> np.ndarray:
        return self.curves(self.transform.design(table, mask))

    def to_dict(self):
        return {
            "group": self.group,
            "grid": self.grid.to_list(),
            "link": self.link,
            "transform": self.transform.to_dict(),
            "coefficients": self.coefficients.tolist(),
            "directions": self.directions.tolist(),
            "flags": list(self.flags),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["group"], EvaluationGrid(d["grid"]), CovariateTransform.from_dict(d["transform"]),
            d["link"], np.array(d["coefficients"], float), tuple(d["flags"]),
            np.array(d["directions"], float) if d.get("directions") is not None else None,
            d.get("diagnostics", {}),
        )


def rearrange(curve) -> np.ndarray:
    """Running maximum along the last axis, clipped to [0, 1]."""
    arr = np.clip(np.asarray(curve, float), 0.0, 1.0)
    return np.maximum.accumulate(arr, axis=-1)


def predict(model: ConditionalCdf, x, y: float) -> float:
    """``H(y | x)`` with step interpolation on the model grid.

    Uses the largest grid point ``<= y``; below the first grid point the
    prediction is 0.
    """
    row = model.transform.design_row(x)
    curve = model.curves(row[None, :])[0]
    k = int(np.searchsorted(model.grid.points, y, side="right")) - 1
    if k < 0:
        return 0.0
    return float(curve[k])


def collapse_rows(X):
    """Unique design rows and the row -> unique index map."""
    uniq, inverse = np.unique(X, axis=0, return_inverse=True)
    return uniq, inverse.ravel()


def fit_conditional_cdf(table: ObservationTable, group: str, grid: EvaluationGrid,
                        transform: TransformSpec | CovariateTransform | None = None,
                        link: str = LOGIT, config: SolverConfig | None = None,
                        n_jobs: int = 1, mask=None) -> ConditionalCdf:
    """Fit ``H_group(y | x)`` at every grid point.

    ``group`` is a group label of ``table``.  ``mask`` optionally restricts
    the rows further (e.g. to the common support).  A
    :class:`TransformSpec` is bound to the selected rows; a ready
    :class:`CovariateTransform` is used as is.
    """
    if link not in (LOGIT, PROBIT):
        raise InvalidConfig(f"unknown link {link!r}")
    config = config or SolverConfig()
    rows = table.group_mask(group)
    if mask is not None:
        rows = rows & np.asarray(mask, bool)
    if not rows.any():
        raise InvalidConfig(f"no rows selected for group {group!r}")
    if transform is None:
        transform = TransformSpec()
    if isinstance(transform, TransformSpec):
        transform = CovariateTransform.fit(transform, table, rows)
    X = transform.design(table, rows)
    zero_cols = [transform.names[j] for j in range(X.shape[1]) if not np.any(X[:, j])]
    if zero_cols:
        raise RankDeficientDesign(f"design columns identically zero: {zero_cols}",
                                  columns=zero_cols)
    y = table.outcome[rows]
    w = table.weight[rows]
    Xu, inverse = collapse_rows(X)
    nu = Xu.shape[0]

    def one(t):
        below = y <= t
        a1 = np.bincount(inverse, weights=np.where(below, w, 0.0), minlength=nu)
        a0 = np.bincount(inverse, weights=np.where(below, 0.0, w), minlength=nu)
        return fit_binary(Xu, a1, a0, link, config)

    points = list(grid.points)
    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            fits = list(pool.map(one, points))
    else:
        fits = [one(t) for t in points]

    diverged = [float(t) for t, f in zip(points, fits) if f.flag == DIVERGED]
    if diverged:
        warnings.warn(SolverDivergence(f"gradient tolerance not reached at thresholds {diverged}"),
                      stacklevel=2)
    diagnostics = {
        "grad_norm": [None if math.isnan(f.grad_norm) else f.grad_norm for f in fits],
        "iterations": [f.iterations for f in fits],
        "n_separated": [f.n_separated for f in fits],
        "n_rows": int(np.count_nonzero(rows)),
        "diverged_thresholds": diverged,
    }
    return ConditionalCdf(
        group, grid, transform, link,
        np.vstack([f.coef for f in fits]),
        tuple(f.flag for f in fits),
        np.vstack([f.direction if f.direction is not None else np.zeros(X.shape[1])
                   for f in fits]),
        diagnostics,
    )
