"""Synthetic two-group data with known conditional CDFs, and an exact oracle.

Random numbers come from numpy's PCG64 bit generator seeded with the
spec's 64-bit ``seed``.  Draw order is fixed: for W then B, one uniform per
row picks the covariate (cell index or uniform covariate), one uniform per
row picks the outcome by inverse CDF, then (only if a weight law is given)
one uniform per row for the weight.  Tables are the portable fixture
format; other implementations should share CSVs rather than streams.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import special

from .data import CONTINUOUS, DISCRETE, EvaluationGrid, ObservationTable
from .decompose import RELAXED, DecompositionCurves
from .errors import InvalidSpec, NotDiscrete

DISCRETE_CELLS = "discrete_cells"
LOGIT_LINEAR = "logit_linear"
ROLES = ("W", "B")
_TOL = Fraction(1, 10**12)


def _frac(v) -> Fraction:
    if isinstance(v, Fraction):
        return v
    try:
        return Fraction(str(v))
    except (ValueError, ZeroDivisionError):
        raise InvalidSpec(f"not a number: {v!r}") from None


@dataclass(frozen=True)
class OutcomeLaw:
    atoms: tuple    # floats, strictly increasing
    probs: tuple    # Fractions summing to 1

    def cdf(self, y) -> Fraction:
        y = Fraction(float(y))
        return sum((p for a, p in zip(self.atoms, self.probs) if Fraction(a) <= y), Fraction(0))


@dataclass(frozen=True)
class Cell:
    values: tuple        # one string per discrete covariate
    mass: dict           # role -> Fraction
    outcome: dict        # role -> OutcomeLaw (only for roles with positive mass)


@dataclass(frozen=True)
class DgpSpec:
    kind: str
    n: dict                       # role -> sample size
    seed: int
    covariates: tuple = ()
    cells: tuple = ()             # DISCRETE_CELLS
    x_bounds: dict | None = None  # LOGIT_LINEAR: role -> (low, high)
    knots: tuple = ()
    a: dict | None = None         # role -> per-knot intercept path
    b: dict | None = None         # role -> per-knot slope path
    weight_law: tuple | None = None  # (low, high) uniform weights
    raw: dict | None = None

    @classmethod
    def from_dict(cls, d) -> "DgpSpec":
        if not isinstance(d, dict):
            raise InvalidSpec("spec must be a JSON object")
        kind = d.get("kind")
        try:
            n = {r: int(d["n"][r]) for r in ROLES}
            seed = int(d["seed"])
        except (KeyError, TypeError, ValueError):
            raise InvalidSpec("spec needs 'seed' and 'n': {'W': int, 'B': int}") from None
        if any(v < 2 for v in n.values()):
            raise InvalidSpec("each group needs at least 2 rows")
        if not 0 <= seed < 2**64:
            raise InvalidSpec("seed must be a 64-bit unsigned integer")
        wl = d.get("weights")
        weight_law = None
        if wl is not None:
            weight_law = (float(wl["low"]), float(wl["high"]))
            if not 0 < weight_law[0] <= weight_law[1]:
                raise InvalidSpec("weight law needs 0 < low <= high")
        if kind == DISCRETE_CELLS:
            return cls._discrete(d, n, seed, weight_law)
        if kind == LOGIT_LINEAR:
            return cls._logit_linear(d, n, seed, weight_law)
        raise InvalidSpec(f"unknown DGP kind {kind!r}")

    @classmethod
    def _discrete(cls, d, n, seed, weight_law):
        covs = tuple(d.get("covariates", ["x"]))
        cells = []
        for k, c in enumerate(d.get("cells", [])):
            values = tuple(str(v) for v in c["values"])
            if len(values) != len(covs):
                raise InvalidSpec(f"cell {k}: {len(values)} values for {len(covs)} covariates")
            mass = {r: _frac(c["mass"].get(r, 0)) for r in ROLES}
            law_src = c.get("outcome", {})
            outcome = {}
            for r in ROLES:
                if mass[r] < 0:
                    raise InvalidSpec(f"cell {k}: negative mass")
                if mass[r] == 0:
                    continue
                src = law_src.get(r, law_src) if isinstance(law_src, dict) else None
                if not src or "atoms" not in src:
                    raise InvalidSpec(f"cell {k}: no outcome law for group {r}")
                outcome[r] = _parse_law(src, f"cell {k}, group {r}")
            cells.append(Cell(values, mass, outcome))
        if not cells:
            raise InvalidSpec("no cells")
        if len({c.values for c in cells}) != len(cells):
            raise InvalidSpec("duplicate cell values")
        for r in ROLES:
            total = sum((c.mass[r] for c in cells), Fraction(0))
            if abs(total - 1) > _TOL:
                raise InvalidSpec(f"cell masses of group {r} sum to {float(total)}, not 1")
        return cls(DISCRETE_CELLS, n, seed, covs, tuple(cells), weight_law=weight_law, raw=d)

    @classmethod
    def _logit_linear(cls, d, n, seed, weight_law):
        name = d.get("covariate", "x")
        try:
            bounds = {r: (float(d["x"][r]["low"]), float(d["x"][r]["high"])) for r in ROLES}
            knots = tuple(float(v) for v in d["knots"])
            a = {r: tuple(float(v) for v in d["a"][r]) for r in ROLES}
            b = {r: tuple(float(v) for v in d["b"][r]) for r in ROLES}
        except (KeyError, TypeError, ValueError):
            raise InvalidSpec("logit_linear spec needs x bounds, knots, a and b paths") from None
        if len(knots) < 2 or not all(k1 < k2 for k1, k2 in zip(knots, knots[1:])):
            raise InvalidSpec("knots must be strictly increasing (at least 2)")
        for r in ROLES:
            lo, hi = bounds[r]
            if not lo <= hi:
                raise InvalidSpec(f"group {r}: empty covariate range")
            if len(a[r]) != len(knots) or len(b[r]) != len(knots):
                raise InvalidSpec(f"group {r}: coefficient paths must match the knots")
            # a + b x is linear in x, so checking both ends covers the range
            for x in (lo, hi):
                eta = np.array(a[r]) + np.array(b[r]) * x
                if np.any(np.diff(eta) < 0):
                    raise InvalidSpec(f"group {r}: conditional CDF decreases in y at x={x}")
        return cls(LOGIT_LINEAR, n, seed, (name,), x_bounds=bounds, knots=knots, a=a, b=b,
                   weight_law=weight_law, raw=d)

    def to_dict(self):
        return self.raw if self.raw is not None else {}

    def true_cdf(self, role, x, y) -> float:
        """Population ``H_role(y | x)``; ``x`` is a cell-value tuple or a float."""
        if self.kind == DISCRETE_CELLS:
            for c in self.cells:
                if c.values == tuple(str(v) for v in x):
                    return float(c.outcome[role].cdf(y))
            raise InvalidSpec(f"no cell {x!r}")
        if y < self.knots[0]:
            return 0.0
        if y >= self.knots[-1]:
            return 1.0
        eta_k = np.array(self.a[role]) + np.array(self.b[role]) * float(x)
        return float(special.expit(np.interp(y, self.knots, eta_k)))

    def supports(self):
        """Closed-form covariate supports per group."""
        if self.kind == DISCRETE_CELLS:
            return {r: [list(c.values) for c in self.cells if c.mass[r] > 0] for r in ROLES}
        return {r: list(self.x_bounds[r]) for r in ROLES}


def _parse_law(src, where):
    atoms = [float(a) for a in src["atoms"]]
    probs = [_frac(p) for p in src.get("probs", [1] * len(atoms))]
    if len(atoms) != len(probs) or not atoms:
        raise InvalidSpec(f"{where}: atoms and probs differ in length")
    if not all(np.isfinite(atoms)) or any(p < 0 for p in probs):
        raise InvalidSpec(f"{where}: invalid atoms or probabilities")
    if abs(sum(probs, Fraction(0)) - 1) > _TOL:
        raise InvalidSpec(f"{where}: outcome probabilities do not sum to 1")
    order = np.argsort(atoms, kind="stable")
    atoms = [atoms[i] for i in order]
    probs = [probs[i] for i in order]
    if len(set(atoms)) != len(atoms):
        raise InvalidSpec(f"{where}: repeated atom")
    return OutcomeLaw(tuple(atoms), tuple(probs))


def load_spec(path) -> DgpSpec:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InvalidSpec(f"spec is not valid JSON: {exc}") from None
    return DgpSpec.from_dict(d)


def _pick(probs, u):
    cum = np.cumsum(np.asarray(probs, float))
    idx = np.searchsorted(cum, u * cum[-1], side="right")
    return np.minimum(idx, len(cum) - 1)


def generate(spec: DgpSpec) -> ObservationTable:
    """Draw a table from ``spec``; identical (spec, seed) give identical tables."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    ys, gs, ws, covs = [], [], [], []
    for r in ROLES:
        n = spec.n[r]
        u_x = rng.random(n)
        u_y = rng.random(n)
        if spec.kind == DISCRETE_CELLS:
            cells = spec.cells
            idx = _pick([c.mass[r] for c in cells], u_x)
            y = np.empty(n)
            for k in np.unique(idx):
                law = cells[k].outcome[r]
                sel = idx == k
                y[sel] = np.asarray(law.atoms)[_pick(law.probs, u_y[sel])]
            covs.append(np.array([cells[k].values for k in idx], dtype=str).reshape(n, -1))
        else:
            lo, hi = spec.x_bounds[r]
            x = lo + (hi - lo) * u_x
            y = _logit_linear_draw(spec, r, x, u_y)
            covs.append(x[:, None])
        ys.append(y)
        gs.append(np.full(n, r))
        if spec.weight_law is not None:
            lo_w, hi_w = spec.weight_law
            ws.append(lo_w + (hi_w - lo_w) * rng.random(n))
        else:
            ws.append(np.ones(n))
    cov = np.vstack(covs)
    kind = DISCRETE if spec.kind == DISCRETE_CELLS else CONTINUOUS
    schema = tuple((name, kind) for name in spec.covariates)
    return ObservationTable(
        np.concatenate(ys), np.concatenate(gs), np.concatenate(ws),
        {name: cov[:, j] if kind == DISCRETE else cov[:, j].astype(float)
         for j, (name, _) in enumerate(schema)},
        schema, ROLES,
    )


def _logit_linear_draw(spec, role, x, u):
    """Inverse-CDF draw; mass below the first knot sits on it, mass above
    the last knot is censored to it."""
    knots = np.asarray(spec.knots)
    eta = np.asarray(spec.a[role])[None, :] + np.asarray(spec.b[role])[None, :] * x[:, None]
    target = special.logit(u)
    k = np.sum(eta < target[:, None], axis=1)
    y = np.empty(x.size)
    y[k == 0] = knots[0]
    y[k == knots.size] = knots[-1]
    mid = np.flatnonzero((k > 0) & (k < knots.size))
    lo, hi = k[mid] - 1, k[mid]
    e0, e1 = eta[mid, lo], eta[mid, hi]
    frac = (target[mid] - e0) / (e1 - e0)
    y[mid] = knots[lo] + frac * (knots[hi] - knots[lo])
    return y


def population_table(spec: DgpSpec) -> ObservationTable:
    """One row per (group, cell, atom) weighted by its population probability."""
    if spec.kind != DISCRETE_CELLS:
        raise NotDiscrete("population tables need a discrete_cells spec")
    ys, gs, ws, vals = [], [], [], []
    for r in ROLES:
        for c in spec.cells:
            if c.mass[r] == 0:
                continue
            law = c.outcome[r]
            for a, p in zip(law.atoms, law.probs):
                if p == 0:
                    continue
                ys.append(a)
                gs.append(r)
                ws.append(float(c.mass[r] * p))
                vals.append(c.values)
    vals = np.array(vals, dtype=str).reshape(len(ys), -1)
    return ObservationTable(
        np.array(ys), np.array(gs), np.array(ws),
        {name: vals[:, j] for j, name in enumerate(spec.covariates)},
        tuple((name, DISCRETE) for name in spec.covariates), ROLES,
    )


def population_grid(spec: DgpSpec) -> EvaluationGrid:
    """All outcome atoms of a discrete spec."""
    if spec.kind != DISCRETE_CELLS:
        raise NotDiscrete("population grids need a discrete_cells spec")
    atoms = sorted({a for c in spec.cells for law in c.outcome.values() for a in law.atoms})
    return EvaluationGrid(np.array(atoms))


def oracle_terms(spec: DgpSpec, grid) -> dict:
    """Exact population decomposition terms as lists of Fractions."""
    if spec.kind != DISCRETE_CELLS:
        raise NotDiscrete("the oracle enumerates discrete_cells specs only")
    points = grid.points if isinstance(grid, EvaluationGrid) else np.asarray(grid, float)
    cells = spec.cells
    common = [c for c in cells if c.mass["W"] > 0 and c.mass["B"] > 0]
    w_only = [c for c in cells if c.mass["W"] > 0 and c.mass["B"] == 0]
    b_only = [c for c in cells if c.mass["B"] > 0 and c.mass["W"] == 0]

    def mass(cs, r):
        return sum((c.mass[r] for c in cs), Fraction(0))

    def avg(model_role, cs, weight_role, y):
        m = mass(cs, weight_role)
        if m == 0:
            return None
        return sum((c.mass[weight_role] * c.outcome[model_role].cdf(y) for c in cs),
                   Fraction(0)) / m

    mw_out, mb_out = mass(w_only, "W"), mass(b_only, "B")
    out = {k: [] for k in ("total", "composition", "structure", "w_out", "b_out",
                           "H_W", "H_B")}
    zero = Fraction(0)
    for y in points:
        th_w_wc = avg("W", common, "W", y)
        th_w_bc = avg("W", common, "B", y)
        th_b_bc = avg("B", common, "B", y)
        th_w_wo = avg("W", w_only, "W", y)
        th_b_bo = avg("B", b_only, "B", y)
        comp = th_w_wc - th_w_bc if th_w_wc is not None and th_w_bc is not None else zero
        struct = th_w_bc - th_b_bc if th_w_bc is not None else zero
        w_out = (th_w_wo - th_w_wc) * mw_out if th_w_wo is not None and th_w_wc is not None else zero
        b_out = (th_b_bc - th_b_bo) * mb_out if th_b_bo is not None and th_b_bc is not None else zero
        out["composition"].append(comp)
        out["structure"].append(struct)
        out["w_out"].append(w_out)
        out["b_out"].append(b_out)
        out["total"].append(comp + struct + w_out + b_out)
        out["H_W"].append(sum((c.mass["W"] * c.outcome["W"].cdf(y) for c in cells if c.mass["W"] > 0), zero))
        out["H_B"].append(sum((c.mass["B"] * c.outcome["B"].cdf(y) for c in cells if c.mass["B"] > 0), zero))
    out["masses"] = {"mass_W_in": 1 - mw_out, "mass_W_out": mw_out,
                     "mass_B_in": 1 - mb_out, "mass_B_out": mb_out}
    return out


def oracle_decompose(spec: DgpSpec, grid: EvaluationGrid) -> DecompositionCurves:
    """Population decomposition of a discrete spec, by exact enumeration."""
    t = oracle_terms(spec, grid)

    def arr(key):
        return np.array([float(v) for v in t[key]])

    masses = {k: float(v) for k, v in t["masses"].items()}
    empirical = np.array([float(hw - hb) for hw, hb in zip(t["H_W"], t["H_B"])])
    return DecompositionCurves(
        grid, arr("total"), arr("composition"), arr("structure"), arr("w_out"), arr("b_out"),
        RELAXED, empirical, masses, {"oracle": True},
        {"ecdf_W": arr("H_W"), "ecdf_B": arr("H_B")},
    )
