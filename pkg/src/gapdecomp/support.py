"""Covariate-support estimation and region tagging.

Each observation is tagged ``common`` when its covariates lie in the
estimated support of the *other* group, otherwise ``w_only`` / ``b_only``
according to its own group.  All supports are closed sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ObservationTable
from .errors import InvalidConfig, StrategyMismatch

COMMON = "common"
W_ONLY = "w_only"
B_ONLY = "b_only"

RANGE_1D = "range_1d"
CELL_RANGE = "cell_range"
EXPLICIT = "explicit"
AUTO = "auto"


@dataclass(frozen=True)
class SupportStrategy:
    kind: str = AUTO
    bounds: dict | None = None  # EXPLICIT only: {group: {covariate: [lo, hi] | [levels]}}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"kind", "bounds"}
        if unknown:
            raise InvalidConfig(f"unknown support keys {sorted(unknown)}")
        return cls(d.get("kind", AUTO), d.get("bounds"))

    def to_dict(self):
        return {"kind": self.kind, "bounds": self.bounds}


@dataclass(frozen=True, eq=False)
class SupportPartition:
    region: np.ndarray
    mass_w_in: float
    mass_w_out: float
    mass_b_in: float
    mass_b_out: float
    strategy: dict = field(default_factory=dict)

    def __post_init__(self):
        r = np.array(self.region, dtype=str)
        r.flags.writeable = False
        object.__setattr__(self, "region", r)

    def masses(self):
        return (self.mass_w_in, self.mass_w_out, self.mass_b_in, self.mass_b_out)

    def mask(self, table: ObservationTable, group: str, region: str | None):
        """Rows of one role (``"W"``/``"B"``) in one region (None = all)."""
        g = table.is_w if group == "W" else table.is_b
        if region is None:
            return g
        return g & (self.region == region)

    def counts(self, table: ObservationTable):
        return {
            "W_common": int(np.count_nonzero(table.is_w & (self.region == COMMON))),
            "W_only": int(np.count_nonzero(table.is_w & (self.region == W_ONLY))),
            "B_common": int(np.count_nonzero(table.is_b & (self.region == COMMON))),
            "B_only": int(np.count_nonzero(table.is_b & (self.region == B_ONLY))),
        }

    def summary(self, table: ObservationTable):
        """Masses, counts and pooled weighted shares of each region."""
        total = table.weight.sum()
        return {
            "mass_W_in": self.mass_w_in,
            "mass_W_out": self.mass_w_out,
            "mass_B_in": self.mass_b_in,
            "mass_B_out": self.mass_b_out,
            "counts": self.counts(table),
            "pooled_share_W_only": float(table.weight[self.region == W_ONLY].sum() / total),
            "pooled_share_B_only": float(table.weight[self.region == B_ONLY].sum() / total),
            "pooled_share_outside": float(table.weight[self.region != COMMON].sum() / total),
            "labels": {"W": table.w_label, "B": table.b_label},
            "strategy": self.strategy,
        }


def _cell_keys(table, mask=None):
    names = table.discrete
    if not names:
        n = len(table) if mask is None else int(np.count_nonzero(mask))
        return [()] * n
    cols = [table.covariates[c] if mask is None else table.covariates[c][mask] for c in names]
    return list(zip(*cols))


def _cell_boxes(table, group_mask):
    """Per discrete cell, bounding box of the continuous covariates."""
    cont = table.continuous
    keys = _cell_keys(table)
    boxes = {}
    X = np.column_stack([table.covariates[c] for c in cont]) if cont else np.zeros((len(table), 0))
    for i in np.flatnonzero(group_mask):
        k = keys[i]
        lo, hi = boxes.get(k, (X[i], X[i]))
        boxes[k] = (np.minimum(lo, X[i]), np.maximum(hi, X[i]))
    return boxes, keys, X


def _in_boxes(boxes, keys, X, rows):
    out = np.zeros(rows.size, bool)
    for j, i in enumerate(rows):
        box = boxes.get(keys[i])
        if box is not None:
            out[j] = bool(np.all(X[i] >= box[0]) and np.all(X[i] <= box[1]))
    return out


def _explicit_member(table, spec, rows):
    inside = np.ones(rows.size, bool)
    kinds = dict(table.schema)
    for cov, rule in (spec or {}).items():
        if cov not in kinds:
            raise InvalidConfig(f"explicit bounds name unknown covariate {cov!r}")
        col = table.covariates[cov][rows]
        if kinds[cov] == "continuous":
            lo, hi = float(rule[0]), float(rule[1])
            inside &= (col >= lo) & (col <= hi)
        else:
            inside &= np.isin(col, [str(v) for v in rule])
    return inside


def resolve_strategy(table: ObservationTable, strategy: SupportStrategy | None) -> str:
    kind = (strategy or SupportStrategy()).kind
    if kind == AUTO:
        if len(table.continuous) == 1 and not table.discrete:
            return RANGE_1D
        return CELL_RANGE
    if kind not in (RANGE_1D, CELL_RANGE, EXPLICIT):
        raise InvalidConfig(f"unknown support strategy {kind!r}")
    return kind


def estimate_partition(table: ObservationTable,
                       strategy: SupportStrategy | None = None) -> SupportPartition:
    strategy = strategy or SupportStrategy()
    kind = resolve_strategy(table, strategy)
    is_w, is_b = table.is_w, table.is_b
    w_rows, b_rows = np.flatnonzero(is_w), np.flatnonzero(is_b)
    descriptor = {"kind": kind}

    if kind == RANGE_1D:
        if len(table.continuous) != 1 or table.discrete:
            raise StrategyMismatch(
                f"range_1d needs exactly one continuous covariate and no discrete ones, "
                f"got {len(table.continuous)} continuous and {len(table.discrete)} discrete")
        x = table.covariates[table.continuous[0]]
        w_lo, w_hi = x[is_w].min(), x[is_w].max()
        b_lo, b_hi = x[is_b].min(), x[is_b].max()
        w_common = (x[w_rows] >= b_lo) & (x[w_rows] <= b_hi)
        b_common = (x[b_rows] >= w_lo) & (x[b_rows] <= w_hi)
        descriptor["support_W"] = [float(w_lo), float(w_hi)]
        descriptor["support_B"] = [float(b_lo), float(b_hi)]
    elif kind == CELL_RANGE:
        w_boxes, keys, X = _cell_boxes(table, is_w)
        b_boxes, _, _ = _cell_boxes(table, is_b)
        w_common = _in_boxes(b_boxes, keys, X, w_rows)
        b_common = _in_boxes(w_boxes, keys, X, b_rows)
        descriptor["cells_W"] = len(w_boxes)
        descriptor["cells_B"] = len(b_boxes)
    else:
        bounds = strategy.bounds or {}

        def pick(role, label):
            if label in bounds:
                return bounds[label]
            return bounds.get(role)

        w_common = _explicit_member(table, pick("B", table.b_label), w_rows)
        b_common = _explicit_member(table, pick("W", table.w_label), b_rows)
        descriptor["bounds"] = bounds

    region = np.full(len(table), COMMON, dtype=object)
    region[w_rows[~w_common]] = W_ONLY
    region[b_rows[~b_common]] = B_ONLY

    w = table.weight
    tw, tb = w[is_w].sum(), w[is_b].sum()
    w_out = w[w_rows[~w_common]].sum() / tw
    b_out = w[b_rows[~b_common]].sum() / tb
    return SupportPartition(
        region.astype(str),
        float(w[w_rows[w_common]].sum() / tw), float(w_out),
        float(w[b_rows[b_common]].sum() / tb), float(b_out),
        descriptor,
    )


def region_masses(partition: SupportPartition):
    """``(mu_W(S_B), mu_W(not S_B), mu_B(S_W), mu_B(not S_W))``."""
    return partition.masses()
