"""Observation tables, weighted empirical CDFs and evaluation grids."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    DegenerateOutcome,
    EmptyGroup,
    EmptyInput,
    FewerThanTwoGroups,
    InvalidConfig,
    LengthMismatch,
    MoreThanTwoGroups,
    NonNumericValue,
    UnknownColumn,
)

CONTINUOUS = "continuous"
DISCRETE = "discrete"


def _frozen(arr, dtype=None):
    out = np.array(arr, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


def format_float(x: float) -> str:
    """17 significant digits; round-trips every finite double."""
    return format(float(x), ".17g")


@dataclass(frozen=True)
class Observation:
    outcome: float
    group: str
    weight: float
    covariates: tuple


@dataclass(frozen=True, eq=False)
class ObservationTable:
    """Weighted two-group sample.

    ``labels`` is the ordered pair ``(W, B)``: W is the group whose
    conditional CDF builds the counterfactual, B the group whose covariate
    law it is integrated against.  Discrete covariates are stored as
    strings, continuous ones as float64.
    """

    outcome: np.ndarray
    group: np.ndarray
    weight: np.ndarray
    covariates: dict = field(repr=False)
    schema: tuple = ()
    labels: tuple = ("W", "B")

    def __post_init__(self):
        y = _frozen(self.outcome, float)
        g = _frozen(np.asarray(self.group).astype(str))
        w = _frozen(self.weight, float)
        n = y.shape[0]
        if g.shape[0] != n or w.shape[0] != n:
            raise LengthMismatch("outcome, group and weight lengths differ")
        schema = tuple((str(name), str(kind)) for name, kind in self.schema)
        covs = {}
        for name, kind in schema:
            if name not in self.covariates:
                raise UnknownColumn(f"covariate {name!r} missing", column=name)
            if kind == CONTINUOUS:
                col = _frozen(self.covariates[name], float)
                if not np.all(np.isfinite(col)):
                    raise NonNumericValue(f"non-finite value in covariate {name!r}", column=name)
            elif kind == DISCRETE:
                col = _frozen(np.asarray(self.covariates[name]).astype(str))
            else:
                raise InvalidConfig(f"unknown covariate kind {kind!r}")
            if col.shape[0] != n:
                raise LengthMismatch(f"covariate {name!r} has wrong length")
            covs[name] = col
        labels = tuple(str(v) for v in self.labels)
        if len(labels) != 2 or labels[0] == labels[1]:
            raise InvalidConfig("labels must be two distinct group names")
        if not np.all(np.isfinite(y)):
            raise NonNumericValue("non-finite outcome")
        if not (np.all(np.isfinite(w)) and np.all(w > 0)):
            raise NonNumericValue("weights must be finite and positive")
        present = set(np.unique(g).tolist())
        extra = present - set(labels)
        if extra:
            raise MoreThanTwoGroups(f"unexpected group labels {sorted(extra)}")
        for lab in labels:
            if np.count_nonzero(g == lab) < 2:
                raise EmptyGroup(f"group {lab!r} has fewer than 2 rows", group=lab)
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "group", g)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "covariates", covs)
        object.__setattr__(self, "schema", schema)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.outcome.shape[0]

    def __iter__(self) -> Iterator[Observation]:
        for i in range(len(self)):
            yield self.row(i)

    def row(self, i: int) -> Observation:
        return Observation(
            float(self.outcome[i]),
            str(self.group[i]),
            float(self.weight[i]),
            tuple(self.covariates[name][i] for name, _ in self.schema),
        )

    @property
    def w_label(self):
        return self.labels[0]

    @property
    def b_label(self):
        return self.labels[1]

    @property
    def is_w(self):
        return self.group == self.labels[0]

    @property
    def is_b(self):
        return self.group == self.labels[1]

    def group_mask(self, label):
        if label not in self.labels:
            raise EmptyGroup(f"group {label!r} not in table", group=label)
        return self.group == label

    @property
    def continuous(self):
        return [name for name, kind in self.schema if kind == CONTINUOUS]

    @property
    def discrete(self):
        return [name for name, kind in self.schema if kind == DISCRETE]

    def subset(self, mask) -> "ObservationTable":
        """Rows selected by a boolean mask (both groups must keep >= 2 rows)."""
        mask = np.asarray(mask, bool)
        return ObservationTable(
            self.outcome[mask],
            self.group[mask],
            self.weight[mask],
            {k: v[mask] for k, v in self.covariates.items()},
            self.schema,
            self.labels,
        )

    def swap_groups(self) -> "ObservationTable":
        """Same rows with the roles of W and B exchanged."""
        return ObservationTable(
            self.outcome, self.group, self.weight, self.covariates, self.schema,
            (self.labels[1], self.labels[0]),
        )


@dataclass(frozen=True)
class ColumnMapping:
    """How CSV columns map onto the table fields."""

    outcome: str
    group: str
    covariates: Sequence = ()  # (name, kind) pairs
    weight: str | None = None
    w_label: str | None = None
    b_label: str | None = None

    @classmethod
    def from_dict(cls, d):
        known = {"outcome", "group", "covariates", "weight", "w_label", "b_label"}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown column-mapping keys {sorted(unknown)}")
        covs = []
        for item in d.get("covariates", []):
            if isinstance(item, str):
                covs.append((item, CONTINUOUS))
            elif isinstance(item, dict):
                covs.append((item["name"], item.get("kind", CONTINUOUS)))
            else:
                covs.append((item[0], item[1]))
        return cls(d["outcome"], d["group"], tuple(covs), d.get("weight"),
                   d.get("w_label"), d.get("b_label"))

    def to_dict(self):
        return {
            "outcome": self.outcome,
            "group": self.group,
            "covariates": [{"name": n, "kind": k} for n, k in self.covariates],
            "weight": self.weight,
            "w_label": self.w_label,
            "b_label": self.b_label,
        }


def _parse_float(text, row, col):
    try:
        val = float(text)
    except (TypeError, ValueError):
        raise NonNumericValue(f"row {row}, column {col!r}: not a number: {text!r}",
                              row=row, column=col) from None
    if not math.isfinite(val):
        raise NonNumericValue(f"row {row}, column {col!r}: non-finite value {text!r}",
                              row=row, column=col)
    return val


def _resolve_labels(present, mapping):
    if len(present) < 2:
        raise FewerThanTwoGroups(f"found group labels {sorted(present)}")
    if len(present) > 2:
        raise MoreThanTwoGroups(f"found group labels {sorted(present)}")
    w, b = mapping.w_label, mapping.b_label
    if w is None and b is None:
        if present == {"W", "B"}:
            return "W", "B"
        w, b = sorted(present)
    elif w is None:
        w = (present - {b}).pop() if b in present else None
    elif b is None:
        b = (present - {w}).pop() if w in present else None
    for lab in (w, b):
        if lab not in present:
            raise EmptyGroup(f"group {lab!r} has no rows", group=lab)
    return w, b


def load_table(source, mapping: ColumnMapping) -> ObservationTable:
    """Read a comma-delimited file with a header row into a table.

    ``source`` is a path, a text stream or a bytes stream.  Rows are
    numbered from 1, not counting the header.  Any missing, non-numeric or
    non-finite required value (or a non-positive weight) aborts the load
    with a :class:`NonNumericValue` naming the row and column.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, newline="", encoding="utf-8") as fh:
            return load_table(fh, mapping)
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, (bytes, bytearray)):
        source = bytes(source).decode("utf-8")
    source = io.StringIO(source, newline="")

    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise EmptyInput("input has no header row") from None
    header = [h.strip() for h in header]
    needed = [mapping.outcome, mapping.group] + [n for n, _ in mapping.covariates]
    if mapping.weight is not None:
        needed.append(mapping.weight)
    for col in needed:
        if col not in header:
            raise UnknownColumn(f"column {col!r} not in header", column=col)
    idx = {name: header.index(name) for name in needed}

    ys, gs, ws = [], [], []
    covs = {n: [] for n, _ in mapping.covariates}
    for r, rec in enumerate(reader, start=1):
        if not rec or all(not c.strip() for c in rec):
            continue
        if len(rec) != len(header):
            raise NonNumericValue(f"row {r}: expected {len(header)} fields, got {len(rec)}",
                                  row=r, column=None)

        def cell(col):
            text = rec[idx[col]].strip()
            if text == "":
                raise NonNumericValue(f"row {r}, column {col!r}: missing value",
                                      row=r, column=col)
            return text

        ys.append(_parse_float(cell(mapping.outcome), r, mapping.outcome))
        gs.append(cell(mapping.group))
        if mapping.weight is not None:
            w = _parse_float(cell(mapping.weight), r, mapping.weight)
            if w <= 0:
                raise NonNumericValue(f"row {r}, column {mapping.weight!r}: weight {w} is not positive",
                                      row=r, column=mapping.weight)
            ws.append(w)
        else:
            ws.append(1.0)
        for name, kind in mapping.covariates:
            text = cell(name)
            covs[name].append(_parse_float(text, r, name) if kind == CONTINUOUS else text)

    if not ys:
        raise EmptyInput("input has no data rows")
    labels = _resolve_labels(set(gs), mapping)
    return ObservationTable(
        np.array(ys), np.array(gs), np.array(ws),
        {n: np.array(v, dtype=float if k == CONTINUOUS else str)
         for (n, k), v in zip(mapping.covariates, covs.values())},
        tuple(mapping.covariates), labels,
    )


def write_table(table: ObservationTable, dest, mapping: ColumnMapping | None = None,
                extra_columns: dict | None = None):
    """Write a table back to CSV (floats with 17 significant digits)."""
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", newline="", encoding="utf-8") as fh:
            return write_table(table, fh, mapping, extra_columns)
    if mapping is None:
        mapping = default_mapping(table)
    extra_columns = extra_columns or {}
    writer = csv.writer(dest, lineterminator="\n")
    cov_names = [n for n, _ in table.schema]
    header = [mapping.outcome, mapping.group, mapping.weight or "weight"]
    header += [n for n, _ in mapping.covariates] + list(extra_columns)
    writer.writerow(header)
    kinds = dict(table.schema)
    for i in range(len(table)):
        row = [format_float(table.outcome[i]), table.group[i], format_float(table.weight[i])]
        for n in cov_names:
            v = table.covariates[n][i]
            row.append(format_float(v) if kinds[n] == CONTINUOUS else v)
        row += [str(col[i]) for col in extra_columns.values()]
        writer.writerow(row)


def default_mapping(table: ObservationTable) -> ColumnMapping:
    return ColumnMapping("y", "group", tuple(table.schema), "weight",
                         table.labels[0], table.labels[1])


def _check_values_weights(values, weights):
    v = np.asarray(values, float).ravel()
    w = np.asarray(weights, float).ravel()
    if v.size == 0:
        raise EmptyInput("no values")
    if v.shape != w.shape:
        raise LengthMismatch(f"{v.size} values but {w.size} weights")
    if not np.all(w > 0):
        raise NonNumericValue("weights must be positive")
    return v, w


def weighted_cdf(values, weights, y: float) -> float:
    """Weighted share of ``values`` that are <= ``y``.

    >>> weighted_cdf([0, 10], [3, 1], 0)
    0.75
    """
    v, w = _check_values_weights(values, weights)
    return float(w[v <= y].sum() / w.sum())


def weighted_ecdf(values, weights, points) -> np.ndarray:
    """Vectorised :func:`weighted_cdf` over many evaluation points."""
    v, w = _check_values_weights(values, weights)
    order = np.argsort(v, kind="stable")
    cum = np.concatenate([[0.0], np.cumsum(w[order])])
    k = np.searchsorted(v[order], np.asarray(points, float), side="right")
    return cum[k] / cum[-1]


def weighted_quantiles(values, weights, probs) -> np.ndarray:
    """Smallest observed value whose weighted CDF reaches each prob."""
    v, w = _check_values_weights(values, weights)
    order = np.argsort(v, kind="stable")
    vs = v[order]
    cum = np.cumsum(w[order])
    k = np.searchsorted(cum, np.asarray(probs, float) * cum[-1], side="left")
    return vs[np.minimum(k, vs.size - 1)]


@dataclass(frozen=True, eq=False)
class EvaluationGrid:
    points: np.ndarray

    def __post_init__(self):
        p = _frozen(np.asarray(self.points, float).ravel())
        if p.size < 2:
            raise InvalidConfig("evaluation grid needs at least 2 points")
        if not np.all(np.isfinite(p)) or not np.all(np.diff(p) > 0):
            raise InvalidConfig("evaluation grid must be finite and strictly increasing")
        object.__setattr__(self, "points", p)

    def __len__(self):
        return self.points.size

    def __eq__(self, other):
        return isinstance(other, EvaluationGrid) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())

    def to_list(self):
        return [float(v) for v in self.points]


@dataclass(frozen=True)
class GridPolicy:
    """``auto``: unique pooled outcomes if at most ``max_unique`` distinct,
    else ``n_quantiles`` pooled weighted quantiles spread over
    0.5%..99.5%.  ``unique`` always uses observed values, thinned by rank
    to ``max_unique``; ``quantiles`` always uses quantiles; ``explicit``
    passes ``points`` through."""

    kind: str = "auto"
    max_unique: int = 200
    n_quantiles: int = 199
    points: tuple | None = None

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"kind", "max_unique", "n_quantiles", "points"}
        if unknown:
            raise InvalidConfig(f"unknown grid keys {sorted(unknown)}")
        pts = d.get("points")
        return cls(d.get("kind", "auto"), int(d.get("max_unique", 200)),
                   int(d.get("n_quantiles", 199)), tuple(pts) if pts is not None else None)

    def to_dict(self):
        return {"kind": self.kind, "max_unique": self.max_unique,
                "n_quantiles": self.n_quantiles,
                "points": list(self.points) if self.points is not None else None}


def _quantile_grid(table, n):
    if n == 1:
        probs = np.array([0.5])
    else:
        probs = np.linspace(0.005, 0.995, n)
    return np.unique(weighted_quantiles(table.outcome, table.weight, probs))


def make_grid(table: ObservationTable, policy: GridPolicy | None = None) -> EvaluationGrid:
    policy = policy or GridPolicy()
    if policy.kind == "explicit":
        if policy.points is None:
            raise InvalidConfig("explicit grid policy needs points")
        return EvaluationGrid(np.asarray(policy.points, float))
    uniq = np.unique(table.outcome)
    if uniq.size < 2:
        raise DegenerateOutcome("all outcome values are identical")
    if policy.kind == "unique":
        if uniq.size > policy.max_unique:
            # thin by rank, keeping both extremes
            keep = np.unique(np.round(np.linspace(0, uniq.size - 1, policy.max_unique)).astype(int))
            uniq = uniq[keep]
        return EvaluationGrid(uniq)
    if policy.kind == "auto" and uniq.size <= policy.max_unique:
        return EvaluationGrid(uniq)
    if policy.kind not in ("auto", "quantiles"):
        raise InvalidConfig(f"unknown grid policy {policy.kind!r}")
    pts = _quantile_grid(table, policy.n_quantiles)
    if pts.size < 2:
        raise DegenerateOutcome("quantile grid collapsed to a single point")
    return EvaluationGrid(pts)
