"""Dataset ingestion: delimited files with a header row plus a JSON schema.

The schema names every column and assigns a kind and role:

    {"columns": [
        {"name": "unroll_i", "kind": "ordinal", "role": "predictor",
         "support": [1, 30]},
        {"name": "flag", "kind": "binary", "role": "predictor",
         "levels": ["0", "1"]},
        {"name": "opt_level", "kind": "categorical", "role": "predictor",
         "levels": ["O1", "O2", "O3"]},
        {"name": "runtime", "kind": "real", "role": "response"},
        {"name": "trial", "kind": "ordinal", "role": "replicate"}],
     "na": "NA"}

Kinds: ordinal (numeric), binary (two levels, encoded 0/1), categorical
(>= 2 levels, one-hot expanded into per-level indicator predictors), real
(response only).  Roles: predictor, response (exactly one), replicate
(optional), ignore.  A categorical/binary response makes the dataset a
classification problem.  The NA sentinel is legal only in the response and
only for the constraint-violation workflow, which relabels rows as ok/fail.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .model import KIND_CATEGORICAL, KIND_ORDINAL, ModelSpec, TreePrior

ROLE_PREDICTOR = "predictor"
ROLE_RESPONSE = "response"
ROLE_REPLICATE = "replicate"
ROLE_IGNORE = "ignore"

_KINDS = ("ordinal", "binary", "categorical", "real")
_ROLES = (ROLE_PREDICTOR, ROLE_RESPONSE, ROLE_REPLICATE, ROLE_IGNORE)


@dataclass
class Column:
    """Schema entry for one raw file column."""

    name: str
    kind: str
    role: str = ROLE_PREDICTOR
    support: tuple | None = None  # (min, max) for ordinal
    levels: tuple = ()  # level strings for binary/categorical

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"column {self.name}: unknown kind {self.kind!r}")
        if self.role not in _ROLES:
            raise ConfigError(f"column {self.name}: unknown role {self.role!r}")
        if self.kind == "real" and self.role == ROLE_PREDICTOR:
            raise ConfigError(
                f"column {self.name}: predictors are ordinal, binary, or categorical"
            )
        if self.kind == "binary" and self.levels and len(self.levels) != 2:
            raise ConfigError(f"column {self.name}: binary needs exactly 2 levels")
        if self.kind == "categorical" and self.levels and len(self.levels) < 2:
            raise ConfigError(f"column {self.name}: categorical needs >= 2 levels")


@dataclass
class ColumnSchema:
    columns: list
    na: str = "NA"

    def __post_init__(self):
        responses = [c for c in self.columns if c.role == ROLE_RESPONSE]
        if len(responses) != 1:
            raise ConfigError(f"schema needs exactly one response, found {len(responses)}")
        reps = [c for c in self.columns if c.role == ROLE_REPLICATE]
        if len(reps) > 1:
            raise ConfigError("at most one replicate column")

    @property
    def response(self) -> Column:
        return next(c for c in self.columns if c.role == ROLE_RESPONSE)

    @property
    def replicate(self) -> Column | None:
        return next((c for c in self.columns if c.role == ROLE_REPLICATE), None)

    @property
    def predictors(self) -> list:
        return [c for c in self.columns if c.role == ROLE_PREDICTOR]


def load_schema(path) -> ColumnSchema:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    cols = [
        Column(
            name=c["name"],
            kind=c["kind"],
            role=c.get("role", ROLE_PREDICTOR),
            support=tuple(c["support"]) if c.get("support") else None,
            levels=tuple(str(v) for v in c.get("levels", ())),
        )
        for c in raw.get("columns", [])
    ]
    return ColumnSchema(cols, na=raw.get("na", "NA"))


@dataclass
class Dataset:
    """Typed, one-hot expanded view of a raw file."""

    schema: ColumnSchema
    X: np.ndarray  # (n, p) expanded predictors
    names: tuple  # expanded predictor names
    kinds: np.ndarray  # expanded kinds (int8)
    lo: np.ndarray
    hi: np.ndarray
    y: np.ndarray | None  # float responses (NaN where NA) or class codes
    classification: bool
    class_levels: tuple = ()
    na_mask: np.ndarray | None = None
    replicate: np.ndarray | None = None  # raw replicate values as strings

    @property
    def n(self) -> int:
        return len(self.X)

    def model_spec(self, leaf_model, prior: TreePrior | None = None) -> ModelSpec:
        n_classes = len(self.class_levels) if self.classification else 0
        return ModelSpec(
            kinds=self.kinds,
            lo=self.lo,
            hi=self.hi,
            leaf_model=leaf_model,
            n_classes=n_classes,
            prior=prior or TreePrior(),
            names=self.names,
        )

    def require_complete_response(self) -> None:
        if self.na_mask is not None and self.na_mask.any():
            k = int(self.na_mask.sum())
            raise DataError(
                f"{k} NA responses present; only the constraint-violation "
                "workflow accepts NA"
            )

    def failure_labels(self):
        """ok/fail class codes from the NA pattern (fail = 1)."""
        if self.na_mask is None:
            raise DataError("no response column to derive failure labels from")
        return self.na_mask.astype(np.int64), ("ok", "fail")


def _sniff_delimiter(sample: str) -> str:
    try:
        return csv.Sniffer().sniff(sample, delimiters=",\t;").delimiter
    except csv.Error:
        return ","


def load_dataset(path, schema: ColumnSchema, allow_na: bool = False,
                 require_response: bool = True) -> Dataset:
    """Parse a delimited file against the schema.

    Ordinal supports and categorical level sets are inferred from the data
    and then checked against any declared in the schema; the declared values
    win as the modeling support.  Parse failures name the offending row.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        head = fh.readline()
        if not head:
            raise DataError(f"{path}: empty file")
        delim = _sniff_delimiter(head)
        header = [h.strip() for h in head.rstrip("\n\r").split(delim)]
        reader = csv.reader(fh, delimiter=delim)
        rows = [r for r in reader if r]

    colpos = {}
    for c in schema.columns:
        if c.name not in header:
            if c.role == ROLE_RESPONSE and not require_response:
                continue
            raise DataError(f"{path}: column {c.name!r} missing from header")
        colpos[c.name] = header.index(c.name)

    n = len(rows)
    resp = schema.response
    has_response = resp.name in colpos

    raw_cols: dict[str, list] = {c.name: [] for c in schema.columns if c.name in colpos}
    for i, r in enumerate(rows, start=2):  # header is line 1
        if len(r) != len(header):
            raise DataError(
                f"{path}: row {i} has {len(r)} fields, expected {len(header)}"
            )
        for name, pos in colpos.items():
            raw_cols[name].append(r[pos].strip())

    # -- response ------------------------------------------------------------
    y = None
    na_mask = None
    classification = False
    class_levels: tuple = ()
    if has_response:
        vals = raw_cols[resp.name]
        na_mask = np.array([v == schema.na for v in vals])
        if na_mask.any() and not allow_na:
            bad = int(np.flatnonzero(na_mask)[0]) + 2
            raise DataError(
                f"{path}: NA response at row {bad}; pass the constraint-violation "
                "workflow to model failures"
            )
        if resp.kind in ("binary", "categorical"):
            classification = True
            levels = resp.levels or tuple(sorted({v for v, m in zip(vals, na_mask) if not m}))
            lut = {lv: k for k, lv in enumerate(levels)}
            codes = np.zeros(n, dtype=np.int64)
            for i, (v, m) in enumerate(zip(vals, na_mask)):
                if m:
                    continue
                if v not in lut:
                    raise DataError(
                        f"{path}: row {i + 2}: unknown class level {v!r} in {resp.name}"
                    )
                codes[i] = lut[v]
            y = codes
            class_levels = tuple(levels)
        else:
            out = np.empty(n)
            for i, (v, m) in enumerate(zip(vals, na_mask)):
                if m:
                    out[i] = np.nan
                    continue
                try:
                    out[i] = float(v)
                except ValueError as exc:
                    raise DataError(
                        f"{path}: row {i + 2}: bad response value {v!r}"
                    ) from exc
            y = out

    # -- predictors, with one-hot expansion ----------------------------------
    xcols, names, kinds, los, his = [], [], [], [], []
    for c in schema.predictors:
        vals = raw_cols[c.name]
        if c.kind == "ordinal":
            col = np.empty(n)
            for i, v in enumerate(vals):
                try:
                    col[i] = float(v)
                except ValueError as exc:
                    raise DataError(
                        f"{path}: row {i + 2}: bad ordinal value {v!r} in {c.name}"
                    ) from exc
            lo = float(col.min()) if n else 0.0
            hi = float(col.max()) if n else 1.0
            if c.support is not None:
                slo, shi = float(c.support[0]), float(c.support[1])
                if n and (lo < slo or hi > shi):
                    raise DataError(
                        f"{path}: {c.name} observed [{lo}, {hi}] outside declared "
                        f"support [{slo}, {shi}]"
                    )
                lo, hi = slo, shi
            xcols.append(col)
            names.append(c.name)
            kinds.append(KIND_ORDINAL)
            los.append(lo)
            his.append(hi)
        else:
            levels = c.levels or tuple(sorted(set(vals)))
            lut = {lv: k for k, lv in enumerate(levels)}
            for i, v in enumerate(vals):
                if v not in lut:
                    raise DataError(
                        f"{path}: row {i + 2}: unknown level {v!r} in {c.name}"
                    )
            if c.kind == "binary" or len(levels) == 2:
                col = np.array([float(lut[v]) for v in vals])
                xcols.append(col)
                names.append(c.name)
                kinds.append(KIND_CATEGORICAL)
                los.append(0.0)
                his.append(1.0)
            else:
                for k, lv in enumerate(levels):
                    col = np.array([1.0 if lut[v] == k else 0.0 for v in vals])
                    xcols.append(col)
                    names.append(f"{c.name}={lv}")
                    kinds.append(KIND_CATEGORICAL)
                    los.append(0.0)
                    his.append(1.0)

    X = np.column_stack(xcols) if xcols else np.empty((n, 0))
    rep = schema.replicate
    return Dataset(
        schema=schema,
        X=X,
        names=tuple(names),
        kinds=np.asarray(kinds, dtype=np.int8),
        lo=np.asarray(los, dtype=np.float64),
        hi=np.asarray(his, dtype=np.float64),
        y=y,
        classification=classification,
        class_levels=class_levels,
        na_mask=na_mask,
        replicate=np.asarray(raw_cols[rep.name]) if rep and rep.name in raw_cols else None,
    )


def augment_indicator(dataset: Dataset, rule: dict, name: str = "replicate_flag") -> Dataset:
    """Append a binary predictor derived from the replicate column.

    ``rule`` maps replicate values (as strings) to 0, 1, or "drop"; a "*"
    entry serves as the default.  A replicate value with no mapping is a data
    error, as is a rule that drops every row.
    """
    if dataset.replicate is None:
        raise DataError("dataset has no replicate column to map")
    rule = {str(k): v for k, v in rule.items()}
    flags = np.empty(dataset.n)
    keep = np.ones(dataset.n, dtype=bool)
    for i, rv in enumerate(dataset.replicate):
        v = rule.get(str(rv), rule.get("*"))
        if v is None:
            raise DataError(f"replicate value {rv!r} not covered by the rule")
        if v == "drop":
            keep[i] = False
        else:
            flags[i] = float(v)
    if not keep.any():
        raise DataError("indicator rule drops every row")
    X = np.column_stack([dataset.X[keep], flags[keep]])
    return Dataset(
        schema=dataset.schema,
        X=X,
        names=dataset.names + (name,),
        kinds=np.append(dataset.kinds, np.int8(KIND_CATEGORICAL)),
        lo=np.append(dataset.lo, 0.0),
        hi=np.append(dataset.hi, 1.0),
        y=dataset.y[keep] if dataset.y is not None else None,
        classification=dataset.classification,
        class_levels=dataset.class_levels,
        na_mask=dataset.na_mask[keep] if dataset.na_mask is not None else None,
        replicate=dataset.replicate[keep],
    )
