"""Delimited-text ingestion, discretization, model files and rule files."""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .calibrators import (BetaCalibrator, Calibrator, HistogramCalibrator, IdentityCalibrator, IsotonicCalibrator,
                          PlattCalibrator, ScalingBinningCalibrator)
from .core import Dataset
from .mbct import MbctModel, Rule, RuleSet

MODEL_MAGIC = "MBCAL-MODEL"
MODEL_VERSION = 1
RULES_MAGIC = "MBCAL-RULES"
RULES_VERSION = 1

CALIBRATORS = {cls.kind: cls for cls in (IdentityCalibrator, PlattCalibrator, BetaCalibrator, HistogramCalibrator,
                                         IsotonicCalibrator, ScalingBinningCalibrator, MbctModel)}


class Role(str, enum.Enum):
    FEATURE = "feature"
    PREDICTION = "prediction"
    LABEL = "label"
    TRUE_PROB = "true_prob"
    WEIGHT = "weight"
    IGNORE = "ignore"


class Discretization(str, enum.Enum):
    NONE = "none"  # categorical: each distinct string is one value
    QUANTILE = "quantile"
    EQUAL_WIDTH = "equal_width"


@dataclass
class ColumnSpec:
    """One input column. Feature columns freeze their encoding on first ingest."""

    name: str
    role: Role = Role.IGNORE
    discretization: Discretization = Discretization.NONE
    k: int = 10
    boundaries: Optional[list] = None
    vocabulary: Optional[list] = None

    def __post_init__(self):
        self.role = Role(self.role)
        self.discretization = Discretization(self.discretization)
        if self.discretization is not Discretization.NONE and self.k < 1:
            raise ValueError(f"column {self.name!r}: k must be >= 1")

    @property
    def frozen(self) -> bool:
        if self.discretization is Discretization.NONE:
            return self.vocabulary is not None
        return self.boundaries is not None

    @property
    def cardinality(self) -> int:
        if self.discretization is Discretization.NONE:
            return len(self.vocabulary) + 1  # last id is reserved for values unseen at training
        return len(self.boundaries) + 1

    def freeze(self, raw: Sequence[str]) -> None:
        if self.discretization is Discretization.NONE:
            self.vocabulary = sorted(set(raw))
            return
        values = _floats(raw, self.name)
        if self.discretization is Discretization.QUANTILE:
            cuts = np.quantile(values, np.arange(1, self.k) / self.k)
        else:
            lo, hi = float(values.min()), float(values.max())
            cuts = lo + (hi - lo) * np.arange(1, self.k) / self.k
        # duplicate cuts and cuts at the minimum separate nothing
        self.boundaries = [float(c) for c in np.unique(cuts) if c > values.min()]

    def encode(self, raw: Sequence[str]) -> np.ndarray:
        if self.discretization is Discretization.NONE:
            index = {v: i for i, v in enumerate(self.vocabulary)}
            oov = len(self.vocabulary)
            return np.array([index.get(v, oov) for v in raw], dtype=np.int64)
        return np.searchsorted(np.asarray(self.boundaries, dtype=float), _floats(raw, self.name), side="right")

    def to_dict(self) -> dict:
        out = {"name": self.name, "role": self.role.value}
        if self.role is Role.FEATURE:
            out["discretization"] = self.discretization.value
            if self.discretization is not Discretization.NONE:
                out["k"] = self.k
            if self.boundaries is not None:
                out["boundaries"] = self.boundaries
            if self.vocabulary is not None:
                out["vocabulary"] = self.vocabulary
        return out


def _floats(raw, name) -> np.ndarray:
    try:
        return np.array([float(v) for v in raw], dtype=float)
    except ValueError as exc:
        raise ValueError(f"column {name!r}: {exc}") from None


@dataclass
class Schema:
    columns: list

    def __post_init__(self):
        self.columns = [c if isinstance(c, ColumnSpec) else ColumnSpec(**c) for c in self.columns]
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValueError("duplicate column names in schema")
        for role in (Role.PREDICTION, Role.LABEL):
            count = sum(c.role is role for c in self.columns)
            if count != 1:
                raise ValueError(f"schema needs exactly one {role.value} column, found {count}")

    def role(self, role: Role) -> list:
        return [c for c in self.columns if c.role is role]

    @property
    def features(self) -> list:
        return self.role(Role.FEATURE)

    @property
    def frozen(self) -> bool:
        return all(c.frozen for c in self.features)

    def to_dict(self) -> dict:
        return {"columns": [c.to_dict() for c in self.columns]}

    @classmethod
    def from_dict(cls, data: dict) -> "Schema":
        return cls([ColumnSpec(**c) for c in data["columns"]])

    @classmethod
    def load(cls, path) -> "Schema":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class Table:
    header: list
    rows: list
    lines: list = field(default_factory=list)

    def column(self, name: str) -> list:
        try:
            j = self.header.index(name)
        except ValueError:
            raise ValueError(f"column {name!r} missing from header") from None
        return [row[j] for row in self.rows]


def read_table(path) -> Table:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows, lines = [], []
        for row in reader:
            if not row or all(not v.strip() for v in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: line {reader.line_num}: expected {len(header)} fields, got {len(row)}")
            rows.append([v.strip() for v in row])
            lines.append(reader.line_num)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return Table(header, rows, lines)


def _numeric(table: Table, name: str, low: float, high: float, path, what: str) -> np.ndarray:
    out = np.empty(len(table.rows))
    for i, (v, line) in enumerate(zip(table.column(name), table.lines)):
        try:
            x = float(v)
        except ValueError:
            raise ValueError(f"{path}: line {line}: {what} {v!r} is not a number") from None
        if not low <= x <= high:
            raise ValueError(f"{path}: line {line}: {what} {x} outside [{low}, {high}]")
        out[i] = x
    return out


def ingest(path, schema: Schema, require_label: bool = True) -> Dataset:
    """Parse a comma-separated file with a header row into a :class:`Dataset`.

    Feature encodings not yet frozen in ``schema`` are computed from this file
    and stored on it; frozen encodings are reused as they are.
    """
    table = read_table(path)
    return _encode(table, schema, path, require_label)


def _encode(table: Table, schema: Schema, path, require_label: bool) -> Dataset:
    features = []
    for col in schema.features:
        raw = table.column(col.name)
        if not col.frozen:
            col.freeze(raw)
        features.append(col.encode(raw))
    n = len(table.rows)
    pred_col = schema.role(Role.PREDICTION)[0]
    prediction = _numeric(table, pred_col.name, 0.0, 1.0, path, "prediction")
    label_col = schema.role(Role.LABEL)[0]
    if label_col.name in table.header or require_label:
        label = _numeric(table, label_col.name, 0.0, 1.0, path, "label")
        bad = np.flatnonzero((label != 0) & (label != 1))
        if bad.size:
            i = int(bad[0])
            raise ValueError(f"{path}: line {table.lines[i]}: label {label[i]} not in {{0, 1}}")
    else:
        label = np.zeros(n)
    weight = None
    for col in schema.role(Role.WEIGHT):
        weight = _numeric(table, col.name, 0.0, float("inf"), path, "weight")
    true_prob = None
    for col in schema.role(Role.TRUE_PROB):
        true_prob = _numeric(table, col.name, 0.0, 1.0, path, "true probability")
    X = np.column_stack(features) if features else np.zeros((n, 0), dtype=np.int64)
    return Dataset(X, prediction, label, weight, true_prob,
                   tuple(c.name for c in schema.features), tuple(c.cardinality for c in schema.features))


def write_table(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# -- model files ------------------------------------------------------------

def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


@dataclass
class ModelFile:
    calibrator: Calibrator
    schema: Optional[Schema] = None
    meta: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.calibrator.kind

    def to_dict(self) -> dict:
        return {
            "magic": MODEL_MAGIC, "version": MODEL_VERSION, "kind": self.kind,
            "params": self.calibrator.to_dict(),
            "schema": None if self.schema is None else self.schema.to_dict(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelFile":
        if data.get("magic") != MODEL_MAGIC:
            raise ValueError("not a model file (bad magic header)")
        if data.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model file version {data.get('version')!r}")
        kind = data["kind"]
        if kind not in CALIBRATORS:
            raise ValueError(f"unknown calibrator kind {kind!r}")
        schema = None if data.get("schema") is None else Schema.from_dict(data["schema"])
        return cls(CALIBRATORS[kind].from_dict(data["params"]), schema, data.get("meta", {}))


def save_model(path, model: ModelFile) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), default=_json_default, indent=1))


def load_model(path) -> ModelFile:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not a model file ({exc})") from None
    return ModelFile.from_dict(data)


# -- rule files -------------------------------------------------------------
#
#   MBCAL-RULES 1
#   trees <T>
#   features <d>
#   buckets <B>
#   name <index> <feature name>          one line per feature column
#   rule <tree> <conditions> -> *<multiplier>
#   fallback <tree> <conditions> -> *<multiplier>
#
# <conditions> is TRUE or "&"-joined terms x<j>=<v> and x<j>!{<v>,<v>,...};
# column d is the bucket of the current calibrated value when B > 0.

def _format_condition(feature, values, negated) -> str:
    if negated:
        return f"x{feature}!{{{','.join(str(v) for v in values)}}}"
    return f"x{feature}={values[0]}"


def format_rules(rules: RuleSet) -> str:
    lines = [f"{RULES_MAGIC} {RULES_VERSION}", f"trees {rules.n_trees}", f"features {rules.n_features}",
             f"buckets {rules.prediction_buckets}"]
    lines += [f"name {j} {name}" for j, name in enumerate(rules.feature_names)]
    for rule in rules.rules:
        cond = " & ".join(_format_condition(*c) for c in rule.conditions) or "TRUE"
        lines.append(f"{'fallback' if rule.fallback else 'rule'} {rule.tree} {cond} -> *{rule.multiplier!r}")
    return "\n".join(lines) + "\n"


def _parse_condition(term: str) -> tuple:
    term = term.strip()
    if not term.startswith("x"):
        raise ValueError(f"bad condition {term!r}")
    if "!" in term:
        feature, values = term[1:].split("!", 1)
        if not (values.startswith("{") and values.endswith("}")):
            raise ValueError(f"bad condition {term!r}")
        return int(feature), tuple(int(v) for v in values[1:-1].split(",")), True
    feature, value = term[1:].split("=", 1)
    return int(feature), (int(value),), False


def parse_rules(text: str) -> RuleSet:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0].split() != [RULES_MAGIC, str(RULES_VERSION)]:
        raise ValueError("not a rule file (bad magic header)")
    header, names, rules = {}, {}, []
    for no, line in enumerate(lines[1:], start=2):
        word, _, rest = line.partition(" ")
        try:
            if word in ("trees", "features", "buckets"):
                header[word] = int(rest)
            elif word == "name":
                j, _, name = rest.partition(" ")
                names[int(j)] = name
            elif word in ("rule", "fallback"):
                tree, _, body = rest.partition(" ")
                cond, arrow, mult = body.rpartition("->")
                if not arrow or not mult.strip().startswith("*"):
                    raise ValueError("missing '-> *multiplier'")
                cond = cond.strip()
                conditions = () if cond == "TRUE" else tuple(_parse_condition(t) for t in cond.split("&"))
                rules.append(Rule(int(tree), conditions, float(mult.strip()[1:]), word == "fallback"))
            else:
                raise ValueError(f"unknown directive {word!r}")
        except ValueError as exc:
            raise ValueError(f"rule file line {no}: {exc}") from None
    missing = {"trees", "features", "buckets"} - set(header)
    if missing:
        raise ValueError(f"rule file missing header fields {sorted(missing)}")
    return RuleSet(rules, header["trees"], header["features"], header["buckets"],
                   tuple(names[j] for j in sorted(names)))


def save_rules(path, rules: RuleSet) -> None:
    Path(path).write_text(format_rules(rules))


def load_rules(path) -> RuleSet:
    return parse_rules(Path(path).read_text())
