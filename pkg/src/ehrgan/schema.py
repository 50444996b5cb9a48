"""Record model, feature layout, constraints, scaling and discretization.

Feature layout of the generated vector: ICD codes, then CPT codes, then the
nine vital statistics (BMI, systolic, diastolic; each min/median/max).  Age
and gender are conditions and never appear in the vector.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import gradcore as gc

VITALS = ("bmi", "sys", "dia")
STATS = ("min", "med", "max")
VITAL_COLUMNS = tuple(f"{v}_{s}" for v in VITALS for s in STATS)
# Vitals sharing one scaling range so that ordinal relations survive scaling.
SCALE_GROUPS = {"bmi": ("bmi",), "pressure": ("sys", "dia")}
N_AGES = 100
GENDERS = ("M", "F")


@dataclass(frozen=True)
class Constraint:
    """Ordinal (``lesser <= greater``) or mutual exclusion between two extractors.

    Extractors name a schema column (``"bmi_min"``, ``"icd:250"``) or a gender
    indicator (``"gender:M"``, ``"gender:F"``).
    """

    kind: str
    first: str
    second: str
    omega: float = 1.0

    def __post_init__(self):
        if self.kind not in ("ordinal", "mutual_exclusion"):
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.omega <= 0:
            raise ValueError("omega must be positive")

    @classmethod
    def ordinal(cls, lesser: str, greater: str) -> "Constraint":
        return cls("ordinal", lesser, greater)

    @classmethod
    def mutual_exclusion(cls, a: str, b: str, omega: float = 1.0) -> "Constraint":
        return cls("mutual_exclusion", a, b, omega)

    @property
    def label(self) -> str:
        op = "<=" if self.kind == "ordinal" else "excludes"
        return f"{self.first} {op} {self.second}"

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "first": self.first, "second": self.second}
        if self.kind == "mutual_exclusion":
            d["omega"] = self.omega
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Constraint":
        return cls(d["kind"], d["first"], d["second"], float(d.get("omega", 1.0)))


def default_constraints(include_pressure_order: bool = False) -> list[Constraint]:
    out = []
    for v in VITALS:
        out.append(Constraint.ordinal(f"{v}_min", f"{v}_med"))
        out.append(Constraint.ordinal(f"{v}_med", f"{v}_max"))
    if include_pressure_order:
        for s in STATS:
            out.append(Constraint.ordinal(f"dia_{s}", f"sys_{s}"))
    return out


@dataclass
class RecordSchema:
    icd_vocab: list[str]
    cpt_vocab: list[str]
    constraints: list[Constraint] = field(default_factory=default_constraints)

    def __post_init__(self):
        self.icd_vocab = list(self.icd_vocab)
        self.cpt_vocab = list(self.cpt_vocab)
        for name, vocab in (("icd", self.icd_vocab), ("cpt", self.cpt_vocab)):
            if len(set(vocab)) != len(vocab):
                raise ValueError(f"duplicate codes in {name} vocabulary")
        self._columns = (
            [f"icd:{c}" for c in self.icd_vocab] + [f"cpt:{c}" for c in self.cpt_vocab] + list(VITAL_COLUMNS)
        )
        self._index = {c: i for i, c in enumerate(self._columns)}
        for c in self.constraints:
            self.extractor(c.first)
            self.extractor(c.second)

    @property
    def n_icd(self) -> int:
        return len(self.icd_vocab)

    @property
    def n_cpt(self) -> int:
        return len(self.cpt_vocab)

    @property
    def n_codes(self) -> int:
        return self.n_icd + self.n_cpt

    @property
    def width(self) -> int:
        return self.n_codes + len(VITAL_COLUMNS)

    @property
    def feature_names(self) -> list[str]:
        return list(self._columns)

    @property
    def code_names(self) -> list[str]:
        return self._columns[: self.n_codes]

    @property
    def vital_slice(self) -> slice:
        return slice(self.n_codes, self.width)

    def column_index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown column {name!r}") from None

    def extractor(self, name: str) -> tuple[str, int]:
        """Resolve an extractor name to ('feature', index) or ('gender', code)."""
        if name.startswith("gender:"):
            g = name.split(":", 1)[1]
            if g not in GENDERS:
                raise ValueError(f"unknown gender extractor {name!r}")
            return "gender", GENDERS.index(g)
        return "feature", self.column_index(name)

    def to_dict(self) -> dict:
        return {
            "icd_vocab": self.icd_vocab,
            "cpt_vocab": self.cpt_vocab,
            "constraints": [c.to_dict() for c in self.constraints],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RecordSchema":
        cons = [Constraint.from_dict(c) for c in d.get("constraints", [])] if "constraints" in d else None
        if cons is None:
            return cls(d["icd_vocab"], d["cpt_vocab"])
        return cls(d["icd_vocab"], d["cpt_vocab"], cons)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_constraints(self, constraints: Iterable[Constraint]) -> "RecordSchema":
        return RecordSchema(self.icd_vocab, self.cpt_vocab, list(constraints))


@dataclass(frozen=True)
class PatientRecord:
    age: int
    gender: str
    icd: frozenset
    cpt: frozenset
    vitals: tuple

    def vital(self, name: str) -> float:
        return self.vitals[VITAL_COLUMNS.index(name)]


class Cohort:
    """Column-oriented table of patient records under one schema.

    Indexing and iteration yield :class:`PatientRecord` objects; the numpy
    columns are what the numeric code works on.
    """

    def __init__(self, schema: RecordSchema, age, gender, codes, vitals, ids=None):
        self.schema = schema
        self.age = np.asarray(age, dtype=np.int64).reshape(-1)
        self.gender = np.asarray(gender, dtype=np.int64).reshape(-1)
        n = len(self.age)
        self.codes = np.asarray(codes, dtype=bool).reshape(n, schema.n_codes)
        self.vitals = np.asarray(vitals, dtype=np.float64).reshape(n, len(VITAL_COLUMNS))
        self.ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        if len(self.gender) != n or len(self.ids) != n:
            raise ValueError("cohort columns have different lengths")

    def __len__(self) -> int:
        return len(self.age)

    def __getitem__(self, i: int) -> PatientRecord:
        s = self.schema
        row = self.codes[i]
        icd = frozenset(c for c, on in zip(s.icd_vocab, row[: s.n_icd]) if on)
        cpt = frozenset(c for c, on in zip(s.cpt_vocab, row[s.n_icd :]) if on)
        return PatientRecord(int(self.age[i]), GENDERS[self.gender[i]], icd, cpt, tuple(float(v) for v in self.vitals[i]))

    def __iter__(self) -> Iterator[PatientRecord]:
        for i in range(len(self)):
            yield self[i]

    @property
    def icd(self) -> np.ndarray:
        return self.codes[:, : self.schema.n_icd]

    @property
    def cpt(self) -> np.ndarray:
        return self.codes[:, self.schema.n_icd :]

    def vital(self, name: str) -> np.ndarray:
        return self.vitals[:, VITAL_COLUMNS.index(name)]

    def subset(self, rows) -> "Cohort":
        rows = np.asarray(rows)
        if rows.dtype != bool:
            rows = rows.astype(np.intp)
        return Cohort(self.schema, self.age[rows], self.gender[rows], self.codes[rows], self.vitals[rows], self.ids[rows])

    @classmethod
    def from_records(cls, records: Sequence[PatientRecord], schema: RecordSchema) -> "Cohort":
        n = len(records)
        codes = np.zeros((n, schema.n_codes), dtype=bool)
        icd_pos = {c: i for i, c in enumerate(schema.icd_vocab)}
        cpt_pos = {c: schema.n_icd + i for i, c in enumerate(schema.cpt_vocab)}
        for r, rec in enumerate(records):
            for c in rec.icd:
                if c not in icd_pos:
                    raise KeyError(f"unknown ICD code {c!r}")
                codes[r, icd_pos[c]] = True
            for c in rec.cpt:
                if c not in cpt_pos:
                    raise KeyError(f"unknown CPT code {c!r}")
                codes[r, cpt_pos[c]] = True
        return cls(
            schema,
            [r.age for r in records],
            [GENDERS.index(r.gender) for r in records],
            codes,
            np.array([r.vitals for r in records], dtype=np.float64).reshape(n, len(VITAL_COLUMNS)),
        )

    @classmethod
    def concat(cls, parts: Sequence["Cohort"]) -> "Cohort":
        schema = parts[0].schema
        return cls(
            schema,
            np.concatenate([p.age for p in parts]),
            np.concatenate([p.gender for p in parts]),
            np.concatenate([p.codes for p in parts]),
            np.concatenate([p.vitals for p in parts]),
            np.concatenate([p.ids for p in parts]),
        )


@dataclass
class Scaler:
    """Min-max scaling of the nine vitals into [0, 1].

    Bounds are shared within a vital group (BMI; systolic+diastolic) so that
    orderings between columns are preserved after scaling.
    """

    lo: np.ndarray
    hi: np.ndarray
    clamped: int = 0

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if np.any(self.hi <= self.lo):
            raise ValueError("scaler requires hi > lo for every feature")

    @classmethod
    def fit(cls, vitals: np.ndarray) -> "Scaler":
        vitals = np.asarray(vitals, dtype=np.float64)
        if len(vitals) == 0:
            raise ValueError("cannot fit a scaler on an empty cohort")
        lo = np.empty(len(VITAL_COLUMNS))
        hi = np.empty(len(VITAL_COLUMNS))
        for members in SCALE_GROUPS.values():
            cols = [i for i, c in enumerate(VITAL_COLUMNS) if c.split("_")[0] in members]
            g_lo, g_hi = vitals[:, cols].min(), vitals[:, cols].max()
            if g_hi <= g_lo:
                g_hi = g_lo + 1.0
            lo[cols], hi[cols] = g_lo, g_hi
        return cls(lo, hi)

    def transform(self, vitals: np.ndarray) -> np.ndarray:
        vitals = np.asarray(vitals, dtype=np.float64)
        out = (vitals - self.lo) / (self.hi - self.lo)
        bad = (out < 0) | (out > 1)
        if bad.any():
            self.clamped += int(bad.sum())
            out = np.clip(out, 0.0, 1.0)
        return out

    def inverse(self, scaled: np.ndarray) -> np.ndarray:
        return self.lo + np.asarray(scaled, dtype=np.float64) * (self.hi - self.lo)

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(d["lo"], d["hi"])


def encode(record: PatientRecord, schema: RecordSchema, scaler: Scaler) -> tuple[np.ndarray, tuple[int, int]]:
    x, ages, genders = encode_cohort(Cohort.from_records([record], schema), scaler)
    return x[0], (int(ages[0]), int(genders[0]))


def decode(x: np.ndarray, age: int, gender: int, schema: RecordSchema, scaler: Scaler) -> PatientRecord:
    return decode_cohort(np.asarray(x)[None, :], [age], [gender], schema, scaler)[0]


def encode_cohort(cohort: Cohort, scaler: Scaler) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Feature matrix plus age and gender condition labels."""
    x = np.concatenate([cohort.codes.astype(np.float64), scaler.transform(cohort.vitals)], axis=1)
    return x, cohort.age.copy(), cohort.gender.copy()


def decode_cohort(x: np.ndarray, ages, genders, schema: RecordSchema, scaler: Scaler) -> Cohort:
    """Codes are thresholded at 0.5; vitals are clipped to [0, 1] and unscaled."""
    x = np.asarray(x, dtype=np.float64)
    codes = x[:, : schema.n_codes] >= 0.5
    vitals = scaler.inverse(np.clip(x[:, schema.vital_slice], 0.0, 1.0))
    return Cohort(schema, ages, genders, codes, vitals)


# ---------------------------------------------------------------------------
# constraints


def _extract(x: gc.Tensor, name: str, schema: RecordSchema, gender) -> gc.Tensor:
    kind, idx = schema.extractor(name)
    if kind == "feature":
        return x[:, idx]
    if gender is None:
        raise ValueError(f"constraint on {name!r} needs gender labels")
    return gc.Tensor((np.asarray(gender) == idx).astype(np.float64))


def constraint_penalty_value(x, c: Constraint, schema: RecordSchema, gender=None) -> gc.Tensor:
    """Per-row penalty: hinge ``max(f1 - f2, 0)`` or product ``omega * f1 * f2``."""
    x = gc.as_tensor(x)
    if x.ndim == 1:
        x = gc.reshape(x, (1, x.shape[0]))
    f1 = _extract(x, c.first, schema, gender)
    f2 = _extract(x, c.second, schema, gender)
    if c.kind == "ordinal":
        return gc.relu(gc.sub(f1, f2))
    return gc.mul(gc.mul(f1, f2), c.omega)


def _raw_values(cohort: Cohort, name: str) -> np.ndarray:
    kind, idx = cohort.schema.extractor(name)
    if kind == "gender":
        return (cohort.gender == idx).astype(np.float64)
    if idx >= cohort.schema.n_codes:
        return cohort.vitals[:, idx - cohort.schema.n_codes]
    return cohort.codes[:, idx].astype(np.float64)


def violation_matrix(cohort: Cohort, constraints: Sequence[Constraint] | None = None) -> np.ndarray:
    """Boolean (records x constraints) table of exact violations on decoded values."""
    cons = cohort.schema.constraints if constraints is None else constraints
    out = np.zeros((len(cohort), len(cons)), dtype=bool)
    for j, c in enumerate(cons):
        a, b = _raw_values(cohort, c.first), _raw_values(cohort, c.second)
        out[:, j] = a > b if c.kind == "ordinal" else (a > 0.5) & (b > 0.5)
    return out


def violations(record: PatientRecord, schema: RecordSchema, constraints=None) -> list[Constraint]:
    cons = schema.constraints if constraints is None else list(constraints)
    row = violation_matrix(Cohort.from_records([record], schema), cons)[0]
    return [c for c, bad in zip(cons, row) if bad]


# ---------------------------------------------------------------------------
# discretization for the privacy attacks


def discretized_width(schema: RecordSchema, bins: int) -> int:
    return schema.n_codes + N_AGES + 1 + len(VITAL_COLUMNS) * bins


def bin_index(scaled: np.ndarray, bins: int) -> np.ndarray:
    """Equal-width bins over [0, 1]; half-open except the closed top bin."""
    idx = np.floor(np.clip(scaled, 0.0, 1.0) * bins).astype(np.int64)
    return np.minimum(idx, bins - 1)


def discretize_cohort(cohort: Cohort, scaler: Scaler, bins: int = 10) -> np.ndarray:
    """Binary matrix: codes | one-hot age | female flag | one-hot binned vitals."""
    if bins < 2:
        raise ValueError("bins must be at least 2")
    n = len(cohort)
    nv = len(VITAL_COLUMNS)
    out = np.zeros((n, discretized_width(cohort.schema, bins)), dtype=np.uint8)
    nc = cohort.schema.n_codes
    out[:, :nc] = cohort.codes
    rows = np.arange(n)
    out[rows, nc + np.clip(cohort.age, 0, N_AGES - 1)] = 1
    out[:, nc + N_AGES] = cohort.gender == GENDERS.index("F")
    scaled = (cohort.vitals - scaler.lo) / (scaler.hi - scaler.lo)
    b = bin_index(scaled, bins)
    base = nc + N_AGES + 1
    for j in range(nv):
        out[rows, base + j * bins + b[:, j]] = 1
    return out


def discretize(record: PatientRecord, schema: RecordSchema, scaler: Scaler, bins: int = 10) -> np.ndarray:
    return discretize_cohort(Cohort.from_records([record], schema), scaler, bins)[0]


def hamming(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between the rows of two binary matrices."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = a.sum(1)[:, None] + b.sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.rint(d).astype(np.int64)


def ceil_fraction(n: int, frac: float) -> int:
    return int(math.ceil(n * frac - 1e-12))
