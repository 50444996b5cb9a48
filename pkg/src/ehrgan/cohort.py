"""Ingestion, cleaning, splitting and a latent-factor cohort simulator."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .schema import GENDERS, N_AGES, STATS, VITAL_COLUMNS, VITALS, Cohort, RecordSchema

log = logging.getLogger(__name__)

# Expected order statistics of three iid standard normal draws.
ORDER_STAT_3 = {"min": -3.0 / (2.0 * math.sqrt(math.pi)), "med": 0.0, "max": 3.0 / (2.0 * math.sqrt(math.pi))}


class DataError(ValueError):
    """Input data that cannot be used (bad header, empty cohort, ...)."""


@dataclass
class RowError:
    line: int
    reason: str


# ---------------------------------------------------------------------------
# CSV


def csv_header(schema: RecordSchema) -> list[str]:
    return ["age", "gender"] + schema.feature_names


def save_csv(cohort: Cohort, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(cohort.schema))
        for i in range(len(cohort)):
            w.writerow(
                [int(cohort.age[i]), GENDERS[cohort.gender[i]]]
                + [int(b) for b in cohort.codes[i]]
                + [repr(float(v)) for v in cohort.vitals[i]]
            )


def schema_from_header(header: list[str]) -> RecordSchema:
    icd = [h.split(":", 1)[1] for h in header if h.startswith("icd:")]
    cpt = [h.split(":", 1)[1] for h in header if h.startswith("cpt:")]
    return RecordSchema(icd, cpt)


def load_csv(path, schema: RecordSchema | None = None) -> tuple[Cohort, list[RowError]]:
    """Read a cohort CSV.

    Without a schema the vocabularies come from the header.  Rows with
    malformed values, or with a positive entry for a code outside the schema,
    are rejected and reported with their line numbers.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header") from None
        if schema is None:
            schema = schema_from_header(header)
        pos = {h: i for i, h in enumerate(header)}
        missing = [c for c in csv_header(schema) if c not in pos]
        if missing:
            raise DataError(f"{path}: missing columns {missing[:5]}{'...' if len(missing) > 5 else ''}")
        extra_codes = [i for h, i in pos.items() if h.startswith(("icd:", "cpt:")) and h not in set(schema.feature_names)]
        code_cols = [pos[c] for c in schema.code_names]
        vital_cols = [pos[c] for c in VITAL_COLUMNS]

        ages, genders, codes, vitals, errors = [], [], [], [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                if len(row) != len(header):
                    raise ValueError(f"expected {len(header)} fields, got {len(row)}")
                age = int(row[pos["age"]])
                if not 0 <= age < N_AGES:
                    raise ValueError(f"age {age} outside [0, {N_AGES - 1}]")
                g = row[pos["gender"]].strip().upper()
                if g not in GENDERS:
                    raise ValueError(f"unknown gender {row[pos['gender']]!r}")
                bits = [_bit(row[i]) for i in code_cols]
                if any(_bit(row[i]) for i in extra_codes):
                    bad = [header[i] for i in extra_codes if _bit(row[i])]
                    raise ValueError(f"unknown code {bad[0].split(':', 1)[1]!r}")
                vals = [float(row[i]) for i in vital_cols]
                if not all(math.isfinite(v) for v in vals):
                    raise ValueError("non-finite vital")
            except ValueError as exc:
                errors.append(RowError(line, str(exc)))
                continue
            ages.append(age)
            genders.append(GENDERS.index(g))
            codes.append(bits)
            vitals.append(vals)
    n = len(ages)
    cohort = Cohort(
        schema,
        np.array(ages, dtype=np.int64),
        np.array(genders, dtype=np.int64),
        np.array(codes, dtype=bool).reshape(n, schema.n_codes),
        np.array(vitals, dtype=np.float64).reshape(n, len(VITAL_COLUMNS)),
    )
    for e in errors:
        log.warning("%s:%d rejected: %s", path, e.line, e.reason)
    return cohort, errors


def _bit(s: str) -> bool:
    s = s.strip()
    if s in ("0", "1"):
        return s == "1"
    raise ValueError(f"code entry {s!r} is not 0/1")


# ---------------------------------------------------------------------------
# rollup and cleaning


def rollup_icd(code: str) -> str:
    """Subcategory of an ICD-9 code: everything left of the first '.'."""
    return code.split(".", 1)[0]


def load_cpt_mapping(path) -> dict[str, str]:
    """CPT code -> category, from a two-column CSV (code,category) or a JSON object."""
    p = Path(path)
    if p.suffix.lower() == ".json":
        return {str(k): str(v) for k, v in json.loads(p.read_text()).items()}
    with open(p, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and rows[0][:2] == ["code", "category"]:
        rows = rows[1:]
    return {r[0].strip(): r[1].strip() for r in rows}


def rollup(cohort: Cohort, cpt_mapping: dict[str, str] | None = None) -> Cohort:
    """Merge code columns that roll up to the same category (logical OR)."""
    s = cohort.schema
    icd_target = [rollup_icd(c) for c in s.icd_vocab]
    cpt_target = [(cpt_mapping or {}).get(c, c) for c in s.cpt_vocab]
    icd_vocab = list(dict.fromkeys(icd_target))
    cpt_vocab = list(dict.fromkeys(cpt_target))
    new_schema = RecordSchema(icd_vocab, cpt_vocab, s.constraints)
    codes = np.zeros((len(cohort), new_schema.n_codes), dtype=bool)
    for j, t in enumerate(icd_target):
        codes[:, icd_vocab.index(t)] |= cohort.codes[:, j]
    for j, t in enumerate(cpt_target):
        codes[:, len(icd_vocab) + cpt_vocab.index(t)] |= cohort.codes[:, s.n_icd + j]
    return Cohort(new_schema, cohort.age, cohort.gender, codes, cohort.vitals, cohort.ids)


@dataclass
class CleaningReport:
    n_input: int
    n_output: int
    removed_icd: list[str] = field(default_factory=list)
    removed_cpt: list[str] = field(default_factory=list)
    dropped: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


ERROR_RULES = ("systolic<=diastolic", "systolic>300", "bmi<5", "vital order")


def record_errors(cohort: Cohort) -> dict[str, np.ndarray]:
    """Boolean masks for each obviously-erroneous-measurement rule."""
    sys_ = np.stack([cohort.vital(f"sys_{s}") for s in STATS], axis=1)
    dia = np.stack([cohort.vital(f"dia_{s}") for s in STATS], axis=1)
    bmi = np.stack([cohort.vital(f"bmi_{s}") for s in STATS], axis=1)
    order = np.zeros(len(cohort), dtype=bool)
    for v in VITALS:
        lo, md, hi = (cohort.vital(f"{v}_{s}") for s in STATS)
        order |= (lo > md) | (md > hi)
    return {
        "systolic<=diastolic": (sys_ <= dia).any(axis=1),
        "systolic>300": (sys_ > 300).any(axis=1),
        "bmi<5": (bmi < 5).any(axis=1),
        "vital order": order,
    }


def clean(cohort: Cohort, min_prevalence: float = 1 / 1000, min_codes: int = 5) -> tuple[Cohort, CleaningReport]:
    """Prevalence filter on codes, then minimum code count, then error filter.

    Prevalence is computed once on the input cohort.  A dropped record is
    attributed to the first rule it fails.
    """
    s = cohort.schema
    n = len(cohort)
    report = CleaningReport(n_input=n, n_output=0, dropped={"min_codes": 0, **{r: 0 for r in ERROR_RULES}})
    if n == 0:
        return cohort, report
    prev = cohort.codes.mean(axis=0)
    keep = prev >= min_prevalence
    report.removed_icd = [c for c, k in zip(s.icd_vocab, keep[: s.n_icd]) if not k]
    report.removed_cpt = [c for c, k in zip(s.cpt_vocab, keep[s.n_icd :]) if not k]
    schema = RecordSchema(
        [c for c, k in zip(s.icd_vocab, keep[: s.n_icd]) if k],
        [c for c, k in zip(s.cpt_vocab, keep[s.n_icd :]) if k],
        [c for c in s.constraints if _constraint_survives(c, keep, s)],
    )
    reduced = Cohort(schema, cohort.age, cohort.gender, cohort.codes[:, keep], cohort.vitals, cohort.ids)

    alive = np.ones(n, dtype=bool)
    few = reduced.codes.sum(axis=1) < min_codes
    report.dropped["min_codes"] = int(few.sum())
    alive &= ~few
    for rule, mask in record_errors(reduced).items():
        hit = alive & mask
        report.dropped[rule] = int(hit.sum())
        alive &= ~hit
    out = reduced.subset(np.flatnonzero(alive))
    report.n_output = len(out)
    return out, report


def _constraint_survives(c, keep: np.ndarray, s: RecordSchema) -> bool:
    for name in (c.first, c.second):
        kind, idx = s.extractor(name)
        if kind == "feature" and idx < s.n_codes and not keep[idx]:
            return False
    return True


def split(cohort: Cohort, fraction: float, seed: int) -> tuple[Cohort, Cohort]:
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(cohort))
    k = int(round(fraction * len(cohort)))
    return cohort.subset(np.sort(perm[:k])), cohort.subset(np.sort(perm[k:]))


# ---------------------------------------------------------------------------
# simulator


@dataclass
class SimConfig:
    n_records: int = 5000
    n_icd: int = 40
    n_cpt: int = 10
    n_latent: int = 4
    loading_scale: float = 1.2
    prevalence_range: tuple[float, float] = (0.04, 0.45)
    age_mean: float = 50.0
    age_sd: float = 16.0
    age_loading: float = 8.0
    gender_loading: float = 0.8
    vital_base: tuple[float, float, float] = (27.0, 122.0, 76.0)
    vital_noise: tuple[float, float, float] = (2.5, 7.0, 5.0)
    effect_fraction: float = 0.3
    effect_range: tuple[tuple[float, float], ...] = ((-1.5, 3.0), (0.0, 6.0), (0.0, 3.5))

    def validate(self) -> None:
        if self.n_records < 0 or self.n_icd < 0 or self.n_cpt < 0 or self.n_latent < 0:
            raise ValueError("simulator sizes must be non-negative")
        if self.n_icd + self.n_cpt == 0:
            raise ValueError("simulator needs at least one code")
        lo, hi = self.prevalence_range
        if not 0 < lo <= hi < 1:
            raise ValueError("prevalence_range must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        for k in ("prevalence_range", "vital_base", "vital_noise"):
            if k in d:
                d[k] = tuple(d[k])
        if "effect_range" in d:
            d["effect_range"] = tuple(tuple(r) for r in d["effect_range"])
        return cls(**d)


@dataclass
class GroundTruth:
    """Parameters of the generating model.

    codes ~ Bernoulli(sigmoid(loadings @ z + offsets)); per-vital location
    ``base + effects @ codes``; three Gaussian draws sorted into min/med/max.
    """

    config: SimConfig
    loadings: np.ndarray  # codes x latent
    offsets: np.ndarray  # codes
    age_weights: np.ndarray  # latent
    gender_weights: np.ndarray  # latent
    effects: np.ndarray  # 3 vitals x codes

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "loadings": self.loadings.tolist(),
            "offsets": self.offsets.tolist(),
            "age_weights": self.age_weights.tolist(),
            "gender_weights": self.gender_weights.tolist(),
            "effects": self.effects.tolist(),
        }

    def _draw_conditions(self, z: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.config
        raw = cfg.age_mean + z @ self.age_weights + cfg.age_sd * rng.standard_normal(len(z))
        age = np.clip(np.rint(raw), 0, N_AGES - 1).astype(np.int64)
        p_f = _sigmoid(z @ self.gender_weights)
        gender = (rng.random(len(z)) < p_f).astype(np.int64)
        return age, gender

    def code_probabilities(self, z: np.ndarray) -> np.ndarray:
        return _sigmoid(z @ self.loadings.T + self.offsets)

    def conditional_expectations(self, n_mc: int = 400_000, seed: int = 0, chunk: int = 50_000) -> dict:
        """E[statistic | code present] for every code, by Rao-Blackwellized Monte Carlo.

        Codes are conditionally independent given the latent draw, so the
        code indicator is replaced by its probability.  Returns arrays keyed
        by ``age_mean``, ``female_fraction``, ``prevalence`` and each vital
        column (mean of that column among carriers).
        """
        rng = np.random.default_rng(seed)
        cfg = self.config
        c = len(self.offsets)
        L = cfg.n_latent
        w_sum = np.zeros(c)
        age_sum = np.zeros(c)
        fem_sum = np.zeros(c)
        pair = np.zeros((c, c))
        done = 0
        while done < n_mc:
            m = min(chunk, n_mc - done)
            z = rng.standard_normal((m, L))
            age, _ = self._draw_conditions(z, rng)
            p_f = _sigmoid(z @ self.gender_weights)
            p = self.code_probabilities(z)
            w_sum += p.sum(0)
            age_sum += age @ p
            fem_sum += p_f @ p
            pair += p.T @ p
            done += m
        prevalence = w_sum / n_mc
        out = {"prevalence": prevalence, "age_mean": age_sum / w_sum, "female_fraction": fem_sum / w_sum}
        # E[code_k | code_j] with the diagonal equal to 1
        cond = pair / w_sum[None, :]
        np.fill_diagonal(cond, 1.0)
        for v_i, v in enumerate(VITALS):
            loc = cfg.vital_base[v_i] + self.effects[v_i] @ cond
            for s in STATS:
                out[f"{v}_{s}"] = loc + ORDER_STAT_3[s] * cfg.vital_noise[v_i]
        return out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _logit(p):
    return np.log(p / (1.0 - p))


def simulate_cohort(config: SimConfig, seed: int) -> tuple[Cohort, GroundTruth]:
    config.validate()
    rng = np.random.default_rng(seed)
    n_codes = config.n_icd + config.n_cpt
    L = config.n_latent
    loadings = rng.normal(0.0, config.loading_scale / math.sqrt(max(L, 1)), (n_codes, L))
    lo, hi = config.prevalence_range
    offsets = _logit(np.exp(rng.uniform(math.log(lo), math.log(hi), n_codes)))
    if L:
        age_w = rng.normal(0.0, 1.0, L)
        age_w *= config.age_loading / np.linalg.norm(age_w)
        gender_w = rng.normal(0.0, 1.0, L)
        gender_w *= config.gender_loading / np.linalg.norm(gender_w)
    else:
        age_w = np.zeros(0)
        gender_w = np.zeros(0)
    effects = np.zeros((len(VITALS), n_codes))
    for v_i, (e_lo, e_hi) in enumerate(config.effect_range):
        active = rng.random(n_codes) < config.effect_fraction
        effects[v_i, active] = rng.uniform(e_lo, e_hi, int(active.sum()))
    truth = GroundTruth(config, loadings, offsets, age_w, gender_w, effects)

    n = config.n_records
    z = rng.standard_normal((n, L))
    age, gender = truth._draw_conditions(z, rng)
    codes = rng.random((n, n_codes)) < truth.code_probabilities(z)
    loc = config.vital_base + codes.astype(np.float64) @ effects.T
    vitals = _draw_vitals(loc, np.asarray(config.vital_noise), rng)

    # Redraw the (astronomically rare) records that break a measurement rule.
    for _ in range(100):
        bad = np.zeros(n, dtype=bool)
        tmp = Cohort(RecordSchema([f"c{i}" for i in range(n_codes)], []), age, gender, codes, vitals)
        for mask in record_errors(tmp).values():
            bad |= mask
        if not bad.any():
            break
        vitals[bad] = _draw_vitals(loc[bad], np.asarray(config.vital_noise), rng)
    else:
        raise RuntimeError("simulator could not satisfy the measurement rules; check vital parameters")

    icd = [f"{100 + i:03d}" for i in range(config.n_icd)]
    cpt = [f"{10000 + 7 * i:05d}" for i in range(config.n_cpt)]
    return Cohort(RecordSchema(icd, cpt), age, gender, codes, vitals), truth


def _draw_vitals(loc: np.ndarray, noise: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    draws = loc[:, :, None] + noise[None, :, None] * rng.standard_normal((len(loc), len(VITALS), 3))
    draws.sort(axis=2)
    return draws.reshape(len(loc), len(VITALS) * 3)
