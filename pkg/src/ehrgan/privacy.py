"""Membership and attribute inference attacks on discretized records.

Records are binary vectors (see ``schema.discretize_cohort``).  Membership
inference flags a known record when some synthetic record lies within a
Hamming threshold of it.  Attribute inference predicts a target's hidden
features by majority vote among its nearest synthetic neighbours, measured on
the features the attacker knows.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .schema import N_AGES, Cohort, Scaler, discretize_cohort, hamming


def _binary(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-D binary matrix")
    return (a != 0).astype(np.float64)


# ---------------------------------------------------------------------------
# membership


@dataclass
class MembershipResult:
    threshold: float
    flagged: np.ndarray
    min_distance: np.ndarray
    true_positives: int
    n_flagged: int
    n_members: int

    @property
    def precision(self) -> float | None:
        return self.true_positives / self.n_flagged if self.n_flagged else None

    @property
    def recall(self) -> float | None:
        return self.true_positives / self.n_members if self.n_members else None

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "precision": self.precision,
            "recall": self.recall,
            "flagged": int(self.n_flagged),
            "members": int(self.n_members),
            "true_positives": int(self.true_positives),
        }


def min_distances(known, synth, chunk: int = 2048) -> np.ndarray:
    """Hamming distance from each known record to its closest synthetic record."""
    k = _binary(known, "known")
    s = _binary(synth, "synth")
    if len(s) == 0:
        raise ValueError("membership inference needs at least one synthetic record")
    if k.shape[1] != s.shape[1]:
        raise ValueError("known and synthetic records differ in width")
    out = np.empty(len(k), dtype=np.int64)
    for a in range(0, len(k), chunk):
        out[a : a + chunk] = hamming(k[a : a + chunk], s).min(axis=1)
    return out


def membership_inference(known, member_flags, synth, threshold: float, distances: np.ndarray | None = None) -> MembershipResult:
    """Flag each known record whose distance to any synthetic record is below ``threshold``."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    members = np.asarray(member_flags, dtype=bool)
    d = min_distances(known, synth) if distances is None else np.asarray(distances)
    if len(d) != len(members):
        raise ValueError("member_flags must have one entry per known record")
    flagged = d < threshold
    return MembershipResult(
        threshold=float(threshold),
        flagged=flagged,
        min_distance=d,
        true_positives=int((flagged & members).sum()),
        n_flagged=int(flagged.sum()),
        n_members=int(members.sum()),
    )


# ---------------------------------------------------------------------------
# attribute


@dataclass
class AttributeResult:
    k: int
    f1: float
    true_positives: int
    false_positives: int
    false_negatives: int
    n_targets: int
    n_hidden: int

    def to_dict(self) -> dict:
        return asdict(self)


def masked_distances(targets, known_mask, synth) -> np.ndarray:
    """Hamming distance on each target's known features; shape (targets, synth).

    ``known_mask`` is one boolean row shared by all targets or one row per target.
    """
    t = _binary(targets, "targets")
    s = _binary(synth, "synth")
    m = np.broadcast_to(np.asarray(known_mask, dtype=bool), t.shape).astype(np.float64)
    # sum_j m_j (s_j + t_j - 2 s_j t_j)
    d = (m * (1.0 - 2.0 * t)) @ s.T + (m * t).sum(axis=1, keepdims=True)
    return np.rint(d).astype(np.int64)


def nearest_neighbours(distances: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` closest synthetic records per row; ties go to the lower index."""
    n = distances.shape[1]
    if k > n:
        raise ValueError(f"k={k} exceeds the {n} synthetic records")
    if k < 1:
        raise ValueError("k must be at least 1")
    key = distances * n + np.arange(n)
    part = np.argpartition(key, k - 1, axis=1)[:, :k]
    order = np.argsort(np.take_along_axis(key, part, axis=1), axis=1)
    return np.take_along_axis(part, order, axis=1)


def attribute_inference(targets, known_mask, synth, k: int) -> AttributeResult:
    """Micro-F1 of majority-vote predictions over all (target, hidden feature) pairs.

    A vote tie predicts 0.
    """
    t = _binary(targets, "targets")
    s = _binary(synth, "synth")
    if t.shape[1] != s.shape[1]:
        raise ValueError("targets and synthetic records differ in width")
    mask = np.broadcast_to(np.asarray(known_mask, dtype=bool), t.shape)
    nbrs = nearest_neighbours(masked_distances(t, mask, s), k)
    votes = s[nbrs].sum(axis=1)
    pred = 2 * votes > k
    hidden = ~mask
    truth = t > 0.5
    tp = int((pred & truth & hidden).sum())
    fp = int((pred & ~truth & hidden).sum())
    fn = int((~pred & truth & hidden).sum())
    denom = 2 * tp + fp + fn
    return AttributeResult(
        k=k,
        f1=2 * tp / denom if denom else 0.0,
        true_positives=tp,
        false_positives=fp,
        false_negatives=fn,
        n_targets=len(t),
        n_hidden=int(hidden.sum()),
    )


def draw_known_masks(records, n_known: int, min_positive: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-record random known-feature sets with at least ``min_positive`` of them positive.

    The required positives are drawn from the record's positive features and
    the rest uniformly from its remaining features.  Returns (masks, eligible);
    ineligible records (too few positives or too narrow) get an all-False row.
    """
    r = _binary(records, "records") > 0.5
    n, width = r.shape
    need = math.ceil(min_positive * n_known - 1e-12)
    masks = np.zeros((n, width), dtype=bool)
    eligible = np.zeros(n, dtype=bool)
    if n_known > width or n_known < 1:
        return masks, eligible
    for i in range(n):
        pos = np.flatnonzero(r[i])
        if len(pos) < need:
            continue
        chosen = rng.choice(pos, size=need, replace=False) if need else np.empty(0, dtype=np.int64)
        rest = np.setdiff1d(np.arange(width), chosen, assume_unique=True)
        fill = rng.choice(rest, size=n_known - need, replace=False)
        masks[i, chosen] = True
        masks[i, fill] = True
        eligible[i] = True
    return masks, eligible


# ---------------------------------------------------------------------------
# suite


@dataclass
class PrivacyConfig:
    thresholds: tuple[float, ...] = (2, 3, 5)
    known_sizes: tuple[int, ...] = (200, 500, 1000, 2000)
    n_targets: int = 2000
    known_fractions: tuple[float, ...] = (0.135, 0.27)
    ks: tuple[int, ...] = (1, 10)
    min_positive: float = 0.04
    member_fraction: float = 0.5
    bins: int = 10

    def __post_init__(self):
        self.thresholds = tuple(float(t) for t in self.thresholds)
        self.known_sizes = tuple(int(n) for n in self.known_sizes)
        self.known_fractions = tuple(float(f) for f in self.known_fractions)
        self.ks = tuple(int(k) for k in self.ks)
        if any(t < 0 for t in self.thresholds):
            raise ValueError("thresholds must be non-negative")
        if not 0 < self.member_fraction < 1:
            raise ValueError("member_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PrivacyConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


class InsufficientRecords(ValueError):
    pass


def feature_spaces(cohort: Cohort, discretized: np.ndarray) -> dict[str, np.ndarray]:
    """Codes with age and gender, and the full record including binned vitals."""
    codes_only = cohort.schema.n_codes + N_AGES + 1
    return {"codes": discretized[:, :codes_only], "full": discretized}


def attack_suite(real_train: Cohort, real_holdout: Cohort, synth: Cohort, config: PrivacyConfig = PrivacyConfig(), seed: int = 0) -> dict:
    """Membership sweep (threshold x known-set size) and attribute sweep (n x k) per feature space."""
    if not len(synth):
        raise ValueError("attack suite needs a non-empty synthetic cohort")
    scaler = Scaler.fit(real_train.vitals)
    disc = {
        "train": discretize_cohort(real_train, scaler, config.bins),
        "holdout": discretize_cohort(real_holdout, scaler, config.bins),
        "synth": discretize_cohort(synth, scaler, config.bins),
    }
    rng = np.random.default_rng([seed, 30])
    report: dict = {"config": config.to_dict(), "seed": seed, "membership": {}, "attribute": {}}

    # membership: one nested draw per size so larger known sets contain smaller ones
    largest = max(config.known_sizes)
    n_mem = [round(s * config.member_fraction) for s in config.known_sizes]
    n_non = [s - m for s, m in zip(config.known_sizes, n_mem)]
    if max(n_mem) > len(real_train) or max(n_non) > len(real_holdout):
        raise InsufficientRecords(
            f"known sets up to {largest} need {max(n_mem)} training and {max(n_non)} holdout records; "
            f"have {len(real_train)} and {len(real_holdout)}"
        )
    mem_idx = rng.permutation(len(real_train))[: max(n_mem)]
    non_idx = rng.permutation(len(real_holdout))[: max(n_non)]

    # attribute targets are compromised training records
    tgt_idx = rng.permutation(len(real_train))[: min(config.n_targets, len(real_train))]

    for space in ("codes", "full"):
        tr = feature_spaces(real_train, disc["train"])[space]
        ho = feature_spaces(real_holdout, disc["holdout"])[space]
        sy = feature_spaces(synth, disc["synth"])[space]
        d_mem = min_distances(tr[mem_idx], sy)
        d_non = min_distances(ho[non_idx], sy)
        rows = []
        for size, nm, nn in zip(config.known_sizes, n_mem, n_non):
            d = np.concatenate([d_mem[:nm], d_non[:nn]])
            flags = np.concatenate([np.ones(nm, bool), np.zeros(nn, bool)])
            for t in config.thresholds:
                res = membership_inference(None, flags, None, t, distances=d)
                rows.append({"known": size, **res.to_dict()})
        report["membership"][space] = rows

        width = tr.shape[1]
        cells = []
        for frac in config.known_fractions:
            n_known = max(1, round(frac * width))
            masks, ok = draw_known_masks(tr[tgt_idx], n_known, config.min_positive, np.random.default_rng([seed, 31, n_known]))
            targets, masks = tr[tgt_idx][ok], masks[ok]
            for k in config.ks:
                if not len(targets) or k > len(sy):
                    cells.append({"n": n_known, "fraction": frac, "k": k, "f1": None, "targets": int(len(targets))})
                    continue
                res = attribute_inference(targets, masks, sy, k)
                cells.append({"n": n_known, "fraction": frac, "k": k, "f1": res.f1, "targets": res.n_targets})
        report["attribute"][space] = cells
    return report
