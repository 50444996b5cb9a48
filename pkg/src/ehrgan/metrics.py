"""Utility measures comparing a real cohort with a synthetic one.

DWS compares per-code incidence, DWP per-code predictability, CVT the
differences encoding ordinal constraints, FAR association rules mined with
maximal Apriori, and CCD per-code conditional statistics.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from .schema import STATS, VITAL_COLUMNS, VITALS, Cohort

SQRT2 = math.sqrt(2.0)


@dataclass
class ScatterSeries:
    """Paired per-item values, real on x and synthetic on y."""

    name: str
    ids: list[str]
    x: np.ndarray
    y: np.ndarray
    skipped: list[str] = field(default_factory=list)
    pearson: float | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)

    @property
    def distances(self) -> np.ndarray:
        """Shortest distance from each dot to the diagonal."""
        return np.abs(self.x - self.y) / SQRT2

    @property
    def signed_distances(self) -> np.ndarray:
        """Positive when the real value exceeds the synthetic one."""
        return (self.x - self.y) / SQRT2

    @property
    def mean_distance(self) -> float | None:
        return float(self.distances.mean()) if len(self.x) else None

    @property
    def std_distance(self) -> float | None:
        return float(self.distances.std()) if len(self.x) else None

    def histogram(self, bins: int = 20) -> dict:
        d = self.signed_distances
        if len(d) == 0:
            return {"edges": [], "counts": []}
        lim = max(float(np.abs(d).max()), 1e-12)
        counts, edges = np.histogram(d, bins=bins, range=(-lim, lim))
        return {"edges": edges.tolist(), "counts": counts.tolist()}

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n": len(self.ids),
            "mean_distance": self.mean_distance,
            "std_distance": self.std_distance,
            "pearson": self.pearson,
            "skipped": list(self.skipped),
            "points": [{"id": i, "x": _num(a), "y": _num(b)} for i, a, b in zip(self.ids, self.x, self.y)],
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "real", "synthetic", "distance"])
            for i, a, b, d in zip(self.ids, self.x, self.y, self.distances):
                w.writerow([i, repr(float(a)), repr(float(b)), repr(float(d))])


def _num(v) -> float | None:
    v = float(v)
    return v if math.isfinite(v) else None


def pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or x.std() == 0 or y.std() == 0:
        return None
    return float(np.corrcoef(x, y)[0, 1])


def _require_shared_vocab(real: Cohort, synth: Cohort) -> None:
    if real.schema.code_names != synth.schema.code_names:
        raise ValueError("real and synthetic cohorts must share one vocabulary")


# ---------------------------------------------------------------------------
# DWS


def dws(real: Cohort, synth: Cohort) -> ScatterSeries:
    """log10 incidence per code; zero incidence is floored at log10(0.5 / n)."""
    _require_shared_vocab(real, synth)
    if len(real) == 0 or len(synth) == 0:
        raise ValueError("DWS needs non-empty cohorts")

    def logp(c: Cohort) -> np.ndarray:
        p = c.codes.mean(axis=0)
        return np.log10(np.where(p > 0, p, 0.5 / len(c)))

    x, y = logp(real), logp(synth)
    return ScatterSeries("dws", real.schema.code_names, x, y, pearson=pearson(x, y))


# ---------------------------------------------------------------------------
# DWP


@dataclass
class LogisticConfig:
    iterations: int = 500
    lr: float = 0.1
    l2: float = 1e-4


def fit_logistic_all(features: np.ndarray, cfg: LogisticConfig = LogisticConfig()) -> tuple[np.ndarray, np.ndarray]:
    """One logistic regression per column, each predicting it from all other columns.

    Full-batch gradient descent from zero.  Column j's model is stored in
    ``weights[:, j]`` (its own coefficient is held at zero) and ``bias[j]``.
    """
    x = np.asarray(features, dtype=np.float64)
    n, d = x.shape
    w = np.zeros((d, d))
    b = np.zeros(d)
    off_diag = 1.0 - np.eye(d)
    for _ in range(cfg.iterations):
        p = _sigmoid(x @ w + b)
        err = p - x
        grad_w = (x.T @ err) / n + cfg.l2 * w
        grad_b = err.mean(axis=0)
        w -= cfg.lr * grad_w * off_diag
        b -= cfg.lr * grad_b
    return w, b


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def f1_score(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    y_true = np.asarray(y_true, dtype=bool)
    y_pred = np.asarray(y_pred, dtype=bool)
    tp = int((y_true & y_pred).sum())
    denom = 2 * tp + int((~y_true & y_pred).sum()) + int((y_true & ~y_pred).sum())
    return 2 * tp / denom if denom else 0.0


def dwp(real_train: Cohort, synth: Cohort, real_test: Cohort, cfg: LogisticConfig = LogisticConfig()) -> ScatterSeries:
    """Per-code F1 of a classifier trained on real vs one trained on synthetic data.

    Both are evaluated on ``real_test``.  Codes whose label is constant in
    either training set are skipped.
    """
    _require_shared_vocab(real_train, synth)
    _require_shared_vocab(real_train, real_test)
    names = real_train.schema.code_names
    xr = real_train.codes.astype(np.float64)
    xs = synth.codes.astype(np.float64)
    xt = real_test.codes.astype(np.float64)

    def degenerate(x):
        m = x.mean(axis=0)
        return (m == 0) | (m == 1)

    skip = degenerate(xr) | degenerate(xs)
    wr, br = fit_logistic_all(xr, cfg)
    ws, bs = fit_logistic_all(xs, cfg)
    pred_r = (xt @ wr + br) > 0
    pred_s = (xt @ ws + bs) > 0
    ids, fx, fy = [], [], []
    for j, name in enumerate(names):
        if skip[j]:
            continue
        truth = xt[:, j] > 0.5
        ids.append(name)
        fx.append(f1_score(truth, pred_r[:, j]))
        fy.append(f1_score(truth, pred_s[:, j]))
    return ScatterSeries("dwp", ids, fx, fy, skipped=[n for n, s in zip(names, skip) if s], pearson=pearson(fx, fy))


# ---------------------------------------------------------------------------
# CVT


ORDINAL_DIFFS = tuple((f"{v}_{hi}-{lo}", f"{v}_{hi}", f"{v}_{lo}") for v in VITALS for hi, lo in (("max", "med"), ("med", "min")))
PRESSURE_DIFFS = tuple((f"sys-dia_{s}", f"sys_{s}", f"dia_{s}") for s in STATS)


@dataclass
class DifferenceDistribution:
    name: str
    real: np.ndarray
    synth: np.ndarray
    bins: int = 30

    @property
    def real_negative(self) -> float:
        return float((self.real < 0).mean()) if len(self.real) else 0.0

    @property
    def synth_negative(self) -> float:
        return float((self.synth < 0).mean()) if len(self.synth) else 0.0

    def histograms(self) -> dict:
        both = np.concatenate([self.real, self.synth])
        if len(both) == 0:
            return {"edges": [], "real": [], "synth": []}
        lo, hi = float(both.min()), float(both.max())
        if hi <= lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, self.bins + 1)
        return {
            "edges": edges.tolist(),
            "real": np.histogram(self.real, edges)[0].tolist(),
            "synth": np.histogram(self.synth, edges)[0].tolist(),
        }

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "real_negative_fraction": self.real_negative,
            "synth_negative_fraction": self.synth_negative,
            **self.histograms(),
        }


@dataclass
class CvtResult:
    distributions: list[DifferenceDistribution]

    def __getitem__(self, name: str) -> DifferenceDistribution:
        for d in self.distributions:
            if d.name == name:
                return d
        raise KeyError(name)

    def total_negative_fraction(self, side: str = "synth") -> float:
        """Pooled fraction of negative differences over the six ordinal distributions."""
        names = [n for n, _, _ in ORDINAL_DIFFS]
        vals = [getattr(self[n], f"{side}_negative") for n in names]
        return float(np.mean(vals))

    def to_dict(self) -> dict:
        return {
            "distributions": [d.to_dict() for d in self.distributions],
            "total_negative_fraction": {"real": self.total_negative_fraction("real"), "synth": self.total_negative_fraction("synth")},
        }


def cvt(real: Cohort, synth: Cohort, bins: int = 30) -> CvtResult:
    out = []
    for name, a, b in ORDINAL_DIFFS + PRESSURE_DIFFS:
        out.append(DifferenceDistribution(name, real.vital(a) - real.vital(b), synth.vital(a) - synth.vital(b), bins))
    return CvtResult(out)


# ---------------------------------------------------------------------------
# FAR


def _as_matrix(transactions) -> np.ndarray:
    if isinstance(transactions, np.ndarray):
        return transactions.astype(bool)
    raise TypeError("transactions must be a boolean matrix (records x items)")


def support_of(matrix: np.ndarray, itemset: Iterable[int]) -> float:
    cols = list(itemset)
    if not cols:
        return 1.0
    return float(matrix[:, cols].all(axis=1).mean())


def frequent_itemsets(transactions, min_s: float) -> dict[frozenset, float]:
    """Level-wise Apriori: every itemset with support strictly above ``min_s``."""
    if not 0 < min_s <= 1:
        raise ValueError("min_s must lie in (0, 1]")
    m = _as_matrix(transactions)
    n = len(m)
    if n == 0:
        return {}
    sup1 = m.mean(axis=0)
    level = {(j,): float(sup1[j]) for j in range(m.shape[1]) if sup1[j] > min_s}
    out: dict[frozenset, float] = {frozenset(k): v for k, v in level.items()}
    cols = {j: m[:, j] for (j,) in level}
    cover = {k: cols[k[0]] for k in level}
    k = 1
    while level:
        keys = sorted(level)
        nxt = {}
        nxt_cover = {}
        for i, a in enumerate(keys):
            for b in keys[i + 1 :]:
                if a[:-1] != b[:-1]:
                    break
                cand = a + (b[-1],)
                if any(cand[:q] + cand[q + 1 :] not in level for q in range(k - 1)):
                    continue
                rows = cover[a] & cols[b[-1]]
                s = rows.sum() / n
                if s > min_s:
                    nxt[cand] = float(s)
                    nxt_cover[cand] = rows
        out.update({frozenset(c): s for c, s in nxt.items()})
        level, cover = nxt, nxt_cover
        k += 1
    return out


def maximal_only(itemsets: Iterable[frozenset]) -> set[frozenset]:
    sets = sorted(set(itemsets), key=len, reverse=True)
    kept: list[frozenset] = []
    for s in sets:
        if not any(s < t for t in kept):
            kept.append(s)
    return set(kept)


def apriori_maximal(transactions, min_s: float) -> set[frozenset]:
    """Maximal frequent itemsets (no frequent proper superset)."""
    return maximal_only(frequent_itemsets(transactions, min_s))


@dataclass(frozen=True)
class AssociationRule:
    antecedent: frozenset
    consequent: frozenset
    support: float
    confidence: float

    @property
    def key(self) -> tuple[frozenset, frozenset]:
        return self.antecedent, self.consequent


def rules_from_maximal(transactions, maximal: Iterable[frozenset], min_c: float) -> list[AssociationRule]:
    """Rules ``f' => f - f'`` from each maximal set with confidence strictly above ``min_c``."""
    m = _as_matrix(transactions)
    cache: dict[frozenset, float] = {}

    def sup(s: frozenset) -> float:
        if s not in cache:
            cache[s] = support_of(m, sorted(s))
        return cache[s]

    out = []
    for f in sorted(maximal, key=lambda s: sorted(s)):
        if len(f) < 2:
            continue
        s_f = sup(f)
        items = sorted(f)
        for r in range(1, len(items)):
            for ante in combinations(items, r):
                a = frozenset(ante)
                conf = s_f / sup(a)
                if conf > min_c:
                    out.append(AssociationRule(a, f - a, s_f, conf))
    return out


@dataclass
class FarResult:
    s_grid: list[float]
    c_grid: list[float]
    precision: list[list[float | None]]
    recall: list[list[float | None]]
    n_real: list[list[int]]
    n_synth: list[list[int]]

    def defined_cells(self) -> list[tuple[float, float]]:
        vals = []
        for row_p, row_r in zip(self.precision, self.recall):
            for p, r in zip(row_p, row_r):
                if p is not None and r is not None:
                    vals.append((p, r))
        return vals

    def to_dict(self) -> dict:
        return {
            "min_s": self.s_grid,
            "min_c": self.c_grid,
            "precision": self.precision,
            "recall": self.recall,
            "n_rules_real": self.n_real,
            "n_rules_synth": self.n_synth,
        }


DEFAULT_S_GRID = tuple(np.round(np.linspace(0.08, 0.22, 8), 6))
DEFAULT_C_GRID = tuple(np.round(np.linspace(0.50, 0.78, 8), 6))


def far(real: Cohort, synth: Cohort, s_grid: Sequence[float] = DEFAULT_S_GRID, c_grid: Sequence[float] = DEFAULT_C_GRID) -> FarResult:
    """Rule overlap over a (min_s, min_c) grid.

    precision = |R_synth & R_real| / |R_synth|, recall = |R_synth & R_real| / |R_real|;
    a cell is undefined (None) when either rule set is empty.
    """
    _require_shared_vocab(real, synth)
    if not s_grid or not c_grid:
        raise ValueError("FAR grids must be non-empty")
    prec, rec, nr, ns = [], [], [], []
    for s in s_grid:
        max_r = apriori_maximal(real.codes, s)
        max_s = apriori_maximal(synth.codes, s)
        row_p, row_r, row_nr, row_ns = [], [], [], []
        for c in c_grid:
            rr = {r.key for r in rules_from_maximal(real.codes, max_r, c)}
            rs = {r.key for r in rules_from_maximal(synth.codes, max_s, c)}
            row_nr.append(len(rr))
            row_ns.append(len(rs))
            if not rr or not rs:
                row_p.append(None)
                row_r.append(None)
                continue
            both = len(rr & rs)
            row_p.append(both / len(rs))
            row_r.append(both / len(rr))
        prec.append(row_p)
        rec.append(row_r)
        nr.append(row_nr)
        ns.append(row_ns)
    return FarResult(list(map(float, s_grid)), list(map(float, c_grid)), prec, rec, nr, ns)


# ---------------------------------------------------------------------------
# CCD


def _per_code(c: Cohort, values: np.ndarray, stat: str) -> np.ndarray:
    """Statistic of ``values`` among carriers of each code (NaN when no carrier)."""
    carriers = c.codes.astype(np.float64)
    count = carriers.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        m = (values @ carriers) / count
        if stat == "mean":
            return m
        # two passes: the one-pass form cancels badly once sqrt is applied
        dev = (values[:, None] - m[None, :]) * carriers
        return np.sqrt(np.einsum("ij,ij->j", dev, dev) / count)


def _ccd_series(name: str, real: Cohort, synth: Cohort, fr: np.ndarray, fs: np.ndarray) -> ScatterSeries:
    names = real.schema.code_names
    present = (real.codes.sum(axis=0) > 0) & (synth.codes.sum(axis=0) > 0)
    ids = [n for n, p in zip(names, present) if p]
    return ScatterSeries(
        name, ids, fr[present], fs[present], skipped=[n for n, p in zip(names, present) if not p], pearson=pearson(fr[present], fs[present])
    )


def ccd_demographics(real: Cohort, synth: Cohort) -> dict[str, ScatterSeries]:
    _require_shared_vocab(real, synth)
    out = {}
    for key, vals, stat in (
        ("age_mean", lambda c: c.age.astype(np.float64), "mean"),
        ("age_std", lambda c: c.age.astype(np.float64), "std"),
        ("female_fraction", lambda c: (c.gender == 1).astype(np.float64), "mean"),
    ):
        out[key] = _ccd_series(f"ccd_{key}", real, synth, _per_code(real, vals(real), stat), _per_code(synth, vals(synth), stat))
    return out


def ccd_vitals(real: Cohort, synth: Cohort) -> dict[str, ScatterSeries]:
    _require_shared_vocab(real, synth)
    out = {}
    for col in VITAL_COLUMNS:
        for stat in ("mean", "std"):
            key = f"{col}_{stat}"
            out[key] = _ccd_series(f"ccd_{key}", real, synth, _per_code(real, real.vital(col), stat), _per_code(synth, synth.vital(col), stat))
    return out


# ---------------------------------------------------------------------------
# SVG output

_SVG_HEAD = '<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">\n'


def _esc(text: str) -> str:
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def scatter_svg(series: ScatterSeries, size: int = 360, margin: int = 44) -> str:
    """Points with a diagonal reference line; real on x, synthetic on y."""
    vals = np.concatenate([series.x, series.y])
    vals = vals[np.isfinite(vals)]
    lo, hi = (float(vals.min()), float(vals.max())) if len(vals) else (0.0, 1.0)
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    span = size - 2 * margin

    def px(v):
        return margin + (v - lo) / (hi - lo) * span

    def py(v):
        return size - margin - (v - lo) / (hi - lo) * span

    out = [_SVG_HEAD.format(w=size, h=size)]
    out.append(f'<rect x="{margin}" y="{margin}" width="{span}" height="{span}" fill="none" stroke="#444"/>\n')
    out.append(f'<line x1="{_fmt(px(lo))}" y1="{_fmt(py(lo))}" x2="{_fmt(px(hi))}" y2="{_fmt(py(hi))}" stroke="#999" stroke-dasharray="4 3"/>\n')
    for a, b in zip(series.x, series.y):
        if math.isfinite(a) and math.isfinite(b):
            out.append(f'<circle cx="{_fmt(px(a))}" cy="{_fmt(py(b))}" r="2.2" fill="#1f77b4" fill-opacity="0.7"/>\n')
    out.append(f'<text x="{size / 2}" y="{size - 10}" text-anchor="middle">real</text>\n')
    out.append(f'<text x="12" y="{size / 2}" text-anchor="middle" transform="rotate(-90 12 {size / 2})">synthetic</text>\n')
    out.append(f'<text x="{margin}" y="{margin - 16}">{_esc(series.name)}</text>\n')
    md = series.mean_distance
    if md is not None:
        out.append(f'<text x="{margin}" y="{margin - 4}" fill="#555">mean d={md:.4g} sd={series.std_distance:.4g}</text>\n')
    for v in (lo + pad, hi - pad):
        out.append(f'<text x="{_fmt(px(v))}" y="{size - margin + 14}" text-anchor="middle">{v:.3g}</text>\n')
        out.append(f'<text x="{margin - 4}" y="{_fmt(py(v))}" text-anchor="end">{v:.3g}</text>\n')
    out.append("</svg>\n")
    return "".join(out)


def histogram_svg(title: str, edges: Sequence[float], groups: dict[str, Sequence[float]], width: int = 420, height: int = 260) -> str:
    """Overlaid step histograms sharing ``edges``; one colour per group."""
    colours = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")
    m = 36
    out = [_SVG_HEAD.format(w=width, h=height), f'<text x="{m}" y="16">{_esc(title)}</text>\n']
    edges = list(edges)
    if len(edges) < 2:
        out.append("</svg>\n")
        return "".join(out)
    lo, hi = edges[0], edges[-1]
    span = hi - lo if hi > lo else 1.0
    top = max([max(c) if len(c) else 0 for c in groups.values()] + [1])
    pw, ph = width - 2 * m, height - 2 * m
    out.append(f'<rect x="{m}" y="{m}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>\n')
    for gi, (name, counts) in enumerate(groups.items()):
        c = colours[gi % len(colours)]
        pts = []
        for j, n in enumerate(counts):
            x0 = m + (edges[j] - lo) / span * pw
            x1 = m + (edges[j + 1] - lo) / span * pw
            y = m + ph - n / top * ph
            pts += [f"{_fmt(x0)},{_fmt(y)}", f"{_fmt(x1)},{_fmt(y)}"]
        out.append(f'<polyline points="{" ".join(pts)}" fill="none" stroke="{c}"/>\n')
        out.append(f'<text x="{width - m}" y="{m + 14 * (gi + 1)}" text-anchor="end" fill="{c}">{_esc(name)}</text>\n')
    out.append(f'<text x="{m}" y="{height - 12}">{lo:.3g}</text><text x="{width - m}" y="{height - 12}" text-anchor="end">{hi:.3g}</text>\n')
    out.append("</svg>\n")
    return "".join(out)
