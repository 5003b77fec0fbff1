"""Clinical data model: visits, interpolated progression labels,
iterative imputation, clinical feature encoding, and split protocol.

Progression labels are built from deltas relative to the baseline score
(baseline delta = 0) with an ordinary least-squares line over months
[0, 24], evaluated at month 12.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

ENDPOINTS = ("cdrsb", "mmse", "adas_cog12")
CONTINUOUS = ("age", "education", "bmi", "cdrsb", "mmse", "adas_cog12",
              "faq")
CATEGORICAL = {
    "sex": ("M", "F"),
    "diagnosis": ("CN", "MCI", "AD"),
    "apoe4": ("0", "1", "2"),
}
LABEL_WINDOW = (0.0, 24.0)
LABEL_MONTH = 12.0

_SCORE_RANGES = {"mmse": (0.0, 30.0), "cdrsb": (0.0, 18.0),
                 "adas_cog12": (0.0, None), "faq": (None, None)}


@dataclass
class Visit:
    patient_id: str
    study_id: str
    month: float
    age: float | None = None
    sex: str | None = None
    diagnosis: str | None = None
    education: float | None = None
    bmi: float | None = None
    apoe4: str | None = None
    cdrsb: float | None = None
    mmse: float | None = None
    adas_cog12: float | None = None
    faq: float | None = None
    volume_ref: str | None = None

    def __post_init__(self):
        if self.month < 0:
            raise DataError(
                f"visit month must be >= 0, got {self.month} "
                f"(patient {self.patient_id})")
        for name, (lo, hi) in _SCORE_RANGES.items():
            v = getattr(self, name)
            if v is None:
                continue
            if (lo is not None and v < lo) or (hi is not None and v > hi):
                raise DataError(
                    f"{name}={v} out of range for patient "
                    f"{self.patient_id} at month {self.month}")


@dataclass
class Patient:
    id: str
    study_id: str
    visits: list

    @classmethod
    def build(cls, visits):
        visits = sorted(visits, key=lambda v: v.month)
        if not visits:
            raise DataError("patient with no visits")
        pid = visits[0].patient_id
        months = [v.month for v in visits]
        if any(b <= a for a, b in zip(months, months[1:])):
            raise DataError(f"months not strictly increasing for {pid}")
        if sum(1 for m in months if m == 0.0) != 1:
            raise DataError(f"patient {pid} needs exactly one baseline "
                            f"(month 0) visit")
        return cls(pid, visits[0].study_id, visits)

    @property
    def baseline(self):
        for v in self.visits:
            if v.month == 0.0:
                return v
        raise DataError(f"patient {self.id} has no baseline visit")

    def eligible(self):
        """Baseline eligibility: MMSE > 20 and prodromal/mild diagnosis.
        (Amyloid status is not part of the CSV schema and is not checked.)"""
        b = self.baseline
        return (b.mmse is not None and b.mmse > 20
                and b.diagnosis in ("MCI", "AD"))


@dataclass
class InterpolatedLabel:
    endpoint: str
    slope: float
    value_at_12: float
    n_visits_used: int
    valid: bool


def interpolate_labels(patient):
    """Per-endpoint OLS of delta-from-baseline vs month over [0, 24],
    evaluated at month 12. Endpoints with <2 usable points are invalid."""
    base = patient.baseline
    out = {}
    for ep in ENDPOINTS:
        b = getattr(base, ep)
        pts = []
        if b is not None:
            for v in patient.visits:
                val = getattr(v, ep)
                if val is None:
                    continue
                if LABEL_WINDOW[0] <= v.month <= LABEL_WINDOW[1]:
                    pts.append((v.month, val - b))
        if len(pts) < 2:
            out[ep] = InterpolatedLabel(ep, 0.0, 0.0, len(pts), False)
            continue
        months = np.array([p[0] for p in pts])
        deltas = np.array([p[1] for p in pts])
        slope = float(np.polyfit(months, deltas, 1)[0])
        out[ep] = InterpolatedLabel(ep, slope, LABEL_MONTH * slope,
                                    len(pts), True)
    return out


# ---------------------------------------------------------------------------
# iterative imputation


class Imputer:
    """Frozen round-robin least-squares imputer.

    `columns` orders the features; `means` initializes missing cells;
    `coefs[j]` regresses feature j on all the others plus an intercept.
    """

    def __init__(self, columns, means, coefs, max_rounds=25, tol=1e-6):
        self.columns = list(columns)
        self.means = np.asarray(means, dtype=np.float64)
        self.coefs = {int(j): np.asarray(c, dtype=np.float64)
                      for j, c in coefs.items()}
        self.max_rounds = max_rounds
        self.tol = tol

    def transform(self, table):
        """Fill missing cells of `table` (NaN) without any refitting."""
        x = np.array(table, dtype=np.float64)
        missing = np.isnan(x)
        for j in range(x.shape[1]):
            x[missing[:, j], j] = self.means[j]
        for _ in range(self.max_rounds):
            delta = 0.0
            for j, w in self.coefs.items():
                rows = missing[:, j]
                if not rows.any():
                    continue
                others = np.delete(x[rows], j, axis=1)
                pred = others @ w[:-1] + w[-1]
                delta = max(delta, np.abs(pred - x[rows, j]).max())
                x[rows, j] = pred
            if delta < self.tol:
                break
        return x

    def to_json(self):
        return json.dumps({
            "columns": self.columns,
            "means": self.means.tolist(),
            "coefs": {str(j): w.tolist() for j, w in self.coefs.items()},
            "max_rounds": self.max_rounds,
            "tol": self.tol,
        })

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["columns"], d["means"],
                   {int(j): np.array(w) for j, w in d["coefs"].items()},
                   d["max_rounds"], d["tol"])


def impute_iterative(table, max_rounds=25, tol=1e-6, columns=None):
    """Fit round-robin least-squares imputation on `table` (NaN = missing).

    Returns (completed table, frozen Imputer). Ridge damping 1e-8 keeps
    the normal equations solvable under collinearity.
    """
    x = np.array(table, dtype=np.float64)
    n, p = x.shape
    names = list(columns) if columns is not None else [str(j)
                                                       for j in range(p)]
    missing = np.isnan(x)
    for j in range(p):
        if missing[:, j].all():
            raise DataError(f"column {names[j]} has no observed values")
        if (~missing[:, j]).sum() < 2:
            raise DataError(f"column {names[j]} has fewer than 2 observed "
                            f"values")
    means = np.array([x[~missing[:, j], j].mean() for j in range(p)])
    for j in range(p):
        x[missing[:, j], j] = means[j]

    incomplete = [j for j in range(p) if missing[:, j].any()]
    coefs = {}
    for _ in range(max_rounds):
        delta = 0.0
        for j in incomplete:
            obs = ~missing[:, j]
            a = np.column_stack([np.delete(x[obs], j, axis=1),
                                 np.ones(obs.sum())])
            y = x[obs, j]
            w = np.linalg.solve(a.T @ a + 1e-8 * np.eye(a.shape[1]),
                                a.T @ y)
            coefs[j] = w
            rows = missing[:, j]
            others = np.delete(x[rows], j, axis=1)
            pred = others @ w[:-1] + w[-1]
            delta = max(delta, np.abs(pred - x[rows, j]).max())
            x[rows, j] = pred
        if delta < tol:
            break
    return x, Imputer(names, means, coefs, max_rounds, tol)


# ---------------------------------------------------------------------------
# clinical encoding


@dataclass
class Schema:
    """Column order and training-split statistics for encode_clinical."""

    means: dict
    stds: dict
    unknown_count: int = 0

    @property
    def width(self):
        return len(CONTINUOUS) + sum(len(c) + 1
                                     for c in CATEGORICAL.values())

    @classmethod
    def fit(cls, visits):
        means, stds = {}, {}
        for name in CONTINUOUS:
            vals = np.array([getattr(v, name) for v in visits
                             if getattr(v, name) is not None], dtype=float)
            means[name] = float(vals.mean()) if vals.size else 0.0
            sd = float(vals.std()) if vals.size else 1.0
            stds[name] = sd if sd > 0 else 1.0
        return cls(means, stds)

    def to_json(self):
        return json.dumps({"means": self.means, "stds": self.stds})

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["means"], d["stds"])


def encode_clinical(visit, schema):
    """Standardized continuous features followed by one-hot categoricals
    (each with a trailing "missing" class); width is fixed by the schema."""
    parts = []
    for name in CONTINUOUS:
        v = getattr(visit, name)
        if v is None or (isinstance(v, float) and np.isnan(v)):
            parts.append(0.0)  # the standardized training mean
        else:
            parts.append((float(v) - schema.means[name])
                         / schema.stds[name])
    for name, classes in CATEGORICAL.items():
        v = getattr(visit, name)
        hot = np.zeros(len(classes) + 1)
        if v is None:
            hot[-1] = 1.0
        elif str(v) in classes:
            hot[classes.index(str(v))] = 1.0
        else:
            schema.unknown_count += 1
            hot[-1] = 1.0
        parts.extend(hot)
    vec = np.asarray(parts, dtype=np.float64)
    if vec.shape != (schema.width,) or np.isnan(vec).any():
        raise DataError(f"bad encoding for patient {visit.patient_id}")
    return vec


# ---------------------------------------------------------------------------
# splits


def split_cohort(patients, seed, held_out_studies=(),
                 in_study_fraction=0.2):
    """Patient-level splits: held-out studies form out_study_test; a
    fraction of the remaining patients is carved into in_study_test; the
    rest is shuffled 50/50 into train and validation."""
    studies = {p.study_id for p in patients}
    for s in held_out_studies:
        if s not in studies:
            raise ConfigError(f"held-out study {s!r} not in cohort "
                              f"(has {sorted(studies)})")
    held = set(held_out_studies)
    out_test = [p for p in patients if p.study_id in held]
    rest = sorted((p for p in patients if p.study_id not in held),
                  key=lambda p: p.id)
    if not rest:
        raise DataError("no patients left outside held-out studies")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(rest))
    n_in = int(round(in_study_fraction * len(rest)))
    in_test = [rest[i] for i in order[:n_in]]
    remaining = [rest[i] for i in order[n_in:]]
    half = len(remaining) // 2
    return {
        "train": remaining[:len(remaining) - half],
        "validation": remaining[len(remaining) - half:],
        "in_study_test": in_test,
        "out_study_test": out_test,
    }
