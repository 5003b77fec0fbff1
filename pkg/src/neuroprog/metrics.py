"""Evaluation: per-dataset R², size-weighted R², domain-probe accuracy,
tertile stratification, and the ridge linear baseline."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold

from .errors import ContractError, UndefinedMetricError

RIDGE = 1e-6


def r_squared(pred, target):
    """Coefficient of determination 1 - SS_res/SS_tot (may be negative)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if target.size < 2:
        raise UndefinedMetricError("r_squared needs >= 2 targets")
    ss_tot = float(((target - target.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise UndefinedMetricError("r_squared undefined for zero target "
                                   "variance")
    ss_res = float(((target - pred) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def weighted_r_squared(per_dataset):
    """Size-weighted mean of per-dataset R² values: [(r2, size), ...]."""
    per_dataset = list(per_dataset)
    if not per_dataset:
        raise ContractError("weighted_r_squared needs >= 1 dataset")
    if any(n <= 0 for _, n in per_dataset):
        raise ContractError("dataset sizes must be positive")
    total = sum(n for _, n in per_dataset)
    return sum(r * n for r, n in per_dataset) / total


def probe_accuracy(features, domains, folds=5, seed=0):
    """Cross-validated accuracy of a fresh linear (multinomial logistic)
    probe on frozen features; the audit for residual domain information."""
    x = np.asarray(getattr(features, "data", features), dtype=np.float64)
    y = np.asarray(domains, dtype=np.int64)
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise ContractError("probe needs >= 2 domains")
    if counts.min() < folds:
        raise ContractError(
            f"probe needs >= {folds} samples per domain, got "
            f"{counts.min()}")
    if x.ndim > 2:
        x = x.reshape(x.shape[0], -1)
    skf = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    accs = []
    for tr, te in skf.split(x, y):
        clf = LogisticRegression(max_iter=2000)
        clf.fit(x[tr], y[tr])
        accs.append(float((clf.predict(x[te]) == y[te]).mean()))
    return float(np.mean(accs))


def chance_rate(domains):
    """Majority-class frequency: the probe's chance level."""
    _, counts = np.unique(np.asarray(domains), return_counts=True)
    return float(counts.max() / counts.sum())


@dataclass
class TertileTable:
    assignments: np.ndarray           # 1, 2 or 3 per patient
    cuts: tuple                       # (q33.3, q66.7) on predictions
    months: np.ndarray
    mean_trajectories: dict           # tertile -> mean observed series
    sizes: dict

    def to_rows(self):
        rows = []
        for tert in sorted(self.mean_trajectories):
            for m, v in zip(self.months, self.mean_trajectories[tert]):
                rows.append((tert, float(m), float(v)))
        return rows


def stratify_tertiles(predictions, trajectories, months=None):
    """Rank patients by prediction and cut at the 33.3/66.7 percentiles
    (ties to the lower tertile); mean observed trajectory per tertile."""
    preds = np.asarray(predictions, dtype=np.float64)
    traj = np.asarray(trajectories, dtype=np.float64)
    if preds.size < 3:
        raise ContractError("tertiles need >= 3 patients")
    if traj.shape[0] != preds.size:
        raise ContractError(
            f"{preds.size} predictions vs {traj.shape[0]} trajectories")
    if months is None:
        months = np.arange(traj.shape[1], dtype=np.float64)
    q1, q2 = np.percentile(preds, [100 / 3, 200 / 3])
    assign = np.where(preds <= q1, 1, np.where(preds <= q2, 2, 3))
    mean_traj, sizes = {}, {}
    for tert in (1, 2, 3):
        rows = assign == tert
        sizes[tert] = int(rows.sum())
        if sizes[tert]:
            with np.errstate(invalid="ignore"):
                mean_traj[tert] = np.nanmean(traj[rows], axis=0)
    return TertileTable(assign, (float(q1), float(q2)),
                        np.asarray(months, dtype=np.float64), mean_traj,
                        sizes)


def linear_baseline_fit(train_features, train_targets, ridge=RIDGE):
    """Ridge-damped least squares with intercept; one model per endpoint
    (columns of train_targets). Returns weights of shape [D+1, K]."""
    x = np.asarray(train_features, dtype=np.float64)
    y = np.asarray(train_targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    a = np.column_stack([x, np.ones(x.shape[0])])
    return np.linalg.solve(a.T @ a + ridge * np.eye(a.shape[1]), a.T @ y)


def linear_baseline_predict(weights, features):
    x = np.asarray(features, dtype=np.float64)
    return np.column_stack([x, np.ones(x.shape[0])]) @ weights


def linear_baseline(train_features, train_targets, eval_features):
    """Fit on the training split and predict the evaluation split."""
    w = linear_baseline_fit(train_features, train_targets)
    return linear_baseline_predict(w, eval_features)


# ---------------------------------------------------------------------------
# report assembly


@dataclass
class MetricsReport:
    """Per-(endpoint, dataset) R² with sizes, the Eq.-3 weighted R² per
    endpoint, the probe audit, and the tertile table."""

    per_dataset: dict                 # endpoint -> dataset -> (r2|None, n)
    weighted: dict = field(default_factory=dict)
    probe: float | None = None
    probe_chance: float | None = None
    tertiles: TertileTable | None = None
    config_hash: str = ""
    seed: int = 0

    def __post_init__(self):
        if not self.weighted:
            for ep, data in self.per_dataset.items():
                parts = [(r2, n) for r2, n in data.values()
                         if r2 is not None]
                self.weighted[ep] = (weighted_r_squared(parts)
                                     if parts else None)
        for ep, data in self.per_dataset.items():
            w = self.weighted[ep]
            vals = [r2 for r2, _ in data.values() if r2 is not None]
            if vals and w is not None:
                if not (min(vals) - 1e-12 <= w <= max(vals) + 1e-12):
                    raise ContractError(
                        f"weighted R² {w} outside per-dataset range for "
                        f"{ep}")

    def to_json(self):
        payload = {
            "per_dataset": {ep: {ds: {"r2": r2, "n": n}
                                 for ds, (r2, n) in sorted(data.items())}
                            for ep, data in sorted(
                                self.per_dataset.items())},
            "weighted_r2": dict(sorted(self.weighted.items())),
            "probe_accuracy": self.probe,
            "probe_chance": self.probe_chance,
            "config_hash": self.config_hash,
            "seed": self.seed,
        }
        if self.tertiles is not None:
            payload["tertiles"] = {
                "cuts": list(self.tertiles.cuts),
                "sizes": {str(k): v
                          for k, v in sorted(self.tertiles.sizes.items())},
                "months": self.tertiles.months.tolist(),
                "mean_trajectories": {
                    str(k): v.tolist()
                    for k, v in sorted(
                        self.tertiles.mean_trajectories.items())},
            }
        return json.dumps(payload, sort_keys=True, indent=2)
