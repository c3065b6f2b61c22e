"""AUC, bootstrap intervals, DeLong's paired test and policy statistics."""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .models import COMBOS, MODALITIES, Combo

logger = logging.getLogger(__name__)


def _check_binary(labels) -> np.ndarray:
    y = np.asarray(labels).astype(np.int64).reshape(-1)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    if y.min() == y.max():
        raise ValueError("AUC is undefined when only one class is present")
    return y


def auc(p_hats, labels) -> float:
    """Mann-Whitney AUC: P(p_pos > p_neg) with ties counted one half."""
    y = _check_binary(labels)
    p = np.asarray(p_hats, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    ranks = stats.rankdata(p)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def bootstrap_ci(p_hats, labels, iters: int = 1000, level: float = 0.95,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval of the AUC.

    Resamples missing a class are re-drawn, so exactly ``iters`` AUCs are used.
    """
    y = _check_binary(labels)
    p = np.asarray(p_hats, dtype=np.float64).reshape(-1)
    rng = np.random.default_rng(seed)
    n = len(y)
    values = np.empty(iters)
    i = 0
    while i < iters:
        idx = rng.integers(0, n, size=n)
        yb = y[idx]
        if yb.min() == yb.max():
            continue
        values[i] = auc(p[idx], yb)
        i += 1
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [100 * alpha, 100 * (1 - alpha)])
    return float(lo), float(hi)


def _midranks(x: np.ndarray) -> np.ndarray:
    return stats.rankdata(x, method="average")


def delong_components(p_hats, labels) -> tuple[float, np.ndarray, np.ndarray]:
    """AUC and the structural components (V10 over positives, V01 over negatives)."""
    y = _check_binary(labels)
    p = np.asarray(p_hats, dtype=np.float64).reshape(-1)
    pos, neg = p[y == 1], p[y == 0]
    m, n = len(pos), len(neg)
    tz = _midranks(np.concatenate([pos, neg]))
    v10 = (tz[:m] - _midranks(pos)) / n
    v01 = 1.0 - (tz[m:] - _midranks(neg)) / m
    theta = float(v10.mean())
    return theta, v10, v01


def delong_covariance(preds: Sequence[np.ndarray], labels) -> tuple[np.ndarray, np.ndarray]:
    """AUCs and their covariance matrix for predictions on the same records."""
    comps = [delong_components(p, labels) for p in preds]
    theta = np.array([c[0] for c in comps])
    v10 = np.array([c[1] for c in comps])
    v01 = np.array([c[2] for c in comps])
    m, n = v10.shape[1], v01.shape[1]
    s10 = np.atleast_2d(np.cov(v10))
    s01 = np.atleast_2d(np.cov(v01))
    return theta, s10 / m + s01 / n


def delong_test(p1, p2, labels) -> tuple[float, float, float]:
    """Two-sided DeLong test for paired AUCs; returns ``(auc1, auc2, p_value)``."""
    p1 = np.asarray(p1, dtype=np.float64).reshape(-1)
    p2 = np.asarray(p2, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if not (len(p1) == len(p2) == len(y)):
        raise ValueError("paired predictions and labels must have equal length")
    theta, cov = delong_covariance([p1, p2], y)
    var = cov[0, 0] + cov[1, 1] - 2.0 * cov[0, 1]
    diff = theta[0] - theta[1]
    if not var > 1e-300:
        return float(theta[0]), float(theta[1]), 1.0
    z = diff / np.sqrt(var)
    return float(theta[0]), float(theta[1]), float(2.0 * stats.norm.sf(abs(z)))


def prediction_correlation(predictions: Mapping[str, Sequence[float]]
                           ) -> tuple[list[str], np.ndarray]:
    """Pearson correlation between every pair of prediction vectors."""
    names = list(predictions)
    P = np.array([np.asarray(predictions[k], dtype=np.float64) for k in names])
    if P.ndim != 2:
        raise ValueError("prediction vectors must have equal length")
    centred = P - P.mean(axis=1, keepdims=True)
    norms = np.sqrt((centred ** 2).sum(axis=1))
    flat = norms == 0
    if flat.any():
        logger.warning("zero-variance predictions for %s; their correlations are reported as 0",
                       [names[i] for i in np.flatnonzero(flat)])
    safe = np.where(flat, 1.0, norms)
    corr = (centred @ centred.T) / np.outer(safe, safe)
    corr[flat, :] = 0.0
    corr[:, flat] = 0.0
    np.fill_diagonal(corr, 1.0)
    return names, np.clip(corr, -1.0, 1.0)


@dataclass
class PolicyStats:
    histogram: dict[str, int]
    skip_rates: tuple[float, float, float]
    n: int


def policy_report(trajectories: Sequence) -> PolicyStats:
    """Combo histogram and per-modality skip rates from resolved trajectories.

    Accepts anything with a ``combo`` attribute (``Combo`` or name) or bare combos.
    """
    combos = []
    for t in trajectories:
        c = getattr(t, "combo", t)
        combos.append(c if isinstance(c, Combo) else Combo.parse(str(c)))
    counts = Counter(c.name for c in combos)
    hist = {c.name: counts.get(c.name, 0) for c in COMBOS}
    n = len(combos)
    used = np.zeros(3)
    for c in combos:
        used[list(c.modalities)] += 1
    skip = tuple(float(1.0 - u / n) if n else 0.0 for u in used)
    return PolicyStats(hist, skip, n)


@dataclass
class MethodResult:
    name: str
    auc: float
    ci: tuple[float, float]
    p_value: float | None
    mflops: float


@dataclass
class EvalReport:
    methods: list[MethodResult]
    reference: str | None = None
    policy: PolicyStats | None = None
    correlation: tuple[list[str], np.ndarray] | None = field(default=None, repr=False)

    def by_name(self) -> dict[str, MethodResult]:
        return {m.name: m for m in self.methods}


def evaluate_methods(predictions: Mapping[str, np.ndarray], labels, mflops: Mapping[str, float],
                     reference: str | None = None, iters: int = 1000, seed: int = 0) -> EvalReport:
    """AUC, bootstrap CI and DeLong p-value against ``reference`` for each method."""
    y = np.asarray(labels)
    rows = []
    for name, p in predictions.items():
        lo, hi = bootstrap_ci(p, y, iters=iters, seed=seed)
        pval = None
        if reference is not None and name != reference:
            pval = delong_test(predictions[reference], p, y)[2]
        rows.append(MethodResult(name, auc(p, y), (lo, hi), pval, float(mflops[name])))
    return EvalReport(rows, reference)


def _f(x: float) -> str:
    return "%.6f" % x


def write_report_csv(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "auc", "ci_lo", "ci_hi", "p_value", "mflops"])
        for m in report.methods:
            w.writerow([m.name, _f(m.auc), _f(m.ci[0]), _f(m.ci[1]),
                        "" if m.p_value is None else _f(m.p_value), _f(m.mflops)])


def write_policy_csv(stats_: PolicyStats, combo_path: str | Path, skip_path: str | Path) -> None:
    with open(combo_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["combo", "count"])
        for name, count in stats_.histogram.items():
            w.writerow([name, count])
    with open(skip_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["modality", "skip_rate"])
        for m, rate in zip(MODALITIES, stats_.skip_rates):
            w.writerow([m, _f(rate)])


def write_correlation_csv(names: Sequence[str], corr: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", *names])
        for name, row in zip(names, corr):
            w.writerow([name, *(_f(v) for v in row)])
