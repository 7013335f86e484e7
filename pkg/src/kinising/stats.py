"""Evaluation: trajectory moments, coupling errors and ROC analysis."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from math import comb

import numpy as np

from .errors import ValidationError
from .model import SpinTrajectory
from .sampler import make_rng

_CHUNK = 8192


@dataclass
class StatsReport:
    """Time-averaged moments of a trajectory.

    ``C3`` and ``C4`` map to ``(tuples, values)``: the sampled index tuples
    (strictly increasing, one per row) and their central moments
    ``<prod_k (s_k - m_k)>``.
    """

    m: np.ndarray
    C2: np.ndarray
    C3: tuple | None = None
    C4: tuple | None = None
    t_end: float = 0.0
    seed: int = 0
    subset_budget: int = 0
    meta: dict = field(default_factory=dict)


def index_tuples(n: int, order: int, budget: int, seed: int) -> np.ndarray:
    """Up to ``budget`` distinct sorted index tuples, chosen reproducibly from ``seed``."""
    total = comb(n, order)
    if total == 0:
        return np.zeros((0, order), dtype=np.int64)
    rng = make_rng(seed, stream=10 + order)
    if total <= budget:
        return np.array(list(combinations(range(n), order)), dtype=np.int64)
    if total <= 2_000_000:
        pick = np.sort(rng.choice(total, size=budget, replace=False))
        all_t = np.array(list(combinations(range(n), order)), dtype=np.int64)
        return all_t[pick]
    seen = set()
    while len(seen) < budget:
        seen.add(tuple(sorted(rng.choice(n, size=order, replace=False).tolist())))
    return np.array(sorted(seen), dtype=np.int64)


def trajectory_stats(traj: SpinTrajectory, order: int = 2, subset_budget: int = 2000,
                     seed: int = 0) -> StatsReport:
    """Means and central moments up to ``order`` as exact interval-weighted integrals."""
    if order not in (2, 3, 4):
        raise ValidationError("order must be 2, 3 or 4")
    states = traj.states()
    w = traj.durations / traj.t_end
    m = w @ states
    n = traj.n_spins
    C2 = np.zeros((n, n))
    tuples = {k: index_tuples(n, k, subset_budget, seed) for k in range(3, order + 1)}
    acc = {k: np.zeros(len(t)) for k, t in tuples.items()}
    for a in range(0, w.size, _CHUNK):
        d = states[a:a + _CHUNK] - m
        wc = w[a:a + _CHUNK]
        C2 += d.T @ (d * wc[:, None])
        for k, t in tuples.items():
            prod = d[:, t[:, 0]]
            for c in range(1, k):
                prod = prod * d[:, t[:, c]]
            acc[k] += wc @ prod
    C2 = 0.5 * (C2 + C2.T)
    report = StatsReport(m, C2, t_end=traj.t_end, seed=seed, subset_budget=subset_budget)
    if 3 in tuples:
        report.C3 = (tuples[3], acc[3])
    if 4 in tuples:
        report.C4 = (tuples[4], acc[4])
    return report


def mse(J_true, J_est, theta_true=None, theta_est=None) -> float:
    """Mean squared coupling error; fields are included when both are given."""
    J_true = np.asarray(J_true, dtype=np.float64)
    J_est = np.asarray(J_est, dtype=np.float64)
    if J_true.shape != J_est.shape:
        raise ValidationError("coupling matrices differ in shape")
    diff = (J_true - J_est).ravel()
    if theta_true is not None and theta_est is not None:
        t_true = np.asarray(theta_true, dtype=np.float64).ravel()
        t_est = np.asarray(theta_est, dtype=np.float64).ravel()
        if t_true.shape != t_est.shape:
            raise ValidationError("field vectors differ in shape")
        diff = np.concatenate((diff, t_true - t_est))
    return float(np.mean(diff ** 2))


@dataclass(frozen=True)
class RocCurve:
    """Step ROC curve; ``thresholds[0]`` is ``inf`` (nothing called positive)."""

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc_auc(truth, scores, mask=None) -> RocCurve:
    """ROC curve over every distinct score threshold (score >= z is positive).

    Tied scores move together, so the trapezoidal area equals the
    Mann-Whitney probability with ties counted one half.
    """
    truth = np.asarray(truth).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    if truth.shape != scores.shape:
        raise ValidationError("truth and scores differ in shape")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        truth, scores = truth[mask], scores[mask]
    truth, scores = truth.ravel(), scores.ravel()
    if not np.all(np.isfinite(scores)):
        raise ValidationError("scores must be finite")
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC undefined: truth has a single class")
    order = np.argsort(-scores, kind="mergesort")
    s, t = scores[order], truth[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(t)[last]
    fp = (last + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[last]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) * 0.5))
    return RocCurve(fpr, tpr, thresholds, auc)


def pearson(x, y) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size < 2:
        raise ValidationError("need two vectors of equal length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValidationError("pearson correlation undefined for constant input")
    r = float(dx @ dy) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def offdiag_mask(n: int) -> np.ndarray:
    return ~np.eye(n, dtype=bool)
