"""Confidence metrics: NCE, AUC-ROC, AUC-PR on the incorrect class,
utterance-level RMSE, and equal-width calibration bins with ECE.

Word-level metrics pool every hypothesis word of the corpus into one list.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

BCE_EPS = 1e-7


class UndefinedMetricError(ValueError):
    """The metric has no value for these labels (e.g. a single class)."""


def _arrays(confs, labels) -> tuple[np.ndarray, np.ndarray]:
    c = np.asarray(confs, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if c.shape != y.shape:
        raise ValueError(f"{c.size} confidences vs {y.size} labels")
    return c, y


def _entropy(p: float) -> float:
    return -(p * np.log(p) + (1 - p) * np.log(1 - p))


def nce(confs, labels) -> float:
    """Normalized cross-entropy with natural logs.

    ``(H(p) - H_conf) / H(p)`` where ``p`` is the fraction of correct
    words and ``H_conf`` is the mean binary cross-entropy of the
    confidences. The log base cancels, so the value is base-independent.
    """
    c, y = _arrays(confs, labels)
    p = y.mean() if y.size else 0.0
    if p <= 0.0 or p >= 1.0:
        raise UndefinedMetricError("NCE needs both correct and incorrect words")
    c = np.clip(c, BCE_EPS, 1.0 - BCE_EPS)
    h_conf = -np.mean(y * np.log(c) + (1 - y) * np.log(1 - c))
    h_base = _entropy(p)
    return float((h_base - h_conf) / h_base)


def auc_roc(confs, labels) -> float:
    """Mann-Whitney AUC of confidence separating correct (1) from incorrect
    (0) words; tied scores count one half."""
    c, y = _arrays(confs, labels)
    n_pos = int((y == 1).sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC-ROC needs both classes")
    ranks = rankdata(c, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(confs, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(fpr, tpr, thresholds)`` for predicting "correct" when conf >= t."""
    c, y = _arrays(confs, labels)
    order = np.argsort(-c, kind="mergesort")
    c, y = c[order], y[order]
    last = np.r_[np.nonzero(np.diff(c))[0], c.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    n_pos, n_neg = y.sum(), y.size - y.sum()
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC needs both classes")
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    return fpr, tpr, np.r_[np.inf, c[last]]


def auc_pr_incorrect(confs, labels) -> float:
    """Area under the precision-recall curve for detecting incorrect words.

    Incorrect words are the positive class, scored by ``1 - conf``. The area
    is the step-wise sum ``sum_k (R_k - R_{k-1}) * P_k`` over the distinct
    score thresholds, which never interpolates optimistically between points.
    """
    c, y = _arrays(confs, labels)
    wrong = 1.0 - y
    n_wrong = wrong.sum()
    if n_wrong == 0:
        raise UndefinedMetricError("AUC-PR needs at least one incorrect word")
    score = 1.0 - c
    order = np.argsort(-score, kind="mergesort")
    score, wrong = score[order], wrong[order]
    last = np.r_[np.nonzero(np.diff(score))[0], score.size - 1]
    tp = np.cumsum(wrong)[last]
    precision = tp / (last + 1)
    recall = tp / n_wrong
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def utterance_rmse(conf, target) -> float:
    """Root mean squared error between utterance confidence and a target such
    as WCR or ``1 - WER`` (the caller floors the latter at 0)."""
    c, t = _arrays(conf, target)
    if c.size == 0:
        raise ValueError("no utterances")
    return float(np.sqrt(np.mean((c - t) ** 2)))


@dataclass
class CalibrationBin:
    lo: float
    hi: float
    count: int
    mass: float
    mean_conf: float | None
    accuracy: float | None

    @property
    def empty(self) -> bool:
        return self.count == 0


@dataclass
class Calibration:
    bins: list[CalibrationBin]
    ece: float

    def to_json(self) -> list[dict]:
        return [vars(b).copy() for b in self.bins]


def calibration_curve(confs, labels, n_bins: int = 10) -> Calibration:
    """Equal-width bins on [0, 1]; confidence 1.0 lands in the last bin.

    Empty bins carry ``count == 0`` and ``None`` for mean confidence and
    accuracy. ECE is the mass-weighted absolute gap.
    """
    if n_bins < 2:
        raise ValueError("need at least two bins")
    c, y = _arrays(confs, labels)
    idx = np.minimum((c * n_bins).astype(np.int64), n_bins - 1)
    total = max(c.size, 1)
    bins, ece = [], 0.0
    for b in range(n_bins):
        sel = idx == b
        n = int(sel.sum())
        if n:
            mc, acc = float(c[sel].mean()), float(y[sel].mean())
            ece += n / total * abs(acc - mc)
        else:
            mc = acc = None
        bins.append(CalibrationBin(b / n_bins, (b + 1) / n_bins, n, n / total, mc, acc))
    return Calibration(bins, float(ece))


@dataclass
class EvalRecord:
    """One utterance as seen by the metrics."""

    id: str
    word_confs: list[float]
    word_labels: list[int]
    deletions: int
    wcr: float
    wer: float
    utt_conf: float = field(default=float("nan"))

    def __post_init__(self):
        if len(self.word_confs) != len(self.word_labels):
            raise ValueError(f"{self.id}: {len(self.word_confs)} confidences for "
                             f"{len(self.word_labels)} words")
        if self.word_confs and np.isnan(self.utt_conf):
            self.utt_conf = float(np.mean(self.word_confs))


def flatten(records: Sequence[EvalRecord]) -> tuple[np.ndarray, np.ndarray]:
    confs = np.array([c for r in records for c in r.word_confs], dtype=np.float64)
    labels = np.array([d for r in records for d in r.word_labels], dtype=np.float64)
    return confs, labels


def report(records: Sequence[EvalRecord], n_bins: int = 10) -> dict:
    """All corpus metrics in the report-file layout."""
    confs, labels = flatten(records)
    scored = [r for r in records if r.word_confs]
    utt = np.array([r.utt_conf for r in scored])
    cal = calibration_curve(confs, labels, n_bins)
    return {
        "nce": nce(confs, labels),
        "auc_roc": auc_roc(confs, labels),
        "auc_pr": auc_pr_incorrect(confs, labels),
        "wcr_rmse": utterance_rmse(utt, [r.wcr for r in scored]),
        "wer_rmse": utterance_rmse(utt, [max(0.0, 1.0 - r.wer) for r in scored]),
        "ece": cal.ece,
        "bins": cal.to_json(),
        "n_words": int(labels.size),
        "n_utts": len(records),
        "wcr": float(labels.mean()) if labels.size else 0.0,
    }
