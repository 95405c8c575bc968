# ROC construction, threshold calibration and confusion-matrix rates,
# micro-averaged over all (trial, device) pairs.

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class RocCurve:
    """Stepwise-exact ROC over all distinct score thresholds.

    Point i is the operating point of the rule "declare active iff
    score > thresholds[i]". pfa and pd are non-decreasing; the first point
    is (0, 0) (threshold = max score) and the last is (1, 1)
    (threshold = -inf).
    """

    thresholds: np.ndarray
    pfa: np.ndarray
    pd: np.ndarray
    auc: float

    @property
    def points(self) -> np.ndarray:
        return np.column_stack([self.pfa, self.pd])


@dataclass
class CalibrationResult:
    tau: float
    pfa: float
    pd: float
    unreachable: bool  # set when every admissible threshold detects nothing


@dataclass
class ErrorRates:
    pd: float
    pfa: float
    miss_rate: float
    false_alarm_count: int


def _check_scores_labels(scores, labels):
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel().astype(np.int8)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise ValueError("need at least one positive and one negative label")
    return scores, labels, n_pos, labels.size - n_pos


def compute_roc(scores, labels) -> RocCurve:
    """ROC swept over every distinct score value.

    Scores and labels are the flattened per-device outputs over all trials;
    detection and false-alarm rates are micro-averages over those pairs.
    The AUC is the trapezoid-rule area, which equals the tie-corrected
    rank statistic.
    """
    scores, labels, n_pos, n_neg = _check_scores_labels(scores, labels)

    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    l_sorted = labels[order]

    tp_cum = np.cumsum(l_sorted)
    fp_cum = np.cumsum(1 - l_sorted)
    # last index of each run of equal scores = counts for "score >= s"
    distinct_end = np.nonzero(np.diff(s_sorted) != 0)[0]
    distinct_end = np.append(distinct_end, s_sorted.size - 1)

    # "score > tau" at tau = each distinct value: counts strictly above,
    # i.e. the cumulative totals at the end of the previous run
    tp = np.concatenate([[0], tp_cum[distinct_end]])
    fp = np.concatenate([[0], fp_cum[distinct_end]])
    thresholds = np.concatenate([s_sorted[distinct_end], [-np.inf]])

    pd_ = tp / n_pos
    pfa = fp / n_neg
    auc = float(np.trapezoid(pd_, pfa))
    return RocCurve(thresholds=thresholds, pfa=pfa, pd=pd_, auc=auc)


def calibrate_threshold(scores, labels, target_pfa: float) -> CalibrationResult:
    """Smallest threshold whose empirical false-alarm rate meets the target.

    Returns the achieved operating point. Thresholds are clamped to >= 0
    (scores are nonnegative by contract, so the all-active point stays
    reachable whenever every score is strictly positive). When the only
    admissible thresholds detect nothing, `unreachable` is flagged.
    """
    if not 0.0 < target_pfa <= 1.0:
        raise ValueError("target_pfa must lie in (0, 1]")
    curve = compute_roc(scores, labels)
    admissible = np.nonzero(curve.pfa <= target_pfa)[0]
    idx = admissible[-1]  # largest admissible pfa = smallest threshold
    tau = float(max(curve.thresholds[idx], 0.0))

    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    pred = scores > tau
    achieved = error_rates(pred, labels)
    return CalibrationResult(
        tau=tau,
        pfa=achieved.pfa,
        pd=achieved.pd,
        unreachable=bool(achieved.pd == 0.0),
    )


def error_rates(predicted, truth) -> ErrorRates:
    """Confusion-matrix rates over concatenated trials.

    pd = TP/(TP+FN), pfa = FP/(FP+TN); rates are NaN when the class is
    absent.
    """
    predicted = np.asarray(predicted).ravel().astype(bool)
    truth = np.asarray(truth).ravel().astype(bool)
    if predicted.shape != truth.shape:
        raise ValueError("predicted and truth must have equal length")
    tp = int(np.sum(predicted & truth))
    fn = int(np.sum(~predicted & truth))
    fp = int(np.sum(predicted & ~truth))
    tn = int(np.sum(~predicted & ~truth))
    pd_ = tp / (tp + fn) if tp + fn else float("nan")
    pfa = fp / (fp + tn) if fp + tn else float("nan")
    miss = 1.0 - pd_ if tp + fn else float("nan")
    return ErrorRates(pd=pd_, pfa=pfa, miss_rate=miss, false_alarm_count=fp)
