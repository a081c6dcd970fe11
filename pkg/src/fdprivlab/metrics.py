"""LDIA distances and membership-inference ROC statistics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError
from .rng import stream

PROB_FLOOR = 1e-12


def _pair(p_hat, p):
    a = np.asarray(p_hat, dtype=float)
    b = np.asarray(p, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def kl_divergence(p_hat, p) -> float:
    """``sum_m p_hat_m * log(p_hat_m / p_m)``, natural log, inferred vector first.

    Both vectors are floored at 1e-12 inside the logarithm.
    """
    a, b = _pair(p_hat, p)
    terms = a * (np.log(np.maximum(a, PROB_FLOOR)) - np.log(np.maximum(b, PROB_FLOOR)))
    return float(np.where(a > 0, terms, 0.0).sum())


def chebyshev(p_hat, p) -> float:
    a, b = _pair(p_hat, p)
    return float(np.max(np.abs(a - b)))


@dataclass(frozen=True)
class LdiaScore:
    kl: float
    chebyshev: float

    @classmethod
    def of(cls, p_hat, p) -> "LdiaScore":
        return cls(kl_divergence(p_hat, p), chebyshev(p_hat, p))


def random_ldia_baseline(num_classes: int, seed: int) -> np.ndarray:
    """One draw from the flat Dirichlet over ``num_classes`` labels."""
    if num_classes < 2:
        raise ValidationError("need at least two classes")
    return stream(seed, "random-ldia").dirichlet(np.ones(num_classes))


# --- ROC ----------------------------------------------------------------------


@dataclass(frozen=True)
class RocCurve:
    """Operating points for "member iff score >= threshold", swept from the
    highest threshold down. ``thresholds[0]`` is ``+inf`` (the (0, 0) point)."""

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
            writer.writerow([repr(float(t)), repr(float(f)), repr(float(p))])
        return buf.getvalue()


def _scores_truth(verdicts):
    if isinstance(verdicts, tuple) and len(verdicts) == 2:
        scores, truth = verdicts
    else:
        scores = [v.rank_score for v in verdicts]
        truth = [v.is_member_truth for v in verdicts]
    scores = np.asarray(scores, dtype=float)
    truth = np.asarray(truth, dtype=bool)
    if scores.shape != truth.shape:
        raise ShapeError("scores and truth differ in length")
    n_pos = int(truth.sum())
    if n_pos == 0 or n_pos == truth.size:
        raise ValidationError("ROC needs at least one member and one non-member")
    return scores, truth


def roc(verdicts) -> RocCurve:
    """ROC over the unique scores of ``verdicts``.

    Accepts a list of :class:`~fdprivlab.attacks.MembershipVerdict` (ranked
    by ``rank_score``, which is monotone in ``lambda_``) or a ``(scores,
    truth)`` pair. Equal scores form one step, so the trapezoid AUC equals the
    Mann-Whitney statistic with half credit for ties.
    """
    scores, truth = _scores_truth(verdicts)
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], truth[order]
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(t)[ends]
    fp = np.cumsum(~t)[ends]
    tpr = np.r_[0.0, tp / truth.sum()]
    fpr = np.r_[0.0, fp / (~truth).sum()]
    thresholds = np.r_[np.inf, s[ends]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thresholds, fpr, tpr, auc)


def auc(verdicts) -> float:
    return roc(verdicts).auc


def tpr_at_fpr(curve: RocCurve, fpr_target: float) -> float:
    """Largest TPR over operating points whose FPR does not exceed the target."""
    if not 0 < fpr_target < 1:
        raise ValidationError("fpr_target must lie strictly between 0 and 1")
    ok = curve.fpr <= fpr_target + 1e-15
    return float(curve.tpr[ok].max())


def balanced_accuracy(verdicts, threshold: float | None = None) -> tuple[float, float]:
    """``(TPR + TNR) / 2`` and the threshold used.

    Without a threshold the sweep point that maximises balanced accuracy is
    chosen.
    """
    scores, truth = _scores_truth(verdicts)
    if threshold is not None:
        pred = scores >= threshold
        tpr = pred[truth].mean()
        tnr = (~pred[~truth]).mean()
        return float((tpr + tnr) / 2.0), float(threshold)
    curve = roc((scores, truth))
    values = (curve.tpr + 1.0 - curve.fpr) / 2.0
    best = int(np.argmax(values))
    return float(values[best]), float(curve.thresholds[best])


@dataclass(frozen=True)
class MiaSummary:
    auc: float
    tpr_at_1pct: float
    tpr_at_01pct: float
    balanced_accuracy: float
    threshold: float
    members: int
    non_members: int

    def to_json(self) -> dict:
        return {
            "auc": self.auc,
            "tpr@1%fpr": self.tpr_at_1pct,
            "tpr@0.1%fpr": self.tpr_at_01pct,
            "balanced_accuracy": self.balanced_accuracy,
            "threshold": self.threshold,
            "members": self.members,
            "non_members": self.non_members,
        }


def summarize(verdicts) -> MiaSummary:
    scores, truth = _scores_truth(verdicts)
    curve = roc((scores, truth))
    bacc, thr = balanced_accuracy((scores, truth))
    return MiaSummary(curve.auc, tpr_at_fpr(curve, 0.01), tpr_at_fpr(curve, 0.001), bacc, thr,
                      int(truth.sum()), int((~truth).sum()))
