"""Displacement metrics and ROC-based task metrics."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import _kernels
from .core import TipError, last_valid_index
from .losses import EmptyGroundTruth
from .tasks import TaskSpec, ground_truth_decision, warning_utilities, WARN


class SingleClass(TipError, ValueError):
    pass


def displacement_metrics(preds, gt, gt_valid=None):
    """(min_ade, min_fde, w_ade, w_fde) for one scene, averaged jointly over agents.

    FDE uses each agent's last valid future step.
    """
    samples = np.asarray(preds.samples, dtype=np.float64)    # (K, N, T, 2)
    w = np.asarray(preds.weights, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.ones(gt.shape[:-1], bool) if gt_valid is None else np.asarray(gt_valid, bool)
    if not valid.any():
        raise EmptyGroundTruth("no valid ground-truth step")
    d = np.hypot(*(samples - gt[None]).transpose(3, 0, 1, 2))   # (K, N, T)
    ade = (d * valid).sum(axis=(1, 2)) / valid.sum()
    last = last_valid_index(valid)                              # (N,)
    agents = np.flatnonzero(last >= 0)
    fde = d[:, agents, last[agents]].mean(axis=1)
    return float(ade.min()), float(fde.min()), float(w @ ade), float(w @ fde)


# ---------------------------------------------------------------------------
# ROC


def _binary_inputs(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).astype(bool).reshape(-1)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if y.all() or not y.any():
        raise SingleClass("both classes must be present")
    return s, y


def roc_curve(scores, labels):
    """(fpr, tpr, thresholds) from a descending threshold sweep, starting at (0, 0)."""
    s, y = _binary_inputs(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    fp = np.cumsum(~y)[ends]
    fpr = np.r_[0.0, fp / fp[-1]]
    tpr = np.r_[0.0, tp / tp[-1]]
    return fpr, tpr, np.r_[np.inf, s[ends]]


def roc_auc_binary(scores, labels) -> float:
    """Trapezoidal ROC area; equals P(s+ > s-) + P(tie)/2 exactly."""
    s, y = _binary_inputs(scores, labels)
    num, p, n = _kernels.auc_numerator(s, y)
    return num / (2.0 * p * n)


def roc_auc_ovo(score_vectors, labels) -> float:
    """Hand-Till one-vs-one multiclass AUC over the classes present in ``labels``."""
    P = np.asarray(score_vectors, dtype=np.float64)
    y = np.asarray(labels).astype(int).reshape(-1)
    if P.ndim != 2 or len(P) != len(y):
        raise ValueError("score_vectors must be (n, n_classes)")
    classes = np.unique(y)
    if len(classes) < 2:
        raise SingleClass("at least two classes must be present")
    pair_aucs = []
    for i, j in combinations(classes, 2):
        sel = (y == i) | (y == j)
        a_ij = roc_auc_binary(P[sel, i], y[sel] == i)
        a_ji = roc_auc_binary(P[sel, j], y[sel] == j)
        pair_aucs.append(0.5 * (a_ij + a_ji))
    return float(np.mean(pair_aucs))


def warning_task_scores(preds, scene, spec: TaskSpec):
    """(predicted collision likelihood with hard scores, ground-truth warn label)."""
    u_warn, _ = warning_utilities(preds, spec, soft=False,
                                  ego_index=scene.ego_index, object_indices=scene.object_indices)
    label = ground_truth_decision(scene, spec).index == WARN
    return u_warn, bool(label)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    min_ade: float
    min_fde: float
    w_ade: float
    w_fde: float
    auc_roc: float
    n_examples: int
    extra: dict = field(default_factory=dict)

    def rows(self):
        base = [("min_ade", self.min_ade), ("min_fde", self.min_fde), ("w_ade", self.w_ade),
                ("w_fde", self.w_fde), ("auc_roc", self.auc_roc)]
        return base + sorted(self.extra.items())

    def to_text(self):
        lines = [f"{k}={v!r}" for k, v in self.rows()]
        lines.append(f"n_examples={self.n_examples}")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        buf.write("metric,value,n\n")
        for k, v in self.rows():
            buf.write(f"{k},{v!r},{self.n_examples}\n")
        return buf.getvalue()


@dataclass
class MetricsAccumulator:
    """Associative accumulator: merge() of shards equals one pass over all examples."""

    sums: np.ndarray = field(default_factory=lambda: np.zeros(4))
    n: int = 0
    scores: list = field(default_factory=list)
    labels: list = field(default_factory=list)

    def add(self, disp, score, label):
        self.sums = self.sums + np.asarray(disp, dtype=np.float64)
        self.n += 1
        self.scores.append(score)
        self.labels.append(label)

    def merge(self, other):
        return MetricsAccumulator(self.sums + other.sums, self.n + other.n,
                                  self.scores + other.scores, self.labels + other.labels)

    def report(self, multiclass=False, extra=None) -> MetricsReport:
        if self.n == 0:
            raise ValueError("no examples accumulated")
        mean = self.sums / self.n
        if multiclass:
            auc = roc_auc_ovo(np.array(self.scores), np.array(self.labels))
        else:
            auc = roc_auc_binary(np.array(self.scores), np.array(self.labels))
        return MetricsReport(*map(float, mean), auc_roc=float(auc), n_examples=self.n,
                             extra=dict(extra or {}))
