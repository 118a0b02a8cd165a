"""Downstream task specifications: planning (selfish and altruistic) and warning.

A task is a candidate decision set plus a utility of each decision given a
weighted sample set. Numpy helpers score single scenes; the ``*_t`` variants
take batched tape tensors for training.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import diffeng as ad
from .core import Scene, TipError, Trajectory, path_length

WARN, NOT_WARN = 0, 1
TIE_TOL = 1e-9


class MissingSimulatedFutures(TipError, ValueError):
    pass


class TaskKind(enum.Enum):
    PLANNING_SELFISH = "PlanningSelfish"
    PLANNING_ALTRUISTIC = "PlanningAltruistic"
    WARNING = "Warning"

    @property
    def is_planning(self):
        return self is not TaskKind.WARNING

    @classmethod
    def parse(cls, text):
        aliases = {
            "planning": cls.PLANNING_SELFISH, "p": cls.PLANNING_SELFISH,
            "planning_altruistic": cls.PLANNING_ALTRUISTIC, "pa": cls.PLANNING_ALTRUISTIC,
            "altruistic": cls.PLANNING_ALTRUISTIC,
            "warning": cls.WARNING, "w": cls.WARNING,
        }
        key = str(text).strip()
        if key.lower() in aliases:
            return aliases[key.lower()]
        return cls(key)


class PlanLabel(enum.Enum):
    CONSERVATIVE = "Conservative"
    NORMAL = "Normal"
    AGGRESSIVE = "Aggressive"


PLAN_FACTORS = {PlanLabel.CONSERVATIVE: 0.8, PlanLabel.NORMAL: 1.0, PlanLabel.AGGRESSIVE: 1.2}


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind = TaskKind.WARNING
    d_safe: float = 3.64
    d_warn: float = 3.64
    beta: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind.parse(self.kind) if not isinstance(self.kind, TaskKind) else self.kind)
        if self.d_safe <= 0 or self.d_warn <= 0:
            raise ValueError("distance thresholds must be positive")


@dataclass
class PlanCandidateSet:
    """Ego plans with, per plan, the object's reactive futures as (prob, Trajectory)."""

    plans: list
    labels: list
    simulated_object_futures: list = field(default=None)

    def __post_init__(self):
        if len(self.plans) < 2 or len(self.labels) != len(self.plans):
            raise ValueError("need at least two labelled plans")
        t = {len(p) for p in self.plans}
        if len(t) != 1:
            raise ValueError("plans must share one length")

    @property
    def m(self):
        return len(self.plans)


@dataclass(frozen=True)
class Decision:
    index: int
    utilities: np.ndarray


def argmax_lowest(u, tol=TIE_TOL):
    """Index of the maximum; values within ``tol`` (relative) of it tie to the lowest index."""
    u = np.asarray(u, dtype=np.float64)
    top = u.max()
    near = u >= top - tol * max(1.0, abs(top))
    return int(np.argmax(near))


# ---------------------------------------------------------------------------
# planning utilities


def u_efficiency(plan: Trajectory) -> float:
    return path_length(plan)


def closest_distances(plan_xy, object_samples):
    """min_t ||plan_t - x_t|| for each sample: (T, 2) vs (K, T, 2) -> (K,)."""
    plan_xy = np.asarray(plan_xy, dtype=np.float64)
    obj = np.asarray(object_samples, dtype=np.float64)
    dist, _ = _kernels.min_dist(np.broadcast_to(plan_xy, obj.shape), obj,
                                np.ones(obj.shape[:-1], bool))
    return dist


def u_safety(plan, preds, object_index, d_safe=3.64) -> float:
    """min(d_safe, sum_k w_k * closest distance between plan and object sample k)."""
    pts = plan.points if isinstance(plan, Trajectory) else plan
    d = closest_distances(pts, preds.samples[:, object_index])
    return float(min(d_safe, float(np.dot(preds.weights, d))))


def u_planning(plan, preds, spec: TaskSpec, object_index=1) -> float:
    return u_efficiency(plan) + spec.beta * u_safety(plan, preds, object_index, spec.d_safe)


def u_planning_altruistic(plan, simulated_object_future, preds, spec: TaskSpec, object_index=1) -> float:
    return path_length(simulated_object_future) + spec.beta * u_safety(
        plan, preds, object_index, spec.d_safe)


def safety_utility_t(plans, object_traj, weights, d_safe):
    """Batched capped safety utility.

    plans (B, M, T, 2) constant; object_traj (B, M, K, T, 2); weights (B, M, K).
    Returns (B, M).
    """
    plans = np.asarray(plans, dtype=np.float64)
    d = ad.norm(ad.sub(object_traj, plans[:, :, None]), axis=-1)   # (B, M, K, T)
    closest = ad.min_axis(d, axis=-1)                               # (B, M, K)
    expected = ad.sum_(ad.mul(weights, closest), axis=-1)           # (B, M)
    cap = np.full(expected.shape + (1,), float(d_safe))
    stacked = ad.concat([expected.reshape(expected.shape + (1,)), cap], axis=-1)
    return ad.min_axis(stacked, axis=-1)


# ---------------------------------------------------------------------------
# warning utilities


def _pair_min_distance(sample, ego_index, obj, valid=None):
    sample = np.asarray(sample, dtype=np.float64)
    v = np.ones(sample.shape[1], bool) if valid is None else valid[ego_index] & valid[obj]
    dist, idx = _kernels.min_dist(sample[ego_index], sample[obj], v)
    return float(dist)


def min_object_distance(sample, ego_index, object_indices, valid=None):
    return min(_pair_min_distance(sample, ego_index, j, valid) for j in object_indices)


def collision_score_hard(sample, ego_index, object_indices, d_warn=3.64, valid=None) -> int:
    """1 if any object comes closer than d_warn to the ego, else 0."""
    return int(min_object_distance(sample, ego_index, object_indices, valid) < d_warn)


def collision_score_soft(sample, ego_index, object_indices, d_warn=3.64, valid=None) -> float:
    """max over objects of sigmoid(d_warn - closest distance)."""
    d = np.array([_pair_min_distance(sample, ego_index, j, valid) for j in object_indices])
    return float(ad._sigmoid(d_warn - d).max())


def warning_utilities(preds, spec: TaskSpec, soft=False, ego_index=0, object_indices=(1,)):
    """(u_warn, u_not_warn) with u_warn the weighted collision score."""
    score = collision_score_soft if soft else collision_score_hard
    r = np.array([score(s, ego_index, object_indices, spec.d_warn) for s in preds.samples])
    # weights sum to one only up to rounding; keep the pair a probability
    u_warn = float(np.clip(np.dot(preds.weights, r), 0.0, 1.0))
    return u_warn, 1.0 - u_warn


def collision_scores_t(traj, ego_index, object_indices, d_warn, soft=True):
    """Per-sample collision scores from (B, K, N, T, 2) -> (B, K)."""
    per_obj = []
    for j in object_indices:
        d = ad.norm(ad.sub(traj[:, :, j], traj[:, :, ego_index]), axis=-1)  # (B, K, T)
        closest = ad.min_axis(d, axis=-1)
        if soft:
            r = ad.sigmoid(ad.sub(d_warn, closest))
        else:
            r = ad.Tensor((closest.data < d_warn).astype(np.float64))
        per_obj.append(r.reshape(r.shape + (1,)))
    if len(per_obj) == 1:
        return per_obj[0].reshape(per_obj[0].shape[:-1])
    return ad.max_axis(ad.concat(per_obj, axis=-1), axis=-1)


def warning_utilities_t(traj, weights, ego_index, object_indices, d_warn, soft=True):
    """(B, 2) utilities [u_warn, u_not_warn]."""
    r = collision_scores_t(traj, ego_index, object_indices, d_warn, soft)
    u_warn = ad.sum_(ad.mul(weights, r), axis=-1)
    u_warn = u_warn.reshape(u_warn.shape + (1,))
    return ad.concat([u_warn, ad.sub(1.0, u_warn)], axis=-1)


# ---------------------------------------------------------------------------
# ground truth


def _gt_sample_set(traj: Trajectory, n_agents, object_index, T):
    from .model import PredictionSampleSet

    s = np.zeros((1, n_agents, T, 2))
    s[0, object_index] = traj.points
    return PredictionSampleSet(s, np.ones(1))


def planning_utilities_gt(scene: Scene, spec: TaskSpec, cands: PlanCandidateSet, object_index=None):
    """Utility of every plan against its simulated object reactions (expectation over outcomes)."""
    if cands is None or cands.simulated_object_futures is None:
        raise MissingSimulatedFutures("planning ground truth needs reactive object rollouts")
    obj = scene.object_indices[0] if object_index is None else object_index
    us = []
    for plan, outcomes in zip(cands.plans, cands.simulated_object_futures):
        u = 0.0
        for prob, traj in outcomes:
            preds = _gt_sample_set(traj, scene.n_agents, obj, len(plan))
            if spec.kind is TaskKind.PLANNING_ALTRUISTIC:
                u += prob * u_planning_altruistic(plan, traj, preds, spec, obj)
            else:
                u += prob * u_planning(plan, preds, spec, obj)
        us.append(u)
    return np.array(us)


def ground_truth_decision(scene: Scene, spec: TaskSpec, plan_candidates=None) -> Decision:
    if spec.kind is TaskKind.WARNING:
        r = collision_score_hard(scene.future_xy, scene.ego_index, scene.object_indices,
                                 spec.d_warn, scene.future_valid)
        u = np.array([float(r), 1.0 - r])
        return Decision(WARN if r else NOT_WARN, u)
    u = planning_utilities_gt(scene, spec, plan_candidates)
    return Decision(argmax_lowest(u), u)
