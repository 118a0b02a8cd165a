"""Training objective: variety-style accuracy loss plus the task reward term.

Functions accept numpy arrays (returning floats) or tape tensors (returning
tensors), so the same code serves unit checks and training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffeng as ad
from .core import TipError


class EmptyGroundTruth(TipError, ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 20.0
    beta: float = 5.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")


def _is_tensor(*xs):
    return any(isinstance(x, ad.Tensor) and x.idx >= 0 for x in xs)


def sample_distances(traj, gt, gt_valid):
    """Joint ADE of each sample: (..., K, N, T, 2) vs (..., N, T, 2) -> (..., K)."""
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(gt_valid, dtype=np.float64)
    count = mask.sum(axis=(-1, -2))
    if np.any(count == 0):
        raise EmptyGroundTruth("ground truth has no valid step")
    diff = ad.sub(traj, gt[..., None, :, :, :])
    d = ad.norm(diff, axis=-1)                                  # (..., K, N, T)
    total = ad.sum_(ad.mul(d, mask[..., None, :, :]), axis=(-1, -2))
    return ad.mul(total, (1.0 / count)[..., None])


def batch_accuracy_loss(traj, weights, gt, gt_valid):
    """Per-scene accuracy loss, shape (B,). k-hat ties go to the lowest index."""
    dist = sample_distances(traj, gt, gt_valid)                 # (B, K)
    best = ad.min_axis(dist, axis=-1)
    k_hat = np.argmin(dist.data, axis=-1)
    onehot = np.arange(dist.shape[-1]) == k_hat[..., None]
    logw = ad.sum_(ad.where(onehot, ad.log(weights), 0.0), axis=-1)
    return ad.sub(best, logw)


def accuracy_loss(preds, gt, gt_valid=None):
    """-log w_khat + joint ADE of the sample closest to ``gt``.

    ``preds`` is a PredictionSampleSet (or a (samples, weights) pair of
    tensors); ``gt`` is (N, T, 2).
    """
    if hasattr(preds, "samples"):
        traj, weights = preds.samples, preds.weights
    else:
        traj, weights = preds
    gt = np.asarray(gt, dtype=np.float64)
    if gt_valid is None:
        gt_valid = np.ones(gt.shape[:-1], bool)
    out = batch_accuracy_loss(_add_batch(traj), _add_batch(weights), gt[None], np.asarray(gt_valid)[None])
    out = out[0]
    return out if _is_tensor(traj, weights) else out.item()


def _add_batch(x):
    if isinstance(x, ad.Tensor):
        return x.reshape((1,) + x.shape)
    return np.asarray(x, dtype=np.float64)[None]


def batch_task_reward(utilities, optimal_index):
    """softmax(utilities)[optimal] along the last axis; shape (...,)."""
    u = utilities
    opt = np.asarray(optimal_index)
    n = u.shape[-1]
    onehot = np.arange(n) == opt[..., None]
    return ad.sum_(ad.where(onehot, ad.softmax(u, axis=-1), 0.0), axis=-1)


def task_reward(utilities, optimal_index):
    u = utilities if isinstance(utilities, ad.Tensor) else np.asarray(utilities, dtype=np.float64)
    r = batch_task_reward(u, optimal_index)
    return r if _is_tensor(u) else float(r.data)


def decision_probabilities(utilities):
    """Softmax over candidate utilities (numpy)."""
    u = np.asarray(utilities, dtype=np.float64)
    z = np.exp(u - u.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def total_loss(acc, r_task, cfg: LossConfig):
    """acc + alpha * (-r_task)."""
    if cfg.alpha == 0:
        return acc
    out = ad.add(acc, ad.mul(r_task, -cfg.alpha))
    return out if _is_tensor(acc, r_task) else float(out.data)
