"""Loop-heavy numeric kernels with a numba path and a pure-numpy fallback.

Set ``TIP_DISABLE_NUMBA=1`` before import to force the numpy path. Both paths
produce the same values; ``tests/test_kernels.py`` pins that.
"""

import math
import os

import numpy as np

_DISABLE = os.environ.get("TIP_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLE:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on env
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy implementations


def min_dist_numpy(a, b, valid):
    """Earliest-argmin Euclidean distance over the last time axis.

    a, b: (..., T, 2); valid: (..., T). Returns (dist, idx); rows without a
    valid step give (inf, -1).
    """
    d = np.hypot(a[..., 0] - b[..., 0], a[..., 1] - b[..., 1])
    d = np.where(valid, d, np.inf)
    idx = np.argmin(d, axis=-1)
    dist = np.take_along_axis(d, idx[..., None], axis=-1)[..., 0]
    idx = np.where(np.isinf(dist), -1, idx)
    return dist, idx


def auc_numerator_numpy(scores, labels):
    """Twice the Mann-Whitney count via a descending threshold sweep.

    Returns (numerator, n_pos, n_neg) as integers; AUC = numerator / (2 * P * N).
    """
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order].astype(np.int64)
    # last index of each tie group
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    fp = np.cumsum(1 - y)[ends]
    tp_prev = np.r_[0, tp[:-1]]
    fp_prev = np.r_[0, fp[:-1]]
    num = int(np.sum((fp - fp_prev) * (tp + tp_prev)))
    return num, int(y.sum()), int(len(y) - y.sum())


def rescale_progress_numpy(s, factor, v0, v_max, a_max, dt):
    """Scale arc-length progress by ``factor`` then clip speed and acceleration.

    s: (T,) progress from the origin at each future step. The first step may
    take the scaled speed directly; v0 is kept for signature parity. Steps
    that need no clipping keep the scaled target exactly. Returns monotone
    progress (T,).
    """
    target = factor * np.asarray(s, dtype=np.float64)
    out = np.empty_like(target)
    tol = 1e-9
    prev_s = 0.0
    prev_ds = -1.0
    for t in range(target.shape[0]):
        ds = target[t] - prev_s
        hi = v_max * dt
        lo = 0.0
        if prev_ds >= 0.0:
            hi = min(hi, prev_ds + a_max * dt * dt)
            lo = max(lo, prev_ds - a_max * dt * dt)
        if lo - tol <= ds <= hi + tol:
            cur = target[t]
        else:
            ds = min(max(ds, lo), hi)
            cur = prev_s + ds
        prev_ds = cur - prev_s
        prev_s = cur
        out[t] = cur
    return out


def interp_path_numpy(verts, cum, q):
    """Points at arc lengths ``q`` along a polyline, extended past its last vertex."""
    x = np.interp(q, cum, verts[:, 0])
    y = np.interp(q, cum, verts[:, 1])
    # a stopped track ends in zero-length segments; extend along the last real one
    moving = np.flatnonzero(np.diff(cum) > 0)
    if moving.size:
        k = moving[-1]
        seg = verts[k + 1] - verts[k]
        seg_len = cum[k + 1] - cum[k]
        over = q > cum[-1]
        extra = (q[over] - cum[-1]) / seg_len
        x[over] = verts[-1, 0] + extra * seg[0]
        y[over] = verts[-1, 1] + extra * seg[1]
    return np.stack([x, y], axis=-1)


def idm_rollout_numpy(s_init, v_init, v0, gap_to_obstacle, obstacle_active,
                      T_headway, a_max, b, s0, delta, dt):
    """Integrate the Intelligent Driver Model along a 1-D path.

    gap_to_obstacle: (T,) arc position of a standing obstacle per step (only
    read where obstacle_active). Returns progress (T,) after each step.
    """
    n = obstacle_active.shape[0]
    out = np.empty(n)
    s = s_init
    v = v_init
    sqrt_ab = math.sqrt(a_max * b)
    for t in range(n):
        free = 1.0 - (v / v0) ** delta if v0 > 0 else -1.0
        acc = a_max * free
        if obstacle_active[t]:
            gap = max(gap_to_obstacle[t] - s, 1e-3)
            s_star = s0 + max(0.0, v * T_headway + v * v / (2.0 * sqrt_ab))
            acc = a_max * (free - (s_star / gap) ** 2)
        v_new = v + acc * dt
        if v_new < 0.0:
            # stop within the step (ballistic update)
            s = s + (v * v / (2.0 * -acc) if acc < 0 else 0.0)
            v = 0.0
        else:
            s = s + 0.5 * (v + v_new) * dt
            v = v_new
        out[t] = s
    return out


# ---------------------------------------------------------------------------
# numba implementations


if HAVE_NUMBA:

    @njit(cache=True)
    def _min_dist_flat(a, b, valid):
        m, t_len = valid.shape
        dist = np.full(m, np.inf)
        idx = np.full(m, -1, dtype=np.int64)
        for i in range(m):
            best = np.inf
            arg = -1
            for t in range(t_len):
                if not valid[i, t]:
                    continue
                dx = a[i, t, 0] - b[i, t, 0]
                dy = a[i, t, 1] - b[i, t, 1]
                d = math.hypot(dx, dy)
                if d < best:
                    best = d
                    arg = t
            dist[i] = best
            idx[i] = arg
        return dist, idx

    def min_dist_numba(a, b, valid):
        a, b = np.broadcast_arrays(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
        lead = a.shape[:-2]
        t_len = a.shape[-2]
        valid = np.broadcast_to(np.asarray(valid, dtype=np.bool_), lead + (t_len,))
        dist, idx = _min_dist_flat(
            np.ascontiguousarray(a.reshape(-1, t_len, 2)),
            np.ascontiguousarray(b.reshape(-1, t_len, 2)),
            np.ascontiguousarray(valid.reshape(-1, t_len)),
        )
        return dist.reshape(lead), idx.reshape(lead)

    @njit(cache=True)
    def _auc_sweep(s, y):
        n = s.shape[0]
        tp = 0
        fp = 0
        tp_prev = 0
        fp_prev = 0
        num = 0
        for i in range(n):
            if y[i]:
                tp += 1
            else:
                fp += 1
            if i == n - 1 or s[i + 1] != s[i]:
                num += (fp - fp_prev) * (tp + tp_prev)
                tp_prev = tp
                fp_prev = fp
        return num, tp, fp

    def auc_numerator_numba(scores, labels):
        order = np.argsort(-scores, kind="mergesort")
        num, p, n = _auc_sweep(
            np.ascontiguousarray(scores[order], dtype=np.float64),
            np.ascontiguousarray(labels[order], dtype=np.bool_),
        )
        return int(num), int(p), int(n)

    rescale_progress_numba = njit(cache=True)(rescale_progress_numpy)

    @njit(cache=True)
    def interp_path_numba(verts, cum, q):
        n = verts.shape[0]
        out = np.empty((q.shape[0], 2))
        for i in range(q.shape[0]):
            s = q[i]
            if n == 1 or s <= cum[0]:
                out[i, 0] = verts[0, 0]
                out[i, 1] = verts[0, 1]
                continue
            j = np.searchsorted(cum, s, side="right") - 1
            if j >= n - 1:
                k = n - 2
                while k >= 0 and cum[k + 1] - cum[k] <= 0:
                    k -= 1
                if k >= 0 and s > cum[n - 1]:
                    f = (s - cum[n - 1]) / (cum[k + 1] - cum[k])
                    out[i, 0] = verts[n - 1, 0] + f * (verts[k + 1, 0] - verts[k, 0])
                    out[i, 1] = verts[n - 1, 1] + f * (verts[k + 1, 1] - verts[k, 1])
                else:
                    out[i, 0] = verts[n - 1, 0]
                    out[i, 1] = verts[n - 1, 1]
                continue
            seg_len = cum[j + 1] - cum[j]
            f = (s - cum[j]) / seg_len if seg_len > 0 else 0.0
            out[i, 0] = verts[j, 0] + f * (verts[j + 1, 0] - verts[j, 0])
            out[i, 1] = verts[j, 1] + f * (verts[j + 1, 1] - verts[j, 1])
        return out

    idm_rollout_numba = njit(cache=True)(idm_rollout_numpy)

    min_dist = min_dist_numba
    auc_numerator = auc_numerator_numba
    rescale_progress = rescale_progress_numba
    idm_rollout = idm_rollout_numba

    def interp_path(verts, cum, q):
        return interp_path_numba(
            np.ascontiguousarray(verts, dtype=np.float64),
            np.ascontiguousarray(cum, dtype=np.float64),
            np.ascontiguousarray(q, dtype=np.float64),
        )

else:
    min_dist = min_dist_numpy
    auc_numerator = auc_numerator_numpy
    rescale_progress = rescale_progress_numpy
    interp_path = interp_path_numpy
    idm_rollout = idm_rollout_numpy
