"""Encoder-decoder trajectory predictor emitting K weighted joint samples.

State encoder: per-step affine+ReLU position encoding, then an LSTM per agent;
final hidden states are concatenated over agents. An optional task encoder
embeds the flattened ego plan. A two-layer MLP decoder feeds a linear head
that emits K joint trajectories plus K weight logits.

The head emits absolute positions in the normalized scene frame, in units
of ``pos_scale`` meters; positions entering the network are divided by the
same scale. With ``cv_anchor`` set, the head output is instead added to a
constant-velocity rollout of each agent's observed past.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import diffeng as ad
from .core import Scene, ShapeMismatch, TipError, last_valid_index

ModelParams = dict  # name -> float64 ndarray


class ConfigMismatch(TipError, ValueError):
    pass


class NoTaskEncoder(TipError):
    pass


class CheckpointError(TipError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_agents: int = 2
    t_past: int = 11
    t_future: int = 80
    k_samples: int = 4
    hidden: int = 32
    dropout_rate: float = 0.1
    has_task_encoder: bool = False
    pos_scale: float = 10.0
    dt: float = 0.1
    cv_anchor: bool = False

    def __post_init__(self):
        for name in ("n_agents", "t_past", "t_future", "k_samples", "hidden"):
            if int(getattr(self, name)) < 1:
                raise ConfigMismatch(f"{name} must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigMismatch("dropout_rate must be in [0, 1)")
        if self.pos_scale <= 0:
            raise ConfigMismatch("pos_scale must be positive")

    @property
    def head_size(self):
        return self.k_samples * (self.n_agents * self.t_future * 2) + self.k_samples

    @property
    def decoder_in(self):
        return self.hidden * self.n_agents + (self.hidden if self.has_task_encoder else 0)


@dataclass(frozen=True)
class PredictionSampleSet:
    """K joint samples (K, N, T_f, 2) with probability weights (K,)."""

    samples: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        if s.ndim != 4 or s.shape[-1] != 2 or w.shape != s.shape[:1]:
            raise ShapeMismatch(f"samples {s.shape} / weights {w.shape}")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "weights", w)

    @property
    def k(self):
        return len(self.weights)


def param_shapes(cfg: ModelConfig) -> dict:
    h = cfg.hidden
    shapes = {
        "state_w": (2, h),
        "state_b": (h,),
        "lstm_wx": (h, 4 * h),
        "lstm_wh": (h, 4 * h),
        "lstm_b": (4 * h,),
    }
    if cfg.has_task_encoder:
        shapes["task_w"] = (2 * cfg.t_future, h)
        shapes["task_b"] = (h,)
    shapes.update({
        "dec_w1": (cfg.decoder_in, h),
        "dec_b1": (h,),
        "dec_w2": (h, h),
        "dec_b2": (h,),
        "head_w": (h, cfg.head_size),
        "head_b": (cfg.head_size,),
    })
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    # gate order: input, forget, cell, output
    params["lstm_b"][cfg.hidden:2 * cfg.hidden] = 1.0
    return params


def n_params(params: ModelParams) -> int:
    return int(sum(p.size for p in params.values()))


# ---------------------------------------------------------------------------
# input preparation


@dataclass
class Batch:
    """Stacked normalized inputs for B scenes."""

    past: np.ndarray        # (B, N, T_p, 2)
    past_valid: np.ndarray  # (B, N, T_p)
    anchor: np.ndarray      # (B, N, T_f, 2) constant-velocity rollout
    future: np.ndarray      # (B, N, T_f, 2)
    future_valid: np.ndarray

    @property
    def size(self):
        return self.past.shape[0]


def constant_velocity_anchor(past, valid, t_future, dt):
    """Roll each agent forward at its mean observed velocity."""
    past = np.asarray(past, dtype=np.float64)
    valid = np.asarray(valid, bool)
    t_p = past.shape[-2]
    last = last_valid_index(valid)
    first = np.where(valid.any(-1), np.argmax(valid, axis=-1), -1)
    safe_last = np.maximum(last, 0)
    safe_first = np.maximum(first, 0)
    p_last = np.take_along_axis(past, safe_last[..., None, None], axis=-2)[..., 0, :]
    p_first = np.take_along_axis(past, safe_first[..., None, None], axis=-2)[..., 0, :]
    span = (last - first) * dt
    vel = np.where((span > 0)[..., None], (p_last - p_first) / np.where(span > 0, span, 1.0)[..., None], 0.0)
    # steps from the last valid observation to each future step
    lead = (t_p - 1 - safe_last)[..., None] + np.arange(1, t_future + 1)
    anchor = p_last[..., None, :] + vel[..., None, :] * (lead[..., None] * dt)
    return np.where((last >= 0)[..., None, None], anchor, 0.0)


def make_batch(scenes, cfg: ModelConfig) -> Batch:
    b = len(scenes)
    n, tp, tf = cfg.n_agents, cfg.t_past, cfg.t_future
    past = np.zeros((b, n, tp, 2))
    pv = np.zeros((b, n, tp), bool)
    fut = np.zeros((b, n, tf, 2))
    fv = np.zeros((b, n, tf), bool)
    for i, sc in enumerate(scenes):
        if sc.n_agents > n:
            raise ConfigMismatch(f"scene {sc.id!r} has {sc.n_agents} agents, model takes {n}")
        if sc.t_past != tp or sc.t_future != tf:
            raise ConfigMismatch(
                f"scene {sc.id!r} horizons {sc.t_past}/{sc.t_future}, model expects {tp}/{tf}")
        m = sc.n_agents
        past[i, :m] = np.where(sc.past_valid[..., None], sc.past_xy, 0.0)
        pv[i, :m] = sc.past_valid
        fut[i, :m] = np.where(sc.future_valid[..., None], sc.future_xy, 0.0)
        fv[i, :m] = sc.future_valid
    anchor = constant_velocity_anchor(past, pv, tf, cfg.dt)
    return Batch(past, pv, anchor, fut, fv)


# ---------------------------------------------------------------------------
# network pieces (operate on tape tensors or plain constants)


def _const_params(params):
    return {k: ad.Tensor(np.asarray(v, dtype=np.float64)) for k, v in params.items()}


def encode_states(P, past, past_valid, cfg: ModelConfig, train=False, rng=None):
    """Joint state encoding h_S of shape (B, N * hidden)."""
    past = np.asarray(past)
    if past.shape[1] > cfg.n_agents:
        raise ConfigMismatch(f"{past.shape[1]} agents exceed configured {cfg.n_agents}")
    if past.shape[2] != cfg.t_past:
        raise ConfigMismatch(f"past length {past.shape[2]} != {cfg.t_past}")
    b, n, tp, _ = past.shape
    h = cfg.hidden
    mask = np.asarray(past_valid, dtype=np.float64)[..., None]
    x = ad.Tensor(past * mask / cfg.pos_scale)
    enc = ad.relu(x @ P["state_w"] + P["state_b"])
    enc = ad.dropout(enc, cfg.dropout_rate, rng, train)
    enc = enc * mask
    xs = enc @ P["lstm_wx"] + P["lstm_b"]        # (B, N, T_p, 4H)
    hid = cell = None
    for t in range(tp):
        gates = xs[:, :, t]
        if hid is not None:
            gates = gates + hid @ P["lstm_wh"]
        i = ad.sigmoid(gates[..., :h])
        f = ad.sigmoid(gates[..., h:2 * h])
        g = ad.tanh(gates[..., 2 * h:3 * h])
        o = ad.sigmoid(gates[..., 3 * h:])
        cell = i * g if cell is None else f * cell + i * g
        hid = o * ad.tanh(cell)
    return hid.reshape(b, n * h)


def encode_task_info(P, plan, cfg: ModelConfig, train=False, rng=None):
    if not cfg.has_task_encoder:
        raise NoTaskEncoder("model was configured without a task encoder")
    plan = np.asarray(plan, dtype=np.float64)
    if plan.shape[-2] != cfg.t_future:
        raise ConfigMismatch(f"plan length {plan.shape[-2]} != {cfg.t_future}")
    flat = ad.Tensor(plan.reshape(plan.shape[0], -1) / cfg.pos_scale)
    hv = ad.relu(flat @ P["task_w"] + P["task_b"])
    return ad.dropout(hv, cfg.dropout_rate, rng, train)


def decode(P, h, cfg: ModelConfig, anchor=None):
    """Returns (trajectories (B, K, N, T_f, 2), weights (B, K)) tensors."""
    if h.shape[-1] != cfg.decoder_in:
        raise ShapeMismatch(f"hidden width {h.shape[-1]} != {cfg.decoder_in}")
    b = h.shape[0]
    k, n, tf = cfg.k_samples, cfg.n_agents, cfg.t_future
    d = ad.relu(h @ P["dec_w1"] + P["dec_b1"])
    d = ad.relu(d @ P["dec_w2"] + P["dec_b2"])
    out = d @ P["head_w"] + P["head_b"]
    traj = out[:, : k * n * tf * 2].reshape(b, k, n, tf, 2) * cfg.pos_scale
    if cfg.cv_anchor:
        traj = traj + np.asarray(anchor)[:, None]
    weights = ad.softmax(out[:, k * n * tf * 2:], axis=-1)
    return traj, weights


def forward_batch(P, batch: Batch, cfg: ModelConfig, plans=None, train=False, rng=None):
    """Tensor forward pass. ``plans`` is (B, T_f, 2) or None."""
    h = encode_states(P, batch.past, batch.past_valid, cfg, train, rng)
    if cfg.has_task_encoder:
        if plans is None:
            raise ConfigMismatch("model has a task encoder; a plan is required")
        h = ad.concat([h, encode_task_info(P, plans, cfg, train, rng)], axis=-1)
    return decode(P, h, cfg, batch.anchor)


def forward(scene: Scene, plan, params: ModelParams, cfg: ModelConfig,
            train_flag=False, rng=None) -> PredictionSampleSet:
    """Predict for one normalized scene. ``plan`` is ignored without a task encoder."""
    batch = make_batch([scene], cfg)
    plans = None
    if cfg.has_task_encoder:
        pts = plan.points if hasattr(plan, "points") else plan
        plans = np.asarray(pts, dtype=np.float64)[None]
    traj, w = forward_batch(_const_params(params), batch, cfg, plans, train_flag, rng)
    m = scene.n_agents
    return PredictionSampleSet(traj.data[0][:, :m], w.data[0])


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"TIPCKPT\n"
CHECKPOINT_VERSION = 1


def _config_dict(cfg):
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams, meta=None):
    """Binary container plus a ``.manifest`` text sidecar.

    Layout: magic, u32 version, u32 header length, JSON header, then every
    tensor as little-endian float64 in header order.
    """
    names = list(params)
    blobs = [np.ascontiguousarray(params[k], dtype="<f8").tobytes() for k in names]
    data = b"".join(blobs)
    digest = hashlib.sha256(data).hexdigest()
    table, off = [], 0
    for name, blob in zip(names, blobs):
        table.append({"name": name, "shape": list(params[name].shape), "offset": off})
        off += len(blob)
    header = json.dumps(
        {"config": _config_dict(cfg), "tensors": table, "sha256": digest, "meta": meta or {}},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(data)
    lines = [f"format tip-checkpoint {CHECKPOINT_VERSION}"]
    lines += [f"config {k}={v}" for k, v in _config_dict(cfg).items()]
    lines += [f"tensor {t['name']} {'x'.join(map(str, t['shape'])) or 'scalar'}" for t in table]
    lines.append(f"sha256 {digest}")
    with open(str(path) + ".manifest", "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return digest


def load_checkpoint(path):
    """Returns (ModelConfig, params, meta)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint")
    try:
        version, hlen = struct.unpack_from("<II", raw, len(_MAGIC))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    start = len(_MAGIC) + 8
    header = json.loads(raw[start:start + hlen])
    data = raw[start + hlen:]
    if hashlib.sha256(data).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: checksum mismatch")
    cfg = ModelConfig(**header["config"])
    params = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=t["offset"])
        params[t["name"]] = arr.reshape(t["shape"]).astype(np.float64)
    expected = param_shapes(cfg)
    if {k: tuple(v.shape) for k, v in params.items()} != expected:
        raise CheckpointError(f"{path}: tensor table does not match config")
    return cfg, params, header.get("meta", {})
