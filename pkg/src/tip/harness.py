"""Training loop, evaluation and experiment drivers."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, fields, replace

import numpy as np

from . import diffeng as ad
from .core import Scene, TipError, normalize_scene
from .losses import batch_accuracy_loss
from .metrics import MetricsAccumulator, displacement_metrics
from .model import (
    Batch,
    ConfigMismatch,
    ModelConfig,
    PredictionSampleSet,
    constant_velocity_anchor,
    decode,
    encode_states,
    encode_task_info,
    forward_batch,
    init_params,
    load_checkpoint,
    save_checkpoint,
)


class NonFiniteLoss(TipError):
    pass


class SplitOverlap(TipError):
    pass


TASK_CHOICES = ("warning", "planning", "planning_altruistic")


@dataclass(frozen=True)
class TrainConfig:
    task: str = "warning"
    alpha: float = 20.0
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    k_samples: int = 4
    n_agents: int = 2
    utility_noise_sigma: float = 0.0
    beta: float = 5.0
    d_safe: float = 3.64
    d_warn: float = 3.64
    hidden: int = 32
    dropout_rate: float = 0.1
    reaction: str = "heuristic"
    cv_anchor: bool = False
    alpha_warmup_epochs: int = 0
    split_seed: int = 2022
    train_fraction: float = 0.8
    eval_batch_size: int = 256

    def __post_init__(self):
        from .tasks import TaskKind

        kind = TaskKind.parse(self.task)
        object.__setattr__(self, "task", {
            TaskKind.WARNING: "warning",
            TaskKind.PLANNING_SELFISH: "planning",
            TaskKind.PLANNING_ALTRUISTIC: "planning_altruistic",
        }[kind])
        for name in ("epochs", "batch_size", "k_samples", "n_agents", "hidden", "eval_batch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigMismatch(f"{name} must be a positive count")
        if not self.lr > 0:
            raise ConfigMismatch("lr must be > 0")
        if self.alpha < 0 or self.utility_noise_sigma < 0:
            raise ConfigMismatch("alpha and utility_noise_sigma must be >= 0")
        if self.alpha_warmup_epochs < 0:
            raise ConfigMismatch("alpha_warmup_epochs must be >= 0")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigMismatch("train_fraction must be in (0, 1)")

    @property
    def is_planning(self):
        return self.task != "warning"

    def model_config(self, t_past, t_future, dt):
        return ModelConfig(
            n_agents=self.n_agents, t_past=t_past, t_future=t_future, k_samples=self.k_samples,
            hidden=self.hidden, dropout_rate=self.dropout_rate,
            has_task_encoder=self.is_planning, dt=dt, cv_anchor=self.cv_anchor,
        )

    def alpha_at(self, epoch):
        """Task weight for a 1-based epoch: a linear ramp from 0 over the warm-up."""
        w = self.alpha_warmup_epochs
        if w <= 0:
            return self.alpha
        return self.alpha * min(1.0, (epoch - 1) / w)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _rngs(seed):
    """Independent streams for init, shuffling, dropout and utility noise."""
    return [np.random.default_rng(np.random.SeedSequence([int(seed), i])) for i in range(4)]


# ---------------------------------------------------------------------------
# data preparation


def split_scenes(scenes, split_seed=2022, train_fraction=0.8):
    """Disjoint train/validation split by scene id."""
    scenes = sorted(scenes, key=lambda s: s.id)
    ids = [s.id for s in scenes]
    if len(set(ids)) != len(ids):
        raise SplitOverlap("scene ids are not unique")
    order = np.random.default_rng(split_seed).permutation(len(scenes))
    n_train = int(round(train_fraction * len(scenes)))
    train = [scenes[i] for i in np.sort(order[:n_train])]
    val = [scenes[i] for i in np.sort(order[n_train:])]
    assert_disjoint(train, val)
    return train, val


def assert_disjoint(a, b):
    overlap = {s.id for s in a} & {s.id for s in b}
    if overlap:
        raise SplitOverlap(f"{len(overlap)} scene ids appear in both splits")


def canonical_scene(scene: Scene) -> Scene:
    """Normalized copy with the ego at index 0 and objects following in order."""
    sc, _ = normalize_scene(scene)
    rest = [i for i in range(sc.n_agents) if i != sc.ego_index and i not in sc.object_indices]
    order = [sc.ego_index, *sc.object_indices, *rest]
    return Scene(
        sc.past_xy[order], sc.past_valid[order], sc.future_xy[order], sc.future_valid[order],
        ego_index=0, object_indices=tuple(range(1, 1 + len(sc.object_indices))),
        relation=sc.relation, id=sc.id, dt=sc.dt,
    )


@dataclass
class Prepared:
    """Canonical arrays for a scene list. Task fields are None when not requested."""

    ids: list
    batch: Batch
    object_indices: tuple
    dt: float = 0.1
    warn_label: np.ndarray = None      # (S,) True where a warning is due
    plans: np.ndarray = None           # (S, 3, T_f, 2)
    plan_eff: np.ndarray = None        # (S, 3) ego path length per plan
    object_eff: np.ndarray = None      # (S, 3) expected object path length per plan
    opt_selfish: np.ndarray = None     # (S,)
    opt_altruistic: np.ndarray = None  # (S,)

    def __len__(self):
        return len(self.ids)

    def take(self, idx):
        b = self.batch
        return Batch(b.past[idx], b.past_valid[idx], b.anchor[idx], b.future[idx], b.future_valid[idx])


def _stack(scenes, n_agents, dt):
    b = len(scenes)
    tp, tf = scenes[0].t_past, scenes[0].t_future
    past = np.zeros((b, n_agents, tp, 2))
    pv = np.zeros((b, n_agents, tp), bool)
    fut = np.zeros((b, n_agents, tf, 2))
    fv = np.zeros((b, n_agents, tf), bool)
    for i, sc in enumerate(scenes):
        if sc.n_agents > n_agents:
            raise ConfigMismatch(f"scene {sc.id!r} has {sc.n_agents} agents, model takes {n_agents}")
        if sc.t_past != tp or sc.t_future != tf:
            raise ConfigMismatch(f"scene {sc.id!r} horizons differ from the first scene")
        m = sc.n_agents
        past[i, :m] = np.where(sc.past_valid[..., None], sc.past_xy, 0.0)
        pv[i, :m] = sc.past_valid
        fut[i, :m] = np.where(sc.future_valid[..., None], sc.future_xy, 0.0)
        fv[i, :m] = sc.future_valid
    return Batch(past, pv, constant_velocity_anchor(past, pv, tf, dt), fut, fv)


def prepare(scenes, cfg: TrainConfig, with_tasks=True) -> Prepared:
    """Normalize and stack scenes; optionally precompute ground-truth decisions.

    ``with_tasks=False`` touches only core and model code, which is what the
    accuracy-only path needs.
    """
    if not scenes:
        raise ConfigMismatch("dataset is empty")
    canon = [canonical_scene(s) for s in scenes]
    objs = canon[0].object_indices
    if any(s.object_indices != objs for s in canon):
        raise ConfigMismatch("scenes disagree on the number of objects")
    data = Prepared([s.id for s in canon], _stack(canon, cfg.n_agents, canon[0].dt), objs, canon[0].dt)
    if with_tasks:
        _add_task_labels(data, canon, cfg)
    return data


def _add_task_labels(data: Prepared, canon, cfg: TrainConfig):
    from .simgen import build_plan_candidates
    from .tasks import TaskKind, TaskSpec, ground_truth_decision, planning_utilities_gt, argmax_lowest, WARN
    from .core import path_length

    warn_spec = TaskSpec(TaskKind.WARNING, cfg.d_safe, cfg.d_warn, cfg.beta)
    data.warn_label = np.array([ground_truth_decision(s, warn_spec).index == WARN for s in canon])
    p_spec = TaskSpec(TaskKind.PLANNING_SELFISH, cfg.d_safe, cfg.d_warn, cfg.beta)
    pa_spec = TaskSpec(TaskKind.PLANNING_ALTRUISTIC, cfg.d_safe, cfg.d_warn, cfg.beta)
    plans, eff, oeff, opt_p, opt_pa = [], [], [], [], []
    for i, sc in enumerate(canon):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.split_seed, i]))
        cands = build_plan_candidates(sc, reaction=cfg.reaction, rng=rng)
        plans.append(np.stack([p.points for p in cands.plans]))
        eff.append([path_length(p) for p in cands.plans])
        oeff.append([sum(pr * path_length(t) for pr, t in outs)
                     for outs in cands.simulated_object_futures])
        opt_p.append(argmax_lowest(planning_utilities_gt(sc, p_spec, cands)))
        opt_pa.append(argmax_lowest(planning_utilities_gt(sc, pa_spec, cands)))
    data.plans = np.stack(plans)
    data.plan_eff = np.array(eff)
    data.object_eff = np.array(oeff)
    data.opt_selfish = np.array(opt_p)
    data.opt_altruistic = np.array(opt_pa)


NORMAL_PLAN = 1  # Conservative, Normal, Aggressive


def ego_future_plans(batch: Batch):
    """The Normal plan is the observed ego future itself."""
    return batch.future[:, 0]


# ---------------------------------------------------------------------------
# forward passes


def forward_planning(P, batch: Batch, plans, mcfg: ModelConfig, train=False, rng=None):
    """One conditional pass per plan sharing a single state encoding.

    plans (B, M, T_f, 2) -> trajectories (B, M, K, N, T_f, 2), weights (B, M, K).
    """
    b, m = plans.shape[:2]
    h_s = encode_states(P, batch.past, batch.past_valid, mcfg, train, rng)
    rep = np.repeat(np.arange(b), m)
    h_s = h_s[rep]
    h_v = encode_task_info(P, plans.reshape(b * m, *plans.shape[2:]), mcfg, train, rng)
    traj, w = decode(P, ad.concat([h_s, h_v], axis=-1), mcfg, batch.anchor[rep])
    return traj.reshape((b, m) + traj.shape[1:]), w.reshape(b, m, w.shape[-1])


def _task_utilities(traj, w, data: Prepared, idx, plans, cfg: TrainConfig):
    from .tasks import safety_utility_t, warning_utilities_t

    if cfg.is_planning:
        obj = data.object_indices[0]
        safety = safety_utility_t(plans, traj[:, :, :, obj], w, cfg.d_safe)
        eff = data.plan_eff[idx] if cfg.task == "planning" else data.object_eff[idx]
        return ad.add(ad.mul(safety, cfg.beta), eff)
    return warning_utilities_t(traj, w, 0, data.object_indices, cfg.d_warn, soft=True)


def _optimal(data: Prepared, idx, cfg: TrainConfig):
    from .tasks import WARN, NOT_WARN

    if cfg.task == "planning":
        return data.opt_selfish[idx]
    if cfg.task == "planning_altruistic":
        return data.opt_altruistic[idx]
    return np.where(data.warn_label[idx], WARN, NOT_WARN)


def batch_loss(P, data: Prepared, idx, mcfg: ModelConfig, cfg: TrainConfig,
               train=True, drop_rng=None, noise_rng=None):
    """(total, mean L_acc tensor, mean L_task value or None) for scenes ``idx``."""
    batch = data.take(idx)
    use_task = cfg.alpha > 0
    if use_task and cfg.is_planning:
        plans = data.plans[idx]
        traj, w = forward_planning(P, batch, plans, mcfg, train, drop_rng)
        acc = batch_accuracy_loss(traj[:, NORMAL_PLAN], w[:, NORMAL_PLAN],
                                  batch.future, batch.future_valid)
    else:
        plans = ego_future_plans(batch) if cfg.is_planning else None
        traj, w = forward_batch(P, batch, mcfg, plans, train, drop_rng)
        acc = batch_accuracy_loss(traj, w, batch.future, batch.future_valid)
    acc = ad.mean(acc)
    if not use_task:
        return acc, acc, None
    from .losses import batch_task_reward

    u = _task_utilities(traj, w, data, idx, plans if cfg.is_planning else None, cfg)
    if cfg.utility_noise_sigma > 0:
        eps = noise_rng.standard_normal(u.shape)
        u = ad.add(u, cfg.utility_noise_sigma * np.abs(u.data) * eps)
    l_task = ad.mean(ad.mul(batch_task_reward(u, _optimal(data, idx, cfg)), -1.0))
    total = ad.add(acc, ad.mul(l_task, cfg.alpha))
    return total, acc, float(l_task.data)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model_config: ModelConfig
    params: dict
    log: list       # one dict per epoch
    timing: list    # wall seconds per epoch (kept apart so logs stay reproducible)

    def log_text(self):
        return "".join(format_record(r) + "\n" for r in self.log)


def format_record(rec):
    return " ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items())


def train(cfg: TrainConfig, scenes=None, data: Prepared = None, out_dir=None, adam_kw=None) -> TrainResult:
    """Train one predictor. Pass raw ``scenes`` or an already ``prepare``d set."""
    from .diffeng import AdamState, adam_step

    if data is None:
        if not scenes:
            raise ConfigMismatch("dataset is empty")
        data = prepare(scenes, cfg, with_tasks=cfg.alpha > 0)
    if cfg.alpha > 0 and cfg.is_planning and data.plans is None:
        raise ConfigMismatch("planning training needs plan candidates")
    if cfg.alpha > 0 and not cfg.is_planning and data.warn_label is None:
        raise ConfigMismatch("warning training needs warn labels")
    b = data.batch
    mcfg = cfg.model_config(b.past.shape[2], b.future.shape[2], data.dt)
    init_rng, shuffle_rng, drop_rng, noise_rng = _rngs(cfg.seed)
    params = init_params(mcfg, init_rng)
    state = AdamState()
    log, timing = [], []
    n = len(data)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        ecfg = replace(cfg, alpha=cfg.alpha_at(epoch))
        order = shuffle_rng.permutation(n)
        acc_sum = task_sum = loss_sum = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            tape = ad.Tape()
            P = tape.params(params)
            total, acc, l_task = batch_loss(P, data, idx, mcfg, ecfg, True, drop_rng, noise_rng)
            value = float(total.data)
            if not np.isfinite(value):
                if out_dir:
                    save_checkpoint(os.path.join(out_dir, "last_good.ckpt"), mcfg, params,
                                    {"epoch": epoch, "reason": "non-finite loss"})
                raise NonFiniteLoss(f"epoch {epoch}: loss is {value}")
            grads = ad.backward(tape, total)
            params, state = adam_step(params, grads, state, lr=cfg.lr, **(adam_kw or {}))
            loss_sum += value
            acc_sum += float(acc.data)
            task_sum += 0.0 if l_task is None else l_task
            n_batches += 1
        rec = {"epoch": epoch, "loss": loss_sum / n_batches, "l_acc": acc_sum / n_batches,
               "l_task": task_sum / n_batches}
        log.append(rec)
        timing.append(time.perf_counter() - t0)
    result = TrainResult(mcfg, params, log, timing)
    if out_dir:
        write_training_outputs(result, cfg, out_dir)
    return result


def write_training_outputs(result: TrainResult, cfg: TrainConfig, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(os.path.join(out_dir, "model.ckpt"), result.model_config, result.params,
                    {"train_config": cfg.to_dict(), "epochs": cfg.epochs})
    with open(os.path.join(out_dir, "train_log.txt"), "w") as fh:
        fh.write(result.log_text())
    with open(os.path.join(out_dir, "timing.txt"), "w") as fh:
        for i, t in enumerate(result.timing, start=1):
            fh.write(f"epoch={i} wall_s={t:.3f}\n")


# ---------------------------------------------------------------------------
# evaluation


class Predictor:
    """Deterministic predictor over canonical batches."""

    def __init__(self, mcfg: ModelConfig, params):
        self.cfg = mcfg
        self.params = params

    @classmethod
    def from_checkpoint(cls, path):
        mcfg, params, _ = load_checkpoint(path)
        return cls(mcfg, params)

    def predict(self, batch: Batch, plans=None):
        """(samples (B, K, N, T, 2), weights (B, K)); plans (B, M, T, 2) adds an M axis."""
        P = {k: ad.Tensor(v) for k, v in self.params.items()}
        if plans is not None and plans.ndim == 4:
            traj, w = forward_planning(P, batch, plans, self.cfg)
        else:
            traj, w = forward_batch(P, batch, self.cfg, plans)
        return traj.data, w.data


class OraclePredictor:
    """Emits the ground-truth future as a single sample with weight 1."""

    cfg = None

    def predict(self, batch: Batch, plans=None):
        s = batch.future[:, None]
        w = np.ones((len(s), 1))
        if plans is not None and plans.ndim == 4:
            m = plans.shape[1]
            return np.repeat(s[:, None], m, axis=1), np.ones((len(s), m, 1))
        return s, w


def evaluate(predictor, data: Prepared, cfg: TrainConfig) -> "MetricsReport":
    """Accuracy metrics over all scenes plus the task AUC for ``cfg.task``.

    Planning uses one-vs-one AUC over the softmax of predicted plan
    utilities; warning uses binary AUC of the hard collision probability.
    """
    from .tasks import closest_distances

    if isinstance(predictor, (str, os.PathLike)):
        predictor = Predictor.from_checkpoint(predictor)
    acc = MetricsAccumulator()
    obj = data.object_indices[0]
    for start in range(0, len(data), cfg.eval_batch_size):
        idx = np.arange(start, min(start + cfg.eval_batch_size, len(data)))
        batch = data.take(idx)
        if cfg.is_planning:
            plans = data.plans[idx]
            traj, w = predictor.predict(batch, plans)
            normal_traj, normal_w = traj[:, NORMAL_PLAN], w[:, NORMAL_PLAN]
        else:
            normal_traj, normal_w = predictor.predict(batch)
        for j, i in enumerate(idx):
            preds = PredictionSampleSet(normal_traj[j], normal_w[j])
            disp = displacement_metrics(preds, batch.future[j], batch.future_valid[j])
            if cfg.is_planning:
                safety = np.array([
                    min(cfg.d_safe, float(w[j, m] @ closest_distances(plans[j, m], traj[j, m][:, obj])))
                    for m in range(plans.shape[1])])
                eff = data.plan_eff[i] if cfg.task == "planning" else data.object_eff[i]
                u = eff + cfg.beta * safety
                score = np.exp(u - u.max())
                score = score / score.sum()
                label = int(_optimal(data, np.array([i]), cfg)[0])
            else:
                score = _hard_warn_probability(preds, data.object_indices, cfg.d_warn)
                label = bool(data.warn_label[i])
            acc.add(disp, score, label)
    return acc.report(multiclass=cfg.is_planning, extra={"task": cfg.task})


def _hard_warn_probability(preds, object_indices, d_warn):
    from .tasks import TaskSpec, warning_utilities

    u_warn, _ = warning_utilities(preds, TaskSpec(d_warn=d_warn), soft=False,
                                  ego_index=0, object_indices=object_indices)
    return u_warn


# ---------------------------------------------------------------------------
# experiments


def train_and_evaluate(cfg: TrainConfig, train_data: Prepared, val_data: Prepared):
    res = train(cfg, data=train_data)
    return res, evaluate(Predictor(res.model_config, res.params), val_data, cfg)


def _split_prepared(scenes, cfg):
    tr, va = split_scenes(scenes, cfg.split_seed, cfg.train_fraction)
    return prepare(tr, cfg), prepare(va, cfg)


def _row(report, **lead):
    row = dict(lead)
    row.update(min_ade=report.min_ade, min_fde=report.min_fde, w_ade=report.w_ade,
               w_fde=report.w_fde, auc=report.auc_roc)
    return row


def experiment_alpha_sweep(base_cfg: TrainConfig, alphas, scenes, split=None):
    """One model per alpha on a shared split and seed."""
    tr, va = split or _split_prepared(scenes, base_cfg)
    rows = []
    for a in alphas:
        cfg = replace(base_cfg, alpha=float(a))
        _, rep = train_and_evaluate(cfg, tr, va)
        rows.append(_row(rep, alpha=float(a)))
    return rows


def experiment_k_sweep(base_cfg: TrainConfig, ks, scenes, tip_alpha=None, split=None):
    """TIP and TAP rows for every K."""
    tr, va = split or _split_prepared(scenes, base_cfg)
    tip_alpha = base_cfg.alpha if tip_alpha is None else tip_alpha
    rows = []
    for k in ks:
        for model, a in (("TAP", 0.0), ("TIP", tip_alpha)):
            cfg = replace(base_cfg, k_samples=int(k), alpha=float(a))
            _, rep = train_and_evaluate(cfg, tr, va)
            rows.append(_row(rep, k=int(k), model=model))
    return rows


def experiment_noise(base_cfg: TrainConfig, sigmas, scenes, split=None):
    tr, va = split or _split_prepared(scenes, base_cfg)
    rows = []
    for s in sigmas:
        cfg = replace(base_cfg, utility_noise_sigma=float(s))
        _, rep = train_and_evaluate(cfg, tr, va)
        rows.append(_row(rep, sigma=float(s)))
    return rows


def experiment_planning_table(base_cfg: TrainConfig, scenes, split=None):
    """TAP, TIP_P and TIP_Pa each evaluated on both planning tasks."""
    p_cfg = replace(base_cfg, task="planning")
    tr, va = split or _split_prepared(scenes, p_cfg)
    rows = []
    for model, task, alpha in (("TAP", "planning", 0.0), ("TIP_P", "planning", base_cfg.alpha),
                               ("TIP_Pa", "planning_altruistic", base_cfg.alpha)):
        cfg = replace(base_cfg, task=task, alpha=float(alpha))
        res = train(cfg, data=tr)
        pred = Predictor(res.model_config, res.params)
        rep_p = evaluate(pred, va, replace(cfg, task="planning"))
        rep_pa = evaluate(pred, va, replace(cfg, task="planning_altruistic"))
        row = _row(rep_p, model=model)
        row.pop("auc")
        row.update(auc_p=rep_p.auc_roc, auc_pa=rep_pa.auc_roc)
        rows.append(row)
    return rows


def experiment_planning_seeds(base_cfg: TrainConfig, scenes, seeds=(0, 1, 2)):
    """Planning table over several training seeds on one split.

    Returns (per_seed_rows, summary_rows); the summary holds the mean and the
    population standard deviation of every metric per model.
    """
    p_cfg = replace(base_cfg, task="planning")
    split = _split_prepared(scenes, p_cfg)
    per_seed = []
    for seed in seeds:
        for row in experiment_planning_table(replace(base_cfg, seed=int(seed)), scenes, split):
            per_seed.append({"seed": int(seed), **row})
    summary = []
    for model in ("TAP", "TIP_P", "TIP_Pa"):
        rows = [r for r in per_seed if r["model"] == model]
        out = {"model": model, "n_seeds": len(rows)}
        for key in rows[0]:
            if key in ("seed", "model"):
                continue
            vals = np.array([r[key] for r in rows], dtype=float)
            out[f"{key}_mean"] = float(vals.mean())
            out[f"{key}_std"] = float(vals.std())
        summary.append(out)
    return per_seed, summary


def table_csv(rows):
    if not rows:
        return ""
    keys = list(rows[0])
    lines = [",".join(keys)]
    for r in rows:
        lines.append(",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in keys))
    return "\n".join(lines) + "\n"
