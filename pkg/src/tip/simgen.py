"""Synthetic two-agent interaction scenes, ego plan candidates, reactive
object rollouts (rule-based and IDM) and the line-delimited dataset format.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from .core import DT, Relation, Scene, TipError, Trajectory
from .tasks import PLAN_FACTORS, PlanCandidateSet, PlanLabel

FORMAT_NAME = "tip-scenes"
FORMAT_VERSION = 1


class DegenerateGeometry(TipError):
    pass


class ParseError(TipError, ValueError):
    pass


class VersionMismatch(TipError, ValueError):
    pass


class Geometry(enum.Enum):
    CROSSING = "Crossing"
    MERGING = "Merging"
    ONCOMING = "Oncoming"

    @classmethod
    def parse(cls, text):
        if isinstance(text, cls):
            return text
        for g in cls:
            if g.value.lower() == str(text).strip().lower():
                return g
        raise ValueError(f"unknown geometry {text!r}")


# angle between the two travel directions at the conflict point
_CROSSING_ANGLE = {Geometry.CROSSING: 90.0, Geometry.MERGING: 30.0, Geometry.ONCOMING: 150.0}


@dataclass(frozen=True)
class GeneratorConfig:
    n_scenes: int = 1000
    speed_range: tuple = (3.0, 15.0)
    conflict_geometry: Geometry = Geometry.CROSSING
    arrival_gap_range: tuple = (-2.0, 2.0)
    noise_sigma: float = 0.05
    seed: int = 0
    t_past: int = 11
    t_future: int = 80
    dt: float = DT
    # future manoeuvre mixture: keep speed / brake / speed up after a random onset
    p_keep: float = 0.4
    p_brake: float = 0.3
    brake_range: tuple = (1.0, 3.0)
    speedup_range: tuple = (0.5, 2.0)
    onset_max: float = 1.0
    v_max: float = 30.0
    a_max: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "conflict_geometry", Geometry.parse(self.conflict_geometry))
        for name in ("speed_range", "arrival_gap_range", "brake_range", "speedup_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n_scenes < 0 or self.t_past < 1 or self.t_future < 2:
            raise ValueError("bad counts")
        if not 0 <= self.p_keep + self.p_brake <= 1:
            raise ValueError("manoeuvre probabilities exceed 1")

    def to_dict(self):
        d = asdict(self)
        d["conflict_geometry"] = self.conflict_geometry.value
        d["speed_range"] = list(self.speed_range)
        d["arrival_gap_range"] = list(self.arrival_gap_range)
        d["brake_range"] = list(self.brake_range)
        d["speedup_range"] = list(self.speedup_range)
        return d

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class Limits:
    v_max: float = 30.0
    a_max: float = 3.0
    dt: float = DT


# ---------------------------------------------------------------------------
# scene generation


def scene_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _speed_profile(rng, v, cfg: GeneratorConfig):
    """Per-step speeds for the future horizon after a random manoeuvre choice."""
    u = rng.random()
    if u < cfg.p_keep:
        acc = 0.0
    elif u < cfg.p_keep + cfg.p_brake:
        acc = -rng.uniform(*cfg.brake_range)
    else:
        acc = rng.uniform(*cfg.speedup_range)
    onset = rng.uniform(0.0, cfg.onset_max)
    acc = float(np.clip(acc, -cfg.a_max, cfg.a_max))
    speeds = np.empty(cfg.t_future)
    cur = v
    for k in range(cfg.t_future):
        t = (k + 1) * cfg.dt
        if t > onset:
            cur = min(max(cur + acc * cfg.dt, 0.0), cfg.v_max)
        speeds[k] = cur
    return speeds


def _agent_track(rng, c, direction, v, t_arrive, cfg: GeneratorConfig):
    """Past and future positions along a straight path through conflict point ``c``."""
    dt = cfg.dt
    s_now = -v * t_arrive
    k = np.arange(cfg.t_past)
    s_past = s_now - v * dt * (cfg.t_past - 1 - k)
    s_fut = s_now + np.cumsum(_speed_profile(rng, v, cfg)) * dt
    past = c + s_past[:, None] * direction
    fut = c + s_fut[:, None] * direction
    return past, fut


def generate_scene(rng: np.random.Generator, cfg: GeneratorConfig, scene_id="") -> Scene:
    """Two agents on straight paths crossing at one conflict point.

    Relation is labelled by the nominal (constant-speed) arrival order at the
    conflict point: the later arrival yields.
    """
    dt = cfg.dt
    horizon = cfg.t_future * dt
    for _ in range(100):
        v_ego = rng.uniform(*cfg.speed_range)
        v_obj = rng.uniform(*cfg.speed_range)
        t_ego = rng.uniform(0.15 * horizon, 0.85 * horizon)
        gap = rng.uniform(*cfg.arrival_gap_range)
        t_obj = t_ego + gap
        if 0.0 < t_obj <= horizon and v_ego > 0 and v_obj > 0:
            break
    else:
        raise DegenerateGeometry("could not place both arrivals inside the horizon")
    heading = rng.uniform(0.0, 2.0 * math.pi)
    side = 1.0 if rng.random() < 0.5 else -1.0
    delta = math.radians(_CROSSING_ANGLE[cfg.conflict_geometry]) * side
    d_ego = np.array([math.cos(heading), math.sin(heading)])
    d_obj = np.array([math.cos(heading + delta), math.sin(heading + delta)])
    c = rng.uniform(-1000.0, 1000.0, size=2)
    past_e, fut_e = _agent_track(rng, c, d_ego, v_ego, t_ego, cfg)
    past_o, fut_o = _agent_track(rng, c, d_obj, v_obj, t_obj, cfg)
    if cfg.noise_sigma > 0:
        past_e = past_e + rng.normal(0.0, cfg.noise_sigma, past_e.shape)
        past_o = past_o + rng.normal(0.0, cfg.noise_sigma, past_o.shape)
    ego_index = int(rng.integers(2))
    obj_index = 1 - ego_index
    past = np.empty((2, cfg.t_past, 2))
    fut = np.empty((2, cfg.t_future, 2))
    past[ego_index], past[obj_index] = past_e, past_o
    fut[ego_index], fut[obj_index] = fut_e, fut_o
    relation = Relation.OBJECT_YIELDS_EGO if gap >= 0 else Relation.EGO_YIELDS_OBJECT
    return Scene(
        past, np.ones((2, cfg.t_past), bool), fut, np.ones((2, cfg.t_future), bool),
        ego_index=ego_index, object_indices=(obj_index,), relation=relation,
        id=scene_id, dt=dt,
    )


def generate_dataset(cfg: GeneratorConfig):
    return [generate_scene(scene_rng(cfg.seed, i), cfg, f"s{cfg.seed}-{i:06d}")
            for i in range(cfg.n_scenes)]


def conflict_point_of(scene: Scene):
    """Intersection of the ego and first object future paths (extended lines)."""
    e = scene.future_xy[scene.ego_index]
    o = scene.future_xy[scene.object_indices[0]]
    return _line_intersection(e[0], e[-1] - e[0], o[0], o[-1] - o[0])


def _line_intersection(p, r, q, s):
    cross = r[0] * s[1] - r[1] * s[0]
    if abs(cross) < 1e-12:
        return None
    qp = q - p
    t = (qp[0] * s[1] - qp[1] * s[0]) / cross
    return p + t * r


# ---------------------------------------------------------------------------
# path re-timing


def _path_of(future: Trajectory):
    """Polyline through a virtual t=0 point and the future points.

    The t=0 point is the first future point stepped back by the first future
    displacement. Returns (vertices, cumulative arc length).
    """
    pts = future.points
    if not future.valid.all():
        raise ValueError("path re-timing needs a fully valid future")
    first = pts[1] - pts[0] if len(pts) >= 2 else np.zeros(2)
    verts = np.vstack([pts[0] - first, pts])
    seg = np.hypot(*np.diff(verts, axis=0).T)
    cum = np.r_[0.0, np.cumsum(seg)]
    return verts, cum


def rescale_trajectory(future: Trajectory, factor, limits: Limits) -> Trajectory:
    """Re-time ``future`` along its own path with progress scaled by ``factor``.

    Speed is clipped to [0, v_max] and step-to-step speed change to a_max*dt;
    the first step may take the scaled speed directly.
    """
    verts, cum = _path_of(future)
    progress = _kernels.rescale_progress(
        np.ascontiguousarray(cum[1:]), float(factor), 0.0, limits.v_max, limits.a_max, limits.dt)
    pts = _kernels.interp_path(verts, cum, progress)
    return Trajectory(pts, np.ones(len(pts), bool), future.dt)


def generate_plan_candidates(ego_future: Trajectory, limits: Limits = Limits(),
                             labels=(PlanLabel.CONSERVATIVE, PlanLabel.NORMAL, PlanLabel.AGGRESSIVE)):
    plans = [rescale_trajectory(ego_future, PLAN_FACTORS[lab], limits) for lab in labels]
    return PlanCandidateSet(plans, list(labels))


# ---------------------------------------------------------------------------
# reactive object behaviour


@dataclass(frozen=True)
class ReactionRule:
    relation: Relation
    trigger_plan: PlanLabel
    outcomes: tuple

    def __post_init__(self):
        if abs(sum(p for _, p in self.outcomes) - 1.0) > 1e-12:
            raise ValueError("outcome probabilities must sum to 1")


REACTION_RULES = (
    # yielding object may speed up to pass or keep yielding when the ego hesitates
    ReactionRule(Relation.OBJECT_YIELDS_EGO, PlanLabel.CONSERVATIVE, ((1.2, 0.5), (0.8, 0.5))),
    # leading object may slow to yield or speed up to keep the lead when the ego pushes
    ReactionRule(Relation.EGO_YIELDS_OBJECT, PlanLabel.AGGRESSIVE, ((0.8, 0.5), (1.2, 0.5))),
)


def reaction_outcomes(plan_label: PlanLabel, relation: Relation):
    """(factor, probability) outcomes for the object under this plan."""
    for rule in REACTION_RULES:
        if rule.relation is relation and rule.trigger_plan is plan_label:
            return rule.outcomes
    return ((1.0, 1.0),)


def simulate_reaction_heuristic(plan_label, object_future: Trajectory, relation,
                                rng: np.random.Generator, limits: Limits = Limits()) -> Trajectory:
    outcomes = reaction_outcomes(PlanLabel(plan_label), Relation(relation))
    if len(outcomes) == 1 and outcomes[0][0] == 1.0:
        return object_future
    probs = np.array([p for _, p in outcomes])
    pick = int(rng.choice(len(outcomes), p=probs))
    return rescale_trajectory(object_future, outcomes[pick][0], limits)


@dataclass(frozen=True)
class IdmParams:
    v0: float = None  # desired speed; None keeps the object's initial speed
    T: float = 1.5
    a: float = 1.4
    b: float = 2.0
    s0: float = 2.0
    delta: float = 4.0
    occupancy: float = 2.5  # radius of the conflict region the ego blocks


def _first_intersection(path_a, path_b):
    """First point along ``path_a`` where it crosses polyline ``path_b``."""
    for i in range(len(path_a) - 1):
        p, r = path_a[i], path_a[i + 1] - path_a[i]
        for j in range(len(path_b) - 1):
            q, s = path_b[j], path_b[j + 1] - path_b[j]
            cross = r[0] * s[1] - r[1] * s[0]
            if abs(cross) < 1e-12:
                continue
            qp = q - p
            t = (qp[0] * s[1] - qp[1] * s[0]) / cross
            u = (qp[0] * r[1] - qp[1] * r[0]) / cross
            if 0.0 <= t <= 1.0 and 0.0 <= u <= 1.0:
                return p + t * r, i, t
    return None


def idm_obstacle_schedule(plan: Trajectory, object_future: Trajectory, idm: IdmParams):
    """Where and when the ego blocks the object path.

    Returns (verts, cum, obstacle_s, active) for the object path.
    """
    verts, cum = _path_of(object_future)
    n = len(object_future)
    active = np.zeros(n, bool)
    hit = _first_intersection(verts, plan.points)
    if hit is None:
        return verts, cum, np.zeros(n), active
    c, i, t = hit
    s_c = cum[i] + t * (cum[i + 1] - cum[i])
    near_ego = np.hypot(*(plan.points - c).T) < idm.occupancy
    near_obj = np.hypot(*(object_future.points - c).T) < idm.occupancy
    if near_ego.any():
        ego_in = int(np.argmax(near_ego))
        obj_in = int(np.argmax(near_obj)) if near_obj.any() else n
        if ego_in <= obj_in:
            ego_out = n - 1 - int(np.argmax(near_ego[::-1]))
            active[: ego_out + 1] = True
    return verts, cum, np.full(n, s_c - idm.occupancy), active


def simulate_reaction_idm(plan: Trajectory, object_future: Trajectory,
                          idm: IdmParams = IdmParams()) -> Trajectory:
    """Object follows its path under IDM, treating the ego-occupied conflict
    region as a standing obstacle while the ego holds it or will reach it first."""
    verts, cum, obstacle_s, active = idm_obstacle_schedule(plan, object_future, idm)
    dt = object_future.dt
    v_init = (cum[1] - cum[0]) / dt
    v0 = v_init if idm.v0 is None else idm.v0
    progress = _kernels.idm_rollout(0.0, float(v_init), float(max(v0, 1e-6)), obstacle_s, active,
                                    idm.T, idm.a, idm.b, idm.s0, idm.delta, dt)
    pts = _kernels.interp_path(verts, cum, progress)
    return Trajectory(pts, np.ones(len(pts), bool), dt)


def build_plan_candidates(scene: Scene, limits: Limits = Limits(), reaction="heuristic",
                          rng=None, idm: IdmParams = IdmParams()) -> PlanCandidateSet:
    """Plans for the scene's ego plus the object's simulated reaction to each.

    ``reaction``: 'heuristic' keeps every rule outcome with its probability;
    'heuristic-sample' draws one outcome with ``rng``; 'idm' runs IDM.
    """
    ego_future = scene.future[scene.ego_index]
    obj_future = scene.future[scene.object_indices[0]]
    cands = generate_plan_candidates(ego_future, limits)
    sims = []
    for plan, lab in zip(cands.plans, cands.labels):
        if reaction == "heuristic":
            outs = [(p, obj_future if f == 1.0 else rescale_trajectory(obj_future, f, limits))
                    for f, p in reaction_outcomes(lab, scene.relation)]
        elif reaction == "heuristic-sample":
            outs = [(1.0, simulate_reaction_heuristic(lab, obj_future, scene.relation, rng, limits))]
        elif reaction == "idm":
            outs = [(1.0, simulate_reaction_idm(plan, obj_future, idm))]
        else:
            raise ValueError(f"unknown reaction model {reaction!r}")
        sims.append(outs)
    cands.simulated_object_futures = sims
    return cands


# ---------------------------------------------------------------------------
# dataset file


def _scene_record(sc: Scene):
    return {
        "id": sc.id,
        "dt": sc.dt,
        "n_agents": sc.n_agents,
        "ego_index": sc.ego_index,
        "object_indices": list(sc.object_indices),
        "relation": sc.relation.value,
        "past": [p.reshape(-1).tolist() for p in sc.past_xy],
        "past_valid": [v.astype(int).tolist() for v in sc.past_valid],
        "future": [p.reshape(-1).tolist() for p in sc.future_xy],
        "future_valid": [v.astype(int).tolist() for v in sc.future_valid],
    }


def _scene_from_record(rec):
    n = rec["n_agents"]
    past = np.array(rec["past"], dtype=np.float64).reshape(n, -1, 2)
    fut = np.array(rec["future"], dtype=np.float64).reshape(n, -1, 2)
    return Scene(
        past, np.array(rec["past_valid"], bool), fut, np.array(rec["future_valid"], bool),
        ego_index=rec["ego_index"], object_indices=tuple(rec["object_indices"]),
        relation=Relation(rec["relation"]), id=rec["id"], dt=rec["dt"],
    )


def write_dataset(scenes, path, config: GeneratorConfig = None):
    """One JSON header line, then one scene per line. Floats keep full precision."""
    scenes = list(scenes)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "n_scenes": len(scenes),
        "config_digest": config.digest() if config else None,
        "config": config.to_dict() if config else None,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for sc in scenes:
            fh.write(json.dumps(_scene_record(sc), sort_keys=True) + "\n")


def read_header(path):
    with open(path) as fh:
        return _parse_header(fh.readline(), path)


def _parse_header(line, path):
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:1: bad header ({exc.msg})") from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise ParseError(f"{path}:1: not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: version {header.get('version')}, expected {FORMAT_VERSION}")
    return header


def iter_dataset(path):
    """Stream scenes one line at a time."""
    with open(path) as fh:
        header = _parse_header(fh.readline(), path)
        count = 0
        lineno = 1
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                scene = _scene_from_record(rec)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: bad scene record {count} ({exc})") from exc
            count += 1
            yield scene
        expected = header.get("n_scenes")
        if expected is not None and count != expected:
            raise ParseError(f"{path}:{lineno if count else 1}: expected {expected} records, found {count}")


def read_dataset(path):
    return list(iter_dataset(path))
