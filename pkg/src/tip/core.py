"""Trajectory containers, scene normalization and point geometry."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

DT = 0.1


class TipError(Exception):
    """Base class for package errors."""


class NoValidAgents(TipError):
    pass


class NoOverlap(TipError):
    pass


class ShapeMismatch(TipError, ValueError):
    pass


class Relation(enum.Enum):
    OBJECT_YIELDS_EGO = "ObjectYieldsEgo"
    EGO_YIELDS_OBJECT = "EgoYieldsObject"
    NONE = "None"


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Sequence of (x, y) positions in meters with a per-step validity mask."""

    points: np.ndarray
    valid: np.ndarray = None
    dt: float = DT

    def __post_init__(self):
        pts = _frozen(self.points, np.float64).reshape(-1, 2)
        valid = np.ones(len(pts), bool) if self.valid is None else self.valid
        valid = _frozen(valid, bool).reshape(-1)
        if len(pts) < 1 or len(valid) != len(pts):
            raise ShapeMismatch(f"points/valid lengths {len(pts)}/{len(valid)}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "valid", valid)

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.dt == other.dt
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.valid, other.valid)
        )


@dataclass(frozen=True, eq=False)
class Scene:
    """Observed pasts and ground-truth futures for N agents.

    Arrays are stored stacked: ``past_xy`` (N, T_p, 2), ``past_valid``
    (N, T_p), ``future_xy`` (N, T_f, 2), ``future_valid`` (N, T_f). The last
    past step is t = 0.
    """

    past_xy: np.ndarray
    past_valid: np.ndarray
    future_xy: np.ndarray
    future_valid: np.ndarray
    ego_index: int = 0
    object_indices: tuple = (1,)
    relation: Relation = Relation.NONE
    id: str = ""
    dt: float = DT

    def __post_init__(self):
        px = _frozen(self.past_xy, np.float64)
        pv = _frozen(self.past_valid, bool)
        fx = _frozen(self.future_xy, np.float64)
        fv = _frozen(self.future_valid, bool)
        if px.ndim != 3 or px.shape[-1] != 2 or pv.shape != px.shape[:2]:
            raise ShapeMismatch(f"past shapes {px.shape} / {pv.shape}")
        if fx.ndim != 3 or fx.shape[-1] != 2 or fv.shape != fx.shape[:2]:
            raise ShapeMismatch(f"future shapes {fx.shape} / {fv.shape}")
        if fx.shape[0] != px.shape[0]:
            raise ShapeMismatch("past and future agent counts differ")
        n = px.shape[0]
        objs = tuple(int(i) for i in self.object_indices)
        ego = int(self.ego_index)
        if not 0 <= ego < n or ego in objs or any(not 0 <= i < n for i in objs):
            raise ValueError(f"bad ego/object indices {ego}/{objs} for {n} agents")
        object.__setattr__(self, "past_xy", px)
        object.__setattr__(self, "past_valid", pv)
        object.__setattr__(self, "future_xy", fx)
        object.__setattr__(self, "future_valid", fv)
        object.__setattr__(self, "object_indices", objs)
        object.__setattr__(self, "ego_index", ego)
        object.__setattr__(self, "relation", Relation(self.relation))

    @property
    def n_agents(self):
        return self.past_xy.shape[0]

    @property
    def t_past(self):
        return self.past_xy.shape[1]

    @property
    def t_future(self):
        return self.future_xy.shape[1]

    @property
    def past(self):
        return [Trajectory(p, v, self.dt) for p, v in zip(self.past_xy, self.past_valid)]

    @property
    def future(self):
        return [Trajectory(p, v, self.dt) for p, v in zip(self.future_xy, self.future_valid)]

    def shifted(self, offset):
        """Copy with every position translated by ``offset``."""
        off = np.asarray(offset, dtype=np.float64)
        return Scene(
            self.past_xy + off, self.past_valid, self.future_xy + off, self.future_valid,
            self.ego_index, self.object_indices, self.relation, self.id, self.dt,
        )

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.id == other.id
            and self.dt == other.dt
            and self.ego_index == other.ego_index
            and self.object_indices == other.object_indices
            and self.relation == other.relation
            and np.array_equal(self.past_xy, other.past_xy)
            and np.array_equal(self.past_valid, other.past_valid)
            and np.array_equal(self.future_xy, other.future_xy)
            and np.array_equal(self.future_valid, other.future_valid)
        )


@dataclass(frozen=True)
class NormalizationFrame:
    origin: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def to_world(self, xy):
        return np.asarray(xy) + self.origin

    def to_local(self, xy):
        return np.asarray(xy) - self.origin


def normalize_scene(scene: Scene) -> tuple[Scene, NormalizationFrame]:
    """Center the scene on the mean of the valid last-observed positions."""
    last_valid = scene.past_valid[:, -1]
    if not last_valid.any():
        raise NoValidAgents(f"scene {scene.id!r}: no agent observed at t=0")
    origin = scene.past_xy[last_valid, -1].mean(axis=0)
    frame = NormalizationFrame(_frozen(origin, np.float64))
    return scene.shifted(-origin), frame


def denormalize_scene(scene: Scene, frame: NormalizationFrame) -> Scene:
    return scene.shifted(frame.origin)


def min_pairwise_distance(a: Trajectory, b: Trajectory) -> tuple[float, int]:
    """Closest approach over jointly valid steps; ties go to the earliest step."""
    if len(a) != len(b):
        raise ShapeMismatch(f"trajectory lengths differ: {len(a)} vs {len(b)}")
    dist, idx = _kernels.min_dist(a.points, b.points, a.valid & b.valid)
    if idx < 0:
        raise NoOverlap("no step is valid in both trajectories")
    return float(dist), int(idx)


def path_length(traj: Trajectory) -> float:
    pts = traj.points[traj.valid]
    if len(pts) < 2:
        return 0.0
    seg = np.diff(pts, axis=0)
    return float(np.hypot(seg[:, 0], seg[:, 1]).sum())


def last_valid_index(valid: np.ndarray) -> np.ndarray:
    """Index of the last True along the final axis, -1 where none."""
    valid = np.asarray(valid, bool)
    t = valid.shape[-1]
    rev = np.argmax(valid[..., ::-1], axis=-1)
    idx = t - 1 - rev
    return np.where(valid.any(axis=-1), idx, -1)
