"""Tracking metrics: contact error, Fowlkes-Mallows index, ambiguity."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import shape_distance, surface_distance

AMBIGUITY_RANGE = 0.15


@dataclass(frozen=True)
class Labeling:
    predicted: np.ndarray
    truth: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.predicted).ravel()
        t = np.asarray(self.truth).ravel()
        if len(p) != len(t):
            raise ValueError(f"labelings differ in length ({len(p)} vs {len(t)})")
        object.__setattr__(self, "predicted", p)
        object.__setattr__(self, "truth", t)


def _points(points) -> np.ndarray:
    pts = [getattr(q, "p", q) for q in points] if not isinstance(points, np.ndarray) else points
    return np.asarray(pts, dtype=float).reshape(-1, 2)


def contact_error(points, env, object_poses=None) -> float | None:
    """Mean distance from each point to the nearest object surface; None without points."""
    pts = _points(points)
    if len(pts) == 0:
        return None
    poses = env.poses if object_poses is None else object_poses
    d = np.stack([surface_distance(pts, o.shape, pose) for o, pose in zip(env.objects, poses)])
    return float(d.min(axis=0).mean())


def _pairs(counts) -> float:
    counts = np.asarray(counts, dtype=float)
    return float(np.sum(counts * (counts - 1) / 2))


def fmi(labeling_or_pred, truth=None) -> float:
    """Fowlkes-Mallows index over unordered point pairs; 0 when undefined."""
    lab = labeling_or_pred if truth is None else Labeling(labeling_or_pred, truth)
    _, p = np.unique(lab.predicted, return_inverse=True)
    _, t = np.unique(lab.truth, return_inverse=True)
    if len(p) < 2:
        return 0.0
    table = np.zeros((p.max() + 1, t.max() + 1))
    np.add.at(table, (p, t), 1)
    tp = _pairs(table)
    denom = _pairs(table.sum(axis=1)) * _pairs(table.sum(axis=0))
    if denom == 0:
        return 0.0
    return float(tp / np.sqrt(denom))


def step_ambiguity(d2: float) -> float:
    return float(np.clip(1.0 - d2 / AMBIGUITY_RANGE, 0.0, 1.0))


def ambiguity_score(records, env) -> float:
    """Mean over steps of how close the second-nearest object is to the gripper."""
    if len(env.objects) < 2 or not records:
        return 0.0
    scores = []
    for rec in records:
        d = sorted(shape_distance(env.gripper, rec.pose, o.shape, pose)
                   for o, pose in zip(env.objects, rec.object_poses))
        scores.append(step_ambiguity(max(d[1], 0.0)))
    return float(np.mean(scores))
