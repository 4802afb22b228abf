"""Contact detection from the end-effector wrench residual and planar isolation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .geometry import Circle, Polygon, Pose2, Shape, _as_pose_array, rotation, transform_points

log = logging.getLogger(__name__)


class CalibrationError(ValueError):
    pass


class IsolationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Wrench2:
    """Planar external wrench; ``tau`` is about the end-effector frame origin."""

    fx: float
    fy: float
    tau: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.fx, self.fy, self.tau)):
            raise ValueError("wrench components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.tau])

    @classmethod
    def from_array(cls, a) -> "Wrench2":
        return cls(float(a[0]), float(a[1]), float(a[2]))


def _as_wrench_array(w) -> np.ndarray:
    if isinstance(w, Wrench2):
        return w.as_array()
    return np.asarray(w, dtype=float)


@dataclass(frozen=True)
class ResidualModel:
    precision: np.ndarray
    threshold: float

    def __post_init__(self):
        p = np.asarray(self.precision, dtype=float)
        if p.shape != (3, 3) or not np.allclose(p, p.T):
            raise CalibrationError("precision must be a symmetric 3x3 matrix")
        if np.linalg.eigvalsh(p).min() <= 0:
            raise CalibrationError("precision must be positive definite")
        if not self.threshold > 0:
            raise CalibrationError("threshold must be positive")
        object.__setattr__(self, "precision", p)

    def statistic(self, gamma) -> float:
        g = _as_wrench_array(gamma)
        return float(g @ self.precision @ g)


def calibrate_precision(free_space_residuals, threshold: float = 1.0) -> ResidualModel:
    """Fit the residual precision from wrenches recorded while moving in free space."""
    samples = np.array([_as_wrench_array(w) for w in free_space_residuals], dtype=float)
    if samples.ndim != 2 or samples.shape[0] < 10 or samples.shape[1] != 3:
        raise CalibrationError("need at least 10 free-space wrench samples")
    cov = np.cov(samples, rowvar=False)
    cov = cov + np.eye(3) * (1e-9 * np.trace(cov) / 3)
    if np.linalg.eigvalsh(cov).min() <= 0 or np.linalg.cond(cov) > 1e12:
        raise CalibrationError("free-space residual covariance is singular")
    precision = np.linalg.inv(cov)
    precision = (precision + precision.T) / 2
    return ResidualModel(precision, float(threshold))


def detect_contact(gamma, model: ResidualModel) -> bool:
    return model.statistic(gamma) > model.threshold


def _line_intersections(shape: Shape, r0: np.ndarray, d: np.ndarray):
    """Intersections of the line ``r0 + s d`` with the boundary: list of (s, point, normal)."""
    hits = []
    if isinstance(shape, Circle):
        b = 2 * r0 @ d
        c = r0 @ r0 - shape.radius ** 2
        disc = b * b - 4 * c
        if disc < 0:
            return hits
        for s in ((-b - math.sqrt(disc)) / 2, (-b + math.sqrt(disc)) / 2):
            p = r0 + s * d
            hits.append((s, p, p / shape.radius))
        return hits
    a, b = shape.edges
    for k, (p, q) in enumerate(zip(a, b)):
        e = q - p
        denom = d[0] * e[1] - d[1] * e[0]
        if abs(denom) < 1e-15:
            continue
        w = p - r0
        s = (w[0] * e[1] - w[1] * e[0]) / denom
        u = (w[0] * d[1] - w[1] * d[0]) / denom
        if -1e-12 <= u <= 1 + 1e-12:
            hits.append((s, r0 + s * d, shape.normals[k]))
    return hits


def _nearest_boundary_to_line(shape: Shape, r0: np.ndarray, d: np.ndarray) -> np.ndarray:
    perp = np.array([-d[1], d[0]])
    if isinstance(shape, Circle):
        side = 1.0 if r0 @ perp >= 0 else -1.0
        return shape.radius * side * perp
    offsets = (shape.vertices - r0) @ perp
    return shape.vertices[int(np.argmin(np.abs(offsets)))]


def isolate_contact(gamma, pose, shape: Shape, fallback: bool = True) -> np.ndarray:
    """Locate a single hard-finger contact on the robot boundary from its wrench.

    The contact must lie on the line ``r x f = tau``; among the boundary
    crossings of that line we keep the one where ``f`` points into the body.
    Returns the world-frame contact point. When the line misses the body the
    boundary point nearest the line is returned (and logged) if ``fallback``,
    otherwise :class:`IsolationError` is raised.
    """
    g = _as_wrench_array(gamma)
    pose = _as_pose_array(pose)
    f = rotation(-pose[2]) @ g[:2]
    fn = float(np.hypot(f[0], f[1]))
    if fn == 0:
        raise IsolationError("cannot isolate a contact with zero force")
    d = f / fn
    # closest point of the torque-balance line to the link origin
    r0 = g[2] * np.array([f[1], -f[0]]) / fn ** 2
    hits = [(s, p, n) for s, p, n in _line_intersections(shape, r0, d) if n @ f < 0]
    if hits:
        best = min(hits, key=lambda h: float(np.hypot(*h[1])))
        return transform_points(pose, best[1])
    if not fallback:
        raise IsolationError("torque-balance line does not cross the robot boundary")
    p = _nearest_boundary_to_line(shape, r0, d)
    log.debug("contact isolation fell back to nearest boundary point %s", p)
    return transform_points(pose, p)
