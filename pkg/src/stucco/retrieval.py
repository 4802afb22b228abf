"""Blind object retrieval: multi-restart ICP, target selection and grasp evaluation."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Circle, Shape, SdfGrid, _as_pose_array, inverse_transform_points, \
    rotation, transform_points, wrap_angle


class RetrievalError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ModelPoints:
    points: np.ndarray
    spacing: float
    shape: Shape | None = None

    def __post_init__(self):
        if self.spacing > 0.005:
            raise ValueError("model sample spacing must be at most 5 mm")
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float))
        object.__setattr__(self, "_tree", cKDTree(self.points))

    @classmethod
    def from_shape(cls, shape: Shape, spacing: float = 0.002) -> "ModelPoints":
        return cls(shape.boundary_samples(spacing), spacing, shape)

    @property
    def tree(self) -> cKDTree:
        return self._tree

    def closest(self, q) -> np.ndarray:
        """Closest points on the closed polyline through the (ordered) samples."""
        q = np.asarray(q, dtype=float)
        _, j = self.tree.query(q)
        n = len(self.points)
        best = self.points[j]
        best_d = np.sum((q - best) ** 2, -1)
        for k in (j - 1, j + 1):
            a = self.points[j]
            b = self.points[k % n]
            e = b - a
            t = np.clip(np.sum((q - a) * e, -1) / np.maximum(np.sum(e * e, -1), 1e-300), 0.0, 1.0)
            c = a + t[:, None] * e
            d = np.sum((q - c) ** 2, -1)
            better = d < best_d
            best = np.where(better[:, None], c, best)
            best_d = np.where(better, d, best_d)
        return best

    @property
    def diameter(self) -> float:
        lo, hi = self.points.min(0), self.points.max(0)
        return float(np.hypot(*(hi - lo)))


@dataclass
class IcpEstimate:
    pose: np.ndarray
    error: float
    converged: bool
    iterations: int = 0
    history: list = field(default_factory=list)


def rigid_align(model, source) -> np.ndarray:
    """Least-squares pose ``T`` with ``T(model_i) ~ source_i`` (SVD of the cross-covariance)."""
    model = np.asarray(model, dtype=float)
    source = np.asarray(source, dtype=float)
    mc, sc = model.mean(0), source.mean(0)
    h = (model - mc).T @ (source - sc)
    u, _, vt = np.linalg.svd(h)
    r = vt.T @ u.T
    if np.linalg.det(r) < 0:
        vt[-1] *= -1
        r = vt.T @ u.T
    t = sc - r @ mc
    return np.array([t[0], t[1], math.atan2(r[1, 0], r[0, 0])])


def icp(source, model: ModelPoints, init=(0.0, 0.0, 0.0), max_iters: int = 50,
        tol: float = 1e-6) -> IcpEstimate:
    """Register ``source`` points against the model; the pose maps model frame to world."""
    src = np.asarray(source, dtype=float).reshape(-1, 2)
    if len(src) < 2:
        raise ValueError("icp needs at least 2 source points")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    pose = _as_pose_array(init).copy()
    def match(pose):
        local = inverse_transform_points(pose, src)
        c = model.closest(local)
        return c, float(np.mean(np.sum((local - c) ** 2, -1)))

    if np.ptp(src, axis=0).max() == 0:
        return IcpEstimate(pose, match(pose)[1], False)
    history = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        corr, err = match(pose)
        history.append(err)
        new = rigid_align(corr, src)
        change = float(np.hypot(*(new[:2] - pose[:2])) + abs(wrap_angle(new[2] - pose[2])))
        pose = new
        if change < tol:
            converged = True
            break
    err = match(pose)[1]
    history.append(err)
    return IcpEstimate(pose, err, converged, it, history)


def estimate_object(points, model: ModelPoints, restarts: int = 30, seed: int = 0,
                    max_iters: int = 50, inflate: float = 1.0) -> list[IcpEstimate]:
    """ICP from random initial yaws and translations around the points.

    Initial translations are drawn from the points' bounding box grown by
    ``inflate`` model diameters. Wide boxes let restarts settle in far-off
    minima (points draped over one face or a corner), which inflates the
    variance of every segment; narrow ones miss the object centre when the
    points cover only a small arc of it.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 2:
        raise ValueError("need at least 2 points")
    rng = np.random.default_rng(seed)
    lo = pts.min(0) - inflate * model.diameter
    hi = pts.max(0) + inflate * model.diameter
    out = []
    for _ in range(restarts):
        init = np.r_[rng.uniform(lo, hi), rng.uniform(-math.pi, math.pi)]
        out.append(icp(pts, model, init, max_iters))
    return out


def position_variance(estimates) -> float:
    t = np.array([e.pose[:2] for e in estimates])
    if len(t) < 2:
        return 0.0
    return float(np.trace(np.cov(t, rowvar=False)))


def robot_penetration(pose, model: ModelPoints, robot_samples) -> float:
    """Depth of robot surface samples inside the hypothesised object at ``pose``."""
    if model.shape is None:
        raise ValueError("model has no shape for penetration queries")
    sd = model.shape.signed_distance(inverse_transform_points(pose, robot_samples))
    return float(np.sum(np.maximum(-sd, 0.0)))


def _segment_key(points) -> int:
    pts = np.asarray(points, dtype=float)
    pts = pts[np.lexsort(pts.T[::-1])]
    return zlib.crc32(np.ascontiguousarray(pts).tobytes())


def choose_estimate(estimates, penetrations, tie_tol: float = 1e-12) -> int:
    pen = np.asarray(penetrations, dtype=float)
    cand = np.nonzero(pen <= pen.min() + tie_tol)[0]
    return int(cand[np.argmin([estimates[i].error for i in cand])])


@dataclass
class RetrievalReport:
    scores: list
    chosen: int
    pose: np.ndarray
    estimates: list
    grasp: bool | None = None

    def to_dict(self) -> dict:
        return {"scores": self.scores, "chosen": self.chosen, "pose": self.pose.tolist(),
                "grasp": self.grasp}


def select_target(segments, model: ModelPoints, x_t, grid: SdfGrid, restarts: int = 30,
                  seed: int = 0) -> RetrievalReport:
    """Pick the segment whose pose estimate varies least, then its least-penetrating estimate."""
    robot = transform_points(_as_pose_array(x_t), grid.surface)
    scores = []
    best = None
    for k, pts in enumerate(segments):
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        if len(pts) < 2:
            scores.append(None)
            continue
        key = _segment_key(pts)
        ests = estimate_object(pts, model, restarts, seed=(seed * 1_000_003 + key) % 2 ** 32)
        s = position_variance(ests)
        scores.append(s)
        if best is None or (s, key) < (best[0], best[1]):
            best = (s, key, k, ests)
    if best is None:
        raise RetrievalError("no segment has at least 2 points")
    _, _, k, ests = best
    pen = [robot_penetration(e.pose, model, robot) for e in ests]
    i = choose_estimate(ests, pen)
    return RetrievalReport(scores, k, ests[i].pose.copy(), ests)


def symmetry_period(shape: Shape) -> float:
    """Smallest yaw under which the shape maps onto itself (0 for full symmetry)."""
    if isinstance(shape, Circle):
        return 0.0
    v = shape.vertices
    for k in range(len(v), 1, -1):
        if len(v) % k:
            continue
        a = 2 * math.pi / k
        if all(np.min(np.hypot(*(v - q).T)) < 1e-9 for q in v @ rotation(a).T):
            return a
    return 2 * math.pi


def yaw_error(a: float, b: float, period: float) -> float:
    if period == 0:
        return 0.0
    d = (a - b) % period
    return float(min(d, period - d))


def grasp_check(estimate, env, trans_tol: float = 0.02, yaw_tol: float = math.radians(15)) -> bool:
    """Whether a grasp at ``estimate`` would close on the target in ``env``."""
    est = _as_pose_array(estimate)
    truth = env.target_pose
    if np.hypot(*(est[:2] - truth[:2])) > trans_tol:
        return False
    return yaw_error(est[2], truth[2], symmetry_period(env.target.shape)) <= yaw_tol
