"""Planar shapes, poses and the gridded signed distance field of the robot.

Conventions used throughout the package:

* a pose ``(x, y, yaw)`` maps link-frame points into the world by rotating
  first and then translating, ``world = R(yaw) @ link + (x, y)``;
* signed distances are negative inside a shape;
* batched routines take arrays whose trailing axis holds ``(x, y)`` or
  ``(x, y, yaw)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    """Raised for invalid shapes or grid parameters."""


def wrap_angle(a):
    """Wrap angles into (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError(f"non-finite point ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


@dataclass(frozen=True)
class Pose2:
    translation: Point2
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @classmethod
    def from_xyyaw(cls, x, y, yaw=0.0) -> "Pose2":
        return cls(Point2(float(x), float(y)), float(yaw))

    @classmethod
    def from_array(cls, a) -> "Pose2":
        a = np.asarray(a, dtype=float)
        return cls.from_xyyaw(a[0], a[1], a[2] if a.shape[0] > 2 else 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.translation.x, self.translation.y, self.yaw])


IDENTITY = Pose2(Point2(0.0, 0.0), 0.0)


def rotation(yaw):
    """Rotation matrices for ``yaw`` with shape ``yaw.shape + (2, 2)``."""
    yaw = np.asarray(yaw, dtype=float)
    c, s = np.cos(yaw), np.sin(yaw)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def transform_points(pose, points):
    """Map link-frame ``points`` into the world frame at ``pose`` (broadcasting)."""
    pose = np.asarray(pose, dtype=float)
    points = np.asarray(points, dtype=float)
    c, s = np.cos(pose[..., 2]), np.sin(pose[..., 2])
    x = c * points[..., 0] - s * points[..., 1] + pose[..., 0]
    y = s * points[..., 0] + c * points[..., 1] + pose[..., 1]
    return np.stack([x, y], -1)


def inverse_transform_points(pose, points):
    """Map world-frame ``points`` into the link frame of ``pose`` (broadcasting)."""
    pose = np.asarray(pose, dtype=float)
    points = np.asarray(points, dtype=float)
    c, s = np.cos(pose[..., 2]), np.sin(pose[..., 2])
    dx = points[..., 0] - pose[..., 0]
    dy = points[..., 1] - pose[..., 1]
    return np.stack([c * dx + s * dy, -s * dx + c * dy], -1)


def compose(a, b):
    """Pose composition ``a * b`` (apply ``b`` in the frame of ``a``)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    t = transform_points(a, b[..., :2])
    return np.concatenate([t, np.asarray(wrap_angle(a[..., 2] + b[..., 2]))[..., None]], -1)


def _as_pose_array(pose) -> np.ndarray:
    if isinstance(pose, Pose2):
        return pose.as_array()
    return np.asarray(pose, dtype=float)


def _as_point_array(p) -> np.ndarray:
    if isinstance(p, Point2):
        return p.as_array()
    return np.asarray(p, dtype=float)


class Shape:
    """Base class for convex planar shapes described in their own frame."""

    def signed_distance(self, points) -> np.ndarray:
        raise NotImplementedError

    def contains(self, points) -> np.ndarray:
        return self.signed_distance(points) < 0

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def boundary_samples(self, spacing: float) -> np.ndarray:
        raise NotImplementedError

    def support(self, direction) -> np.ndarray:
        """Farthest point of the shape along ``direction``."""
        raise NotImplementedError

    @property
    def diameter(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def to_dict(self) -> dict:
        raise NotImplementedError

    @staticmethod
    def from_dict(d: dict) -> "Shape":
        kind = d["type"]
        if kind == "circle":
            return Circle(float(d["radius"]))
        if kind == "box":
            return Polygon.box(float(d["width"]), float(d["height"]))
        if kind == "polygon":
            return Polygon(np.asarray(d["vertices"], dtype=float))
        raise GeometryError(f"unknown shape type {kind!r}")


@dataclass(frozen=True, eq=False)
class Circle(Shape):
    radius: float

    def __post_init__(self):
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise GeometryError(f"circle radius must be positive, got {self.radius}")

    def signed_distance(self, points):
        points = np.asarray(points, dtype=float)
        return np.hypot(points[..., 0], points[..., 1]) - self.radius

    def bounds(self):
        r = self.radius
        return np.array([-r, -r]), np.array([r, r])

    def boundary_samples(self, spacing):
        n = max(8, int(math.ceil(2 * math.pi * self.radius / spacing)))
        t = np.arange(n) * (2 * math.pi / n)
        return self.radius * np.stack([np.cos(t), np.sin(t)], -1)

    def support(self, direction):
        d = np.asarray(direction, dtype=float)
        return self.radius * d / np.linalg.norm(d)

    def outward_normal(self, points):
        points = np.asarray(points, dtype=float)
        n = np.linalg.norm(points, axis=-1, keepdims=True)
        return points / np.where(n > 0, n, 1.0)

    def to_dict(self):
        return {"type": "circle", "radius": self.radius}


@dataclass(frozen=True, eq=False)
class Polygon(Shape):
    vertices: np.ndarray
    normals: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise GeometryError("polygon needs at least 3 vertices of shape (k, 2)")
        if not np.all(np.isfinite(v)):
            raise GeometryError("polygon vertices must be finite")
        e = np.roll(v, -1, axis=0) - v
        cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
        if np.any(cross <= 1e-15):
            raise GeometryError("polygon must be strictly convex and counter-clockwise")
        length = np.linalg.norm(e, axis=1)
        normals = np.stack([e[:, 1], -e[:, 0]], -1) / length[:, None]
        v.setflags(write=False)
        normals.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "normals", normals)

    @classmethod
    def box(cls, width: float, height: float) -> "Polygon":
        """Axis-aligned rectangle centred on the origin."""
        if width <= 0 or height <= 0:
            raise GeometryError("box dimensions must be positive")
        w, h = width / 2, height / 2
        return cls(np.array([[-w, -h], [w, -h], [w, h], [-w, h]]))

    @property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices, np.roll(self.vertices, -1, axis=0)

    def signed_distance(self, points):
        points = np.asarray(points, dtype=float)
        a, b = self.edges
        ab = b - a
        ap = points[..., None, :] - a
        t = np.clip(np.sum(ap * ab, -1) / np.sum(ab * ab, -1), 0.0, 1.0)
        closest = a + t[..., None] * ab
        dist = np.min(np.linalg.norm(points[..., None, :] - closest, axis=-1), axis=-1)
        # convex: inside iff behind every edge
        side = np.max(np.sum(ap * self.normals, -1), axis=-1)
        return np.where(side < 0, -dist, dist)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def boundary_samples(self, spacing):
        out = []
        a, b = self.edges
        for p, q in zip(a, b):
            n = max(1, int(math.ceil(np.linalg.norm(q - p) / spacing)))
            t = np.arange(n)[:, None] / n
            out.append(p + t * (q - p))
        return np.concatenate(out)

    def support(self, direction):
        d = np.asarray(direction, dtype=float)
        return self.vertices[int(np.argmax(self.vertices @ d))]

    def to_dict(self):
        return {"type": "polygon", "vertices": self.vertices.tolist()}


def surface_distance(p, shape: Shape, shape_pose=IDENTITY):
    """Unsigned distance from world point(s) ``p`` to the boundary of ``shape``."""
    local = inverse_transform_points(_as_pose_array(shape_pose), _as_point_array(p))
    d = np.abs(shape.signed_distance(local))
    return float(d) if np.ndim(d) == 0 else d


@dataclass(frozen=True, eq=False)
class SdfGrid:
    """Signed distance field sampled at cell centres in the link frame.

    ``values[i, j]`` is the signed distance at ``origin + (i, j) * resolution``.
    The grid is read-only after construction.
    """

    origin: np.ndarray
    resolution: float
    values: np.ndarray
    surface: np.ndarray
    shape: Shape | None = None

    @property
    def band(self) -> float:
        """Worst-case error of a nearest-cell lookup (half a cell diagonal)."""
        return self.resolution * math.sqrt(0.5)

    @property
    def extent(self) -> tuple[np.ndarray, np.ndarray]:
        lo = self.origin
        hi = self.origin + (np.array(self.values.shape) - 1) * self.resolution
        return lo, hi

    def lookup(self, points) -> np.ndarray:
        """Nearest-cell signed distance at link-frame ``points``.

        Points beyond the grid get the nearest boundary cell value plus their
        euclidean distance to the grid rectangle.
        """
        points = np.asarray(points, dtype=float)
        nx, ny = self.values.shape
        f = (points - self.origin) / self.resolution
        i = np.rint(f[..., 0]).astype(np.int64)
        j = np.rint(f[..., 1]).astype(np.int64)
        ic = np.clip(i, 0, nx - 1)
        jc = np.clip(j, 0, ny - 1)
        v = self.values[ic, jc]
        lo, hi = self.extent
        excess = np.hypot(
            np.maximum(lo[0] - points[..., 0], 0) + np.maximum(points[..., 0] - hi[0], 0),
            np.maximum(lo[1] - points[..., 1], 0) + np.maximum(points[..., 1] - hi[1], 0),
        )
        return v + excess


def build_sdf(shape: Shape, resolution: float = 0.001, padding: float | None = None) -> SdfGrid:
    """Precompute the signed distance field of ``shape`` on a regular grid."""
    if not (resolution > 0 and math.isfinite(resolution)):
        raise GeometryError(f"resolution must be positive, got {resolution}")
    if padding is None:
        padding = 10 * resolution
    if padding < resolution:
        raise GeometryError("padding must be at least one resolution")
    lo, hi = shape.bounds()
    lo = lo - padding
    hi = hi + padding
    n = np.ceil((hi - lo) / resolution).astype(int) + 1
    xs = lo[0] + np.arange(n[0]) * resolution
    ys = lo[1] + np.arange(n[1]) * resolution
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    values = shape.signed_distance(np.stack([gx, gy], -1))
    values.setflags(write=False)
    surface = shape.boundary_samples(resolution)
    surface.setflags(write=False)
    return SdfGrid(origin=lo.copy(), resolution=float(resolution), values=values,
                   surface=surface, shape=shape)


def penetration_cx(pose, p, grid: SdfGrid, offset: float = 0.0):
    """Depth by which world point(s) ``p`` sit inside the robot at ``pose``.

    Zero outside the robot; inside, the distance to the nearest surface point
    less ``offset`` (clamped at zero). Depths within the grid's lookup error
    band count as touching, so a point sensed on the surface never penetrates
    its own pose. Broadcasts over leading axes.
    """
    local = inverse_transform_points(_as_pose_array(pose), _as_point_array(p))
    depth = np.maximum(-grid.lookup(local) - grid.band - offset, 0.0)
    return float(depth) if np.ndim(depth) == 0 else depth


def penetration(a: Shape, pose_a, b: Shape, pose_b) -> tuple[float, np.ndarray]:
    """Minimum translation separating ``b`` from ``a``.

    Returns ``(depth, normal)`` where moving ``b`` by ``depth * normal``
    resolves the overlap; ``depth <= 0`` means the shapes are apart, in which
    case the value is minus the separation along the best axis (not the true
    distance for polygons).
    """
    pose_a = _as_pose_array(pose_a)
    pose_b = _as_pose_array(pose_b)
    if isinstance(a, Circle) and isinstance(b, Circle):
        d = pose_b[:2] - pose_a[:2]
        dist = float(np.hypot(d[0], d[1]))
        n = d / dist if dist > 0 else np.array([1.0, 0.0])
        return a.radius + b.radius - dist, n
    if isinstance(a, Circle):
        depth, n = penetration(b, pose_b, a, pose_a)
        return depth, -n
    if isinstance(b, Circle):
        c = inverse_transform_points(pose_a, pose_b[:2])
        sd = float(a.signed_distance(c))
        if sd > 0:
            s0, s1 = a.edges
            e = s1 - s0
            t = np.clip(np.sum((c - s0) * e, -1) / np.sum(e * e, -1), 0, 1)
            closest = s0 + t[:, None] * e
            k = int(np.argmin(np.linalg.norm(c - closest, axis=1)))
            n_local = (c - closest[k]) / sd
        else:
            k = int(np.argmax(np.sum((c - a.vertices) * a.normals, -1)))
            n_local = a.normals[k]
        n = rotation(pose_a[2]) @ n_local
        return b.radius - sd, n
    va = transform_points(pose_a, a.vertices)
    vb = transform_points(pose_b, b.vertices)
    axes = np.concatenate([a.normals @ rotation(pose_a[2]).T, b.normals @ rotation(pose_b[2]).T])
    pa = va @ axes.T
    pb = vb @ axes.T
    fwd = pa.max(0) - pb.min(0)  # b lies along +axis
    back = pb.max(0) - pa.min(0)  # b lies along -axis
    overlap = np.minimum(fwd, back)
    k = int(np.argmin(overlap))
    n = axes[k] if fwd[k] <= back[k] else -axes[k]
    return float(overlap[k]), n


def contact_point(a: Shape, pose_a, b: Shape, pose_b, tol: float = 1e-6) -> np.ndarray:
    """Representative world contact point of two touching shapes.

    For edge-on-edge contact this is the midpoint of the shared segment.
    """
    pose_a = _as_pose_array(pose_a)
    pose_b = _as_pose_array(pose_b)
    if isinstance(b, Circle):
        _, n = penetration(a, pose_a, b, pose_b)
        return pose_b[:2] - b.radius * n
    if isinstance(a, Circle):
        _, n = penetration(a, pose_a, b, pose_b)
        return pose_a[:2] + a.radius * n
    va = transform_points(pose_a, a.vertices)
    vb = transform_points(pose_b, b.vertices)
    near_a = va[b.signed_distance(inverse_transform_points(pose_b, va)) <= tol]
    near_b = vb[a.signed_distance(inverse_transform_points(pose_a, vb)) <= tol]
    pts = np.concatenate([near_a, near_b])
    if len(pts) == 0:
        _, n = penetration(a, pose_a, b, pose_b)
        pts = np.stack([transform_points(pose_a, a.support(rotation(-pose_a[2]) @ n)),
                        transform_points(pose_b, b.support(rotation(-pose_b[2]) @ -n))])
    return pts.mean(axis=0)


def shape_distance(a: Shape, pose_a, b: Shape, pose_b) -> float:
    """Separation distance between two convex shapes (0 when touching or overlapping)."""
    pose_a = _as_pose_array(pose_a)
    pose_b = _as_pose_array(pose_b)
    if isinstance(a, Circle) and isinstance(b, Circle):
        return max(0.0, float(np.linalg.norm(pose_a[:2] - pose_b[:2])) - a.radius - b.radius)
    if isinstance(a, Circle):
        a, pose_a, b, pose_b = b, pose_b, a, pose_a
    if isinstance(b, Circle):
        c = inverse_transform_points(pose_a, pose_b[:2])
        return max(0.0, float(a.signed_distance(c)) - b.radius)
    if penetration(a, pose_a, b, pose_b)[0] >= 0:
        return 0.0
    va = transform_points(pose_a, a.vertices)
    vb = transform_points(pose_b, b.vertices)
    da = a.signed_distance(inverse_transform_points(pose_a, vb))
    db = b.signed_distance(inverse_transform_points(pose_b, va))
    return float(min(da.min(), db.min()))
