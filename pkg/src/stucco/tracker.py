"""Soft tracking of contact points with a particle filter.

Every particle holds the full history of contact points and the end-effector
poses at which they were sensed. Because each step appends the same new
contacts to every particle and repairs points in place, all particles always
have the same number of points, so the belief is stored as dense arrays:

* ``points``  ``(N, M, 2)`` contact points in the world frame
* ``poses``   ``(N, M, 3)`` end-effector pose stored with each point

Per-particle work within a step uses only that slot's random stream, so the
result does not depend on how slots are split across workers.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .geometry import SdfGrid, penetration_cx, wrap_angle

log = logging.getLogger(__name__)

# observed pose deltas larger than this are rejected as bad observations
MAX_STEP = 0.1


@dataclass(frozen=True)
class TrackerParams:
    n_particles: int = 100
    length_scale: float = 0.02
    penetration_scale: float = 0.002
    connection_threshold: float = 0.4
    penetration_offset: float = 0.0

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be positive")
        if self.length_scale <= 0 or self.penetration_scale <= 0:
            raise ValueError("length and penetration scales must be positive")
        if not 0 < self.connection_threshold < 1:
            raise ValueError("connection threshold must lie in (0, 1)")
        if self.penetration_offset < 0:
            raise ValueError("penetration offset must be non-negative")

    @property
    def connection_distance(self) -> float:
        """Distance below which two points are linked when segmenting."""
        return math.sqrt(-self.length_scale * math.log(self.connection_threshold))


@dataclass(frozen=True)
class TrackedPoint:
    p: np.ndarray
    x: np.ndarray


@dataclass(frozen=True)
class ContactObservation:
    """A contact sensed at the start of the motion ``dx`` it then rode along."""

    p: np.ndarray
    x: np.ndarray
    dx: np.ndarray

    def __post_init__(self):
        for name in ("p", "x", "dx"):
            v = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        if self.x.shape != (3,) or self.dx.shape != (3,) or self.p.shape != (2,):
            raise ValueError("expected p of shape (2,), x and dx of shape (3,)")
        if np.hypot(self.dx[0], self.dx[1]) > MAX_STEP:
            raise ValueError(f"pose delta {self.dx[:2]} exceeds max step {MAX_STEP}")


@dataclass
class Particle:
    points: np.ndarray
    poses: np.ndarray
    log_weight: float = 0.0

    def __len__(self):
        return len(self.points)

    def tracked_points(self) -> list[TrackedPoint]:
        return [TrackedPoint(p.copy(), x.copy()) for p, x in zip(self.points, self.poses)]


def connection_probability(d, length_scale):
    """Probability that two points a distance ``d`` apart lie on the same object."""
    d = np.asarray(d, dtype=float)
    return np.exp(-(d * d) / length_scale)


def dynamics_translate(points, poses, dx):
    """Move points by the translation of ``dx`` and their poses by all of ``dx``.

    ``dx`` may be a single delta or one per point. Rotation in ``dx`` is applied
    to the poses only; contact points never rotate.
    """
    points = np.asarray(points, dtype=float)
    poses = np.asarray(poses, dtype=float)
    dx = np.asarray(dx, dtype=float)
    new_poses = poses + dx
    new_poses[..., 2] = wrap_angle(new_poses[..., 2])
    return points + dx[..., :2], new_poses


def penetration_matrix(poses, points, grid: SdfGrid, offset: float = 0.0):
    """``C[..., i, j]`` = penetration of point ``j`` into the robot at pose ``i``."""
    poses = np.asarray(poses, dtype=float)
    points = np.asarray(points, dtype=float)
    lo, hi = grid.extent
    # any point inside the robot lies within this radius of the pose origin
    reach = float(np.max(np.abs(np.concatenate([lo, hi]))) * math.sqrt(2))
    d2 = ((poses[..., :, None, 0] - points[..., None, :, 0]) ** 2
          + (poses[..., :, None, 1] - points[..., None, :, 1]) ** 2)
    out = np.zeros(d2.shape)
    near = d2 < reach * reach
    if near.any():
        pb = np.broadcast_to(poses[..., :, None, :], d2.shape + (3,))
        qb = np.broadcast_to(points[..., None, :, :], d2.shape + (2,))
        out[near] = penetration_cx(pb[near], qb[near], grid, offset)
    return out


def systematic_resample(weights, rng: np.random.Generator) -> np.ndarray:
    """Systematic resampling indices for (unnormalised) ``weights``."""
    w = np.asarray(weights, dtype=float)
    n = len(w)
    if np.all(w == w[0]):
        rng.random()
        return np.arange(n)
    cum = np.cumsum(w / w.sum())
    cum[-1] = 1.0
    positions = (rng.random() + np.arange(n)) / n
    return np.searchsorted(cum, positions, side="right")


class Belief:
    """Particle belief over contact point sets; steps update it in place."""

    def __init__(self, params: TrackerParams, grid: SdfGrid, seed: int = 0, workers: int = 1):
        self.params = params
        self.grid = grid
        self.seed = int(seed)
        self.workers = max(1, int(workers))
        n = params.n_particles
        streams = np.random.SeedSequence(self.seed).spawn(n + 1)
        self.rngs = [np.random.default_rng(s) for s in streams[:n]]
        self.resample_rng = np.random.default_rng(streams[n])
        self.points = np.zeros((n, 0, 2))
        self.poses = np.zeros((n, 0, 3))
        self.log_weight = np.zeros(n)
        self.parents = np.arange(n)
        # slots known to have no pairwise penetration among stored points
        self.consistent = np.ones(n, dtype=bool)
        self.step_index = 0
        self.last_contact = False
        self._pool = None

    @property
    def n_particles(self) -> int:
        return self.points.shape[0]

    @property
    def n_points(self) -> int:
        return self.points.shape[1]

    def particle(self, i: int) -> Particle:
        return Particle(self.points[i].copy(), self.poses[i].copy(), float(self.log_weight[i]))

    def particles(self) -> list[Particle]:
        return [self.particle(i) for i in range(self.n_particles)]

    def _chunks(self):
        return [c for c in np.array_split(np.arange(self.n_particles), self.workers) if len(c)]

    def _map(self, fn):
        chunks = self._chunks()
        if self.workers == 1 or len(chunks) == 1:
            return [fn(c) for c in chunks]
        if self._pool is None:
            self._pool = ThreadPoolExecutor(self.workers)
        return list(self._pool.map(fn, chunks))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_pool"] = None
        return state


def _prior_log_weight(belief: Belief) -> np.ndarray:
    # reset to uniform except degenerate slots, which cannot be drawn unless
    # every slot is degenerate; then all restart level and may be repaired
    if not belief.consistent.any():
        log.warning("every particle is degenerate at step %d; restarting from uniform weights",
                    belief.step_index)
        return np.zeros(belief.n_particles)
    return np.where(belief.consistent, 0.0, -np.inf)


def importance_resample(belief: Belief, log_weights=None) -> Belief:
    """Systematically resample slots in proportion to their weights.

    Uses ``belief.log_weight`` unless ``log_weights`` is given. Afterwards all
    log-weights are reset to zero and ``belief.parents`` records lineage.
    When every weight is zero the particle set is left unchanged.
    """
    lw = belief.log_weight if log_weights is None else np.asarray(log_weights, dtype=float)
    idx = _resample_indices(belief, lw)
    _gather(belief, idx)
    belief.log_weight = np.zeros(belief.n_particles)
    return belief


def _resample_indices(belief: Belief, lw: np.ndarray) -> np.ndarray:
    if not np.any(np.isfinite(lw)):
        log.warning("all particle weights are zero at step %d; skipping resampling",
                    belief.step_index)
        return np.arange(belief.n_particles)
    w = np.exp(lw - lw[np.isfinite(lw)].max())
    return systematic_resample(w, belief.resample_rng)


def _gather(belief: Belief, idx: np.ndarray):
    belief.points = belief.points[idx]
    belief.poses = belief.poses[idx]
    belief.consistent = belief.consistent[idx]
    belief.parents = idx


def _replace_bad_arrays(points, poses, inconsistency):
    """Vectorised replace-bad over a batch of particles.

    ``inconsistency[n, j]`` is the total penetration caused by point ``j``.
    Returns repaired copies and a mask of degenerate particles.
    """
    bad = inconsistency > 0
    degenerate = bad.all(axis=1) & (bad.shape[1] > 0)
    if not bad.any():
        return points, poses, degenerate
    points = points.copy()
    poses = poses.copy()
    rows = np.nonzero(bad.any(axis=1) & ~degenerate)[0]
    for n in rows:
        b = bad[n]
        donors = np.nonzero(~b)[0]
        targets = np.nonzero(b)[0]
        p = points[n]
        d2 = np.sum((p[targets][:, None, :] - p[donors][None, :, :]) ** 2, -1)
        k = donors[np.argmin(d2, axis=1)]
        points[n, targets] = points[n, k]
        poses[n, targets] = poses[n, k]
    return points, poses, degenerate


def replace_bad(particle: Particle, grid: SdfGrid, params: TrackerParams,
                extra_poses=None) -> Particle:
    """Replace every penetrating point with its nearest consistent neighbour.

    A point is inconsistent when it lies inside the robot at any stored pose
    (or any of ``extra_poses``). Consistency is judged once on the original
    set. If no point is consistent the particle is returned unchanged with a
    log-weight of ``-inf``.
    """
    c = penetration_matrix(particle.poses, particle.points, grid, params.penetration_offset)
    eps = c.sum(axis=0)
    if extra_poses is not None and len(particle.points):
        extra = np.atleast_2d(np.asarray(extra_poses, dtype=float))
        eps = eps + penetration_matrix(extra, particle.points, grid,
                                       params.penetration_offset).sum(axis=0)
    pts, poses, degenerate = _replace_bad_arrays(particle.points[None], particle.poses[None],
                                                 eps[None])
    if degenerate[0]:
        return Particle(particle.points.copy(), particle.poses.copy(), -math.inf)
    return Particle(pts[0], poses[0], particle.log_weight)


def step_contact(belief: Belief, contacts) -> Belief:
    """Propagate the belief through a step in which ``contacts`` were sensed."""
    contacts = list(contacts)
    if not contacts:
        raise ValueError("step_contact needs at least one contact")
    params = belief.params
    new_p = np.stack([c.p for c in contacts])
    new_x = np.stack([c.x for c in contacts])
    new_dx = np.stack([c.dx for c in contacts])
    n, k = belief.n_particles, len(contacts)
    points = np.concatenate([belief.points, np.broadcast_to(new_p, (n, k, 2))], axis=1)
    poses = np.concatenate([belief.poses, np.broadcast_to(new_x, (n, k, 3))], axis=1)
    m = points.shape[1]

    def work(rows):
        p = points[rows]
        x = poses[rows]
        d2 = np.sum((p[:, :, None, :] - new_p[None, None]) ** 2, -1)
        nearest = np.argmin(d2, axis=-1)
        p_connect = np.exp(-np.min(d2, axis=-1) / params.length_scale)
        u = np.stack([belief.rngs[r].random(m) for r in rows])
        adj = u < p_connect
        shift = new_dx[nearest] * adj[..., None]
        p, x = dynamics_translate(p, x, shift)
        c = penetration_matrix(x, p, belief.grid, params.penetration_offset)
        eps = c.reshape(len(rows), -1).sum(axis=1)
        return p, x, c, eps

    parts = belief._map(work)
    points = np.concatenate([r[0] for r in parts])
    poses = np.concatenate([r[1] for r in parts])
    cmat = np.concatenate([r[2] for r in parts])
    eps = np.concatenate([r[3] for r in parts])
    loglik = -(eps ** 2) / params.penetration_scale

    lw = _prior_log_weight(belief) + loglik
    idx = _resample_indices(belief, lw)
    belief.points, belief.poses = points[idx], poses[idx]
    belief.parents = idx
    inconsistency = cmat[idx].sum(axis=1)
    _finish_step(belief, inconsistency, lw[idx])
    belief.last_contact = True
    return belief


def step_free(belief: Belief, x_t) -> Belief:
    """Update the belief for a step without contact at end-effector pose ``x_t``."""
    params = belief.params
    x_t = np.asarray(x_t, dtype=float)
    if belief.n_points == 0:
        belief.log_weight = np.zeros(belief.n_particles)
        belief.parents = np.arange(belief.n_particles)
        belief.step_index += 1
        belief.last_contact = False
        return belief
    c_t = penetration_matrix(x_t[None], belief.points, belief.grid,
                             params.penetration_offset)[:, 0, :]
    eps = c_t.sum(axis=1)
    loglik = -(eps ** 2) / params.penetration_scale
    lw = _prior_log_weight(belief) + loglik
    idx = _resample_indices(belief, lw)
    _gather(belief, idx)
    inconsistency = c_t[idx]
    stale = np.nonzero(~belief.consistent)[0]
    if len(stale):
        c = penetration_matrix(belief.poses[stale], belief.points[stale], belief.grid,
                               params.penetration_offset)
        inconsistency[stale] += c.sum(axis=1)
    _finish_step(belief, inconsistency, lw[idx])
    belief.last_contact = False
    return belief


def _finish_step(belief: Belief, inconsistency: np.ndarray, step_log_weight: np.ndarray):
    belief.points, belief.poses, degenerate = _replace_bad_arrays(
        belief.points, belief.poses, inconsistency)
    belief.consistent = ~degenerate
    belief.log_weight = np.where(degenerate, -np.inf, step_log_weight)
    belief.step_index += 1


def map_particle(belief: Belief) -> Particle:
    """Most likely particle; ties go to the lowest slot."""
    return belief.particle(map_index(belief))


def map_index(belief: Belief) -> int:
    return int(np.argmax(belief.log_weight))


def segment(particle, params: TrackerParams) -> np.ndarray:
    """Label points by connected components of the thresholded connection graph.

    Labels are numbered in order of first occurrence.
    """
    pts = particle.points if isinstance(particle, Particle) else np.asarray(particle, dtype=float)
    m = len(pts)
    if m == 0:
        return np.zeros(0, dtype=int)
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, -1)
    adj = connection_probability(np.sqrt(d2), params.length_scale) > params.connection_threshold
    _, labels = connected_components(csr_matrix(adj), directed=False)
    return relabel_first_occurrence(labels)


def relabel_first_occurrence(labels) -> np.ndarray:
    labels = np.asarray(labels)
    mapping = {}
    out = np.empty(len(labels), dtype=int)
    for i, l in enumerate(labels.tolist()):
        out[i] = mapping.setdefault(l, len(mapping))
    return out


@dataclass
class SoftTracker:
    """Convenience wrapper feeding simulator observations into a :class:`Belief`."""

    params: TrackerParams
    grid: SdfGrid
    seed: int = 0
    workers: int = 1
    belief: Belief = field(init=False)

    def __post_init__(self):
        self.belief = Belief(self.params, self.grid, self.seed, self.workers)

    def update(self, contacts, x_t):
        if contacts:
            step_contact(self.belief, contacts)
        else:
            step_free(self.belief, x_t)

    def estimate(self) -> tuple[np.ndarray, np.ndarray]:
        p = map_particle(self.belief)
        return p.points, segment(p, self.params)

    def close(self):
        self.belief.close()


def belief_record(belief: Belief, full: bool = False) -> dict:
    """Line-delimited log record for the belief after a step."""
    k = map_index(belief)
    p = belief.particle(k)
    rec = {
        "step": belief.step_index,
        "contact": bool(belief.last_contact),
        "map_index": k,
        "weights": [w if math.isfinite(w) else None for w in belief.log_weight.tolist()],
        "map_points": p.points.tolist(),
        "map_poses": p.poses.tolist(),
        "labels": segment(p, belief.params).tolist(),
    }
    if full:
        rec["points"] = belief.points.tolist()
        rec["poses"] = belief.poses.tolist()
    return rec
