"""Single-estimate contact trackers used as baselines.

Each keeps one set of contact points, re-clusters it whenever a new contact
arrives, and moves every point sharing the new point's cluster with the robot.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .tracker import ContactObservation, dynamics_translate, relabel_first_occurrence


@dataclass
class SingleEstimate:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    poses: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self):
        return len(self.points)


def dbscan(points, eps: float = 0.05, min_neighbors: int = 1) -> np.ndarray:
    """Density clustering; neighbourhoods include the point itself.

    Points that are neither core nor reachable from a core point get their own
    singleton label so labels stay dense.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    m = len(pts)
    if m == 0:
        return np.zeros(0, dtype=int)
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, -1)
    nbr = d2 <= eps * eps
    core = nbr.sum(axis=1) >= min_neighbors
    core_graph = nbr & core[:, None] & core[None, :]
    _, comp = connected_components(csr_matrix(core_graph), directed=False)
    labels = np.full(m, -1)
    labels[core] = comp[core]
    next_label = comp.max() + 1
    for i in np.nonzero(~core)[0]:
        reach = np.nonzero(nbr[i] & core)[0]
        if len(reach):
            labels[i] = comp[reach[0]]
        else:
            labels[i] = next_label
            next_label += 1
    return relabel_first_occurrence(labels)


def _kmeans_once(pts, k, rng, max_iter=100):
    # k-means++ seeding
    centers = [pts[rng.integers(len(pts))]]
    for _ in range(1, k):
        d2 = np.min(np.sum((pts[:, None, :] - np.array(centers)[None]) ** 2, -1), axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(pts[rng.integers(len(pts))])
        else:
            centers.append(pts[rng.choice(len(pts), p=d2 / total)])
    centers = np.array(centers)
    labels = None
    for _ in range(max_iter):
        d2 = np.sum((pts[:, None, :] - centers[None]) ** 2, -1)
        new = np.argmin(d2, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = pts[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    inertia = float(np.sum((pts - centers[labels]) ** 2))
    return inertia, labels


def kmeans(points, k: int, rng: np.random.Generator, restarts: int = 10):
    """Best of ``restarts`` k-means runs: ``(inertia, labels)``."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    best = None
    for _ in range(restarts):
        res = _kmeans_once(pts, k, rng)
        if best is None or res[0] < best[0]:
            best = res
    return best


def kmeans_grow(points, ratio: float = 5.0, rng: np.random.Generator | None = None,
                restarts: int = 10) -> np.ndarray:
    """k-means that adds a cluster while doing so cuts inertia by more than ``ratio``."""
    if ratio <= 1:
        raise ValueError("ratio must exceed 1")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return np.zeros(0, dtype=int)
    rng = np.random.default_rng(0) if rng is None else rng
    n_distinct = len(np.unique(pts, axis=0))
    inertia, labels = kmeans(pts, 1, rng, restarts)
    k = 1
    while k < n_distinct:
        nxt_inertia, nxt_labels = kmeans(pts, k + 1, rng, restarts)
        if inertia == 0:
            break
        if nxt_inertia > 0 and inertia / nxt_inertia <= ratio:
            break
        k, inertia, labels = k + 1, nxt_inertia, nxt_labels
    return relabel_first_occurrence(labels)


@dataclass(frozen=True)
class GmphdParams:
    birth_weight: float = 0.001
    spawn_weight: float = 0.0
    detection_prob: float = 0.3
    survival_prob: float = 0.99
    clutter_density: float = 1e-6
    measurement_std: float = 0.02
    process_std: float = 0.005
    birth_std: float = 0.05
    prune_floor: float = 1e-5
    merge_radius: float = 4.0
    extract_weight: float = 0.5
    max_components: int = 100


@dataclass
class GmphdState:
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    means: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    covs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 2)))
    params: GmphdParams = field(default_factory=GmphdParams)

    def __len__(self):
        return len(self.weights)

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    def targets(self) -> np.ndarray:
        """Means of components heavy enough to count as objects."""
        return self.means[self.weights > self.params.extract_weight]


def _prune_merge(w, m, P, prm: GmphdParams):
    keep = w > prm.prune_floor
    w, m, P = w[keep], m[keep], P[keep]
    out_w, out_m, out_P = [], [], []
    remaining = np.ones(len(w), dtype=bool)
    while remaining.any():
        idx = np.nonzero(remaining)[0]
        j = idx[np.argmax(w[idx])]
        diff = m[idx] - m[j]
        d2 = np.einsum("ni,ij,nj->n", diff, np.linalg.inv(P[j]), diff)
        group = idx[d2 <= prm.merge_radius]
        wg = w[group]
        wsum = wg.sum()
        mean = (wg[:, None] * m[group]).sum(0) / wsum
        dm = m[group] - mean
        cov = (wg[:, None, None] * (P[group] + dm[:, :, None] * dm[:, None, :])).sum(0) / wsum
        out_w.append(wsum)
        out_m.append(mean)
        out_P.append((cov + cov.T) / 2)
        remaining[group] = False
    if not out_w:
        return np.zeros(0), np.zeros((0, 2)), np.zeros((0, 2, 2))
    order = np.argsort(-np.array(out_w), kind="stable")[:prm.max_components]
    return np.array(out_w)[order], np.array(out_m)[order], np.array(out_P)[order]


def gmphd_step(state: GmphdState, measurement=None, dx=None) -> GmphdState:
    """One GM-PHD cycle for a single (possibly absent) position measurement.

    Objects are assumed static except the one that produced the measurement:
    once the update associates the measurement, the component nearest to it
    is translated by the planar part of ``dx``.
    """
    prm = state.params
    eye = np.eye(2)
    w = state.weights * prm.survival_prob
    m = state.means.copy()
    P = state.covs + prm.process_std ** 2 * eye
    if measurement is None:
        w = w * (1 - prm.detection_prob)
        w, m, P = _prune_merge(w, m, P, prm)
        return replace(state, weights=w, means=m, covs=P)

    z = np.asarray(measurement, dtype=float)
    if prm.birth_weight > 0:
        w = np.append(w, prm.birth_weight)
        m = np.vstack([m, z])
        P = np.concatenate([P, (prm.birth_std ** 2 * eye)[None]])
    if len(w) == 0:
        return replace(state, weights=w, means=m.reshape(0, 2), covs=P.reshape(0, 2, 2))

    R = prm.measurement_std ** 2 * eye
    S = P + R
    S_inv = np.linalg.inv(S)
    innov = z - m
    q = np.exp(-0.5 * np.einsum("ni,nij,nj->n", innov, S_inv, innov)) / (
        2 * np.pi * np.sqrt(np.linalg.det(S)))
    K = P @ S_inv
    m_upd = m + np.einsum("nij,nj->ni", K, innov)
    I_K = eye - K
    # Joseph form keeps the covariances symmetric positive definite
    P_upd = I_K @ P @ np.swapaxes(I_K, 1, 2) + K @ R @ np.swapaxes(K, 1, 2)
    det_w = prm.detection_prob * w * q
    denom = prm.clutter_density + det_w.sum()
    w_det = det_w / denom if denom > 0 else np.zeros_like(det_w)
    w_all = np.concatenate([w * (1 - prm.detection_prob), w_det])
    m_all = np.vstack([m, m_upd])
    P_all = np.concatenate([P, P_upd])
    w_all, m_all, P_all = _prune_merge(w_all, m_all, P_all, prm)
    out = replace(state, weights=w_all, means=m_all, covs=P_all)
    return out if dx is None else translate_nearest(out, z, dx)


def translate_nearest(state: GmphdState, z, dx) -> GmphdState:
    """Move the component nearest to ``z`` by the planar part of ``dx``."""
    if len(state) == 0:
        return state
    means = state.means.copy()
    j = int(np.argmin(np.sum((means - np.asarray(z, dtype=float)) ** 2, axis=1)))
    means[j] = means[j] + np.asarray(dx, dtype=float)[:2]
    return replace(state, means=means)


def gmphd_assign(state: GmphdState, points) -> np.ndarray:
    """Label each point with the index of its nearest extracted target."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    targets = state.targets()
    if len(targets) == 0:
        return np.zeros(len(pts), dtype=int)
    d2 = np.sum((pts[:, None, :] - targets[None]) ** 2, -1)
    return np.argmin(d2, axis=1)


def _append(state: SingleEstimate, contact: ContactObservation) -> SingleEstimate:
    return SingleEstimate(np.vstack([state.points, contact.p]),
                          np.vstack([state.poses, contact.x]),
                          np.append(state.labels, 0))


def _move_cluster(est: SingleEstimate, labels, contact: ContactObservation) -> SingleEstimate:
    labels = relabel_first_occurrence(labels)
    moving = labels == labels[-1]
    pts, poses = est.points.copy(), est.poses.copy()
    pts[moving], poses[moving] = dynamics_translate(pts[moving], poses[moving], contact.dx)
    return SingleEstimate(pts, poses, labels)


def baseline_step(state: SingleEstimate, contact: ContactObservation, method: str = "dbscan",
                  *, eps: float = 0.05, min_neighbors: int = 1, ratio: float = 5.0,
                  rng: np.random.Generator | None = None) -> SingleEstimate:
    """Append the contact, re-cluster, and move the new point's cluster by ``dx``."""
    est = _append(state, contact)
    if method == "dbscan":
        labels = dbscan(est.points, eps, min_neighbors)
    elif method in ("kmeans", "kmeans_grow"):
        labels = kmeans_grow(est.points, ratio, rng)
    else:
        raise ValueError(f"unknown clustering method {method!r}")
    return _move_cluster(est, labels, contact)


class ClusteringBaseline:
    """DBSCAN or growing k-means tracker with the same interface as the soft tracker."""

    def __init__(self, method: str = "dbscan", eps: float = 0.05, min_neighbors: int = 1,
                 ratio: float = 5.0, seed: int = 0):
        self.method = method
        self.eps = eps
        self.min_neighbors = min_neighbors
        self.ratio = ratio
        self.rng = np.random.default_rng(seed)
        self.state = SingleEstimate()

    def update(self, contacts, x_t):
        for c in contacts:
            self.state = baseline_step(self.state, c, self.method, eps=self.eps,
                                       min_neighbors=self.min_neighbors, ratio=self.ratio,
                                       rng=self.rng)

    def estimate(self):
        pts = self.state.points
        if self.method == "dbscan":
            labels = dbscan(pts, self.eps, self.min_neighbors)
        else:
            labels = kmeans_grow(pts, self.ratio, self.rng) if len(pts) else np.zeros(0, int)
        return pts, labels

    def close(self):
        pass


class GmphdBaseline:
    """Contact points clustered by nearest GM-PHD target, moved like the clustering baselines."""

    def __init__(self, params: GmphdParams | None = None):
        self.phd = GmphdState(params=params or GmphdParams())
        self.state = SingleEstimate()

    def update(self, contacts, x_t):
        for c in contacts:
            self.phd = gmphd_step(self.phd, c.p)
            est = _append(self.state, c)
            self.state = _move_cluster(est, gmphd_assign(self.phd, est.points), c)
            self.phd = translate_nearest(self.phd, c.p, c.dx)

    def estimate(self):
        return self.state.points, relabel_first_occurrence(gmphd_assign(self.phd, self.state.points))

    def close(self):
        pass
