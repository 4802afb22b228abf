"""Quasi-static planar pushing simulator.

The gripper translates by commanded steps. Movable objects touched by the
gripper, directly or through a chain of other objects, are projected out of
penetration along the minimum translation direction; they translate only and
never rotate. Immovable walls stop the chain, in which case the gripper motion
is truncated at the last feasible position.

The simulated end-effector wrench is a linear spring on the displacement each
contact transmitted during the step (or on the residual command when blocked),
plus Gaussian sensor noise.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .geometry import Circle, Shape, contact_point, penetration, shape_distance

log = logging.getLogger(__name__)

MAX_ACTION = 0.03


class SimulationFault(RuntimeError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    id: int
    name: str
    shape: Shape
    pose: np.ndarray
    movable: bool = True
    mass_class: float = 1.0

    @property
    def radius(self) -> float:
        lo, hi = self.shape.bounds()
        return float(np.max(np.linalg.norm(np.stack([lo, hi, [lo[0], hi[1]], [hi[0], lo[1]]]), axis=1)))


@dataclass
class EnvState:
    objects: list[ObjectSpec]
    poses: np.ndarray
    gripper: Shape
    gripper_pose: np.ndarray
    target_id: int | None = None
    name: str = ""
    goal: np.ndarray | None = None

    def copy(self) -> "EnvState":
        out = copy.copy(self)
        out.poses = self.poses.copy()
        out.gripper_pose = self.gripper_pose.copy()
        return out

    def object_index(self, obj_id: int) -> int:
        for i, o in enumerate(self.objects):
            if o.id == obj_id:
                return i
        raise KeyError(obj_id)

    @property
    def target(self) -> ObjectSpec:
        return self.objects[self.object_index(self.target_id)]

    @property
    def target_pose(self) -> np.ndarray:
        return self.poses[self.object_index(self.target_id)]

    def max_interpenetration(self) -> float:
        worst = 0.0
        bodies = [(self.gripper, self.gripper_pose)] + list(zip((o.shape for o in self.objects), self.poses))
        for a in range(len(bodies)):
            for b in range(a + 1, len(bodies)):
                if a > 0 and not (self.objects[a - 1].movable or self.objects[b - 1].movable):
                    continue
                worst = max(worst, penetration(bodies[a][0], bodies[a][1], bodies[b][0], bodies[b][1])[0])
        return worst


@dataclass(frozen=True)
class ActionStep:
    dx: float
    dy: float

    def __post_init__(self):
        if abs(self.dx) > MAX_ACTION + 1e-12 or abs(self.dy) > MAX_ACTION + 1e-12:
            raise ValueError(f"action ({self.dx}, {self.dy}) exceeds {MAX_ACTION} per axis")

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy])


@dataclass(frozen=True)
class SimParams:
    stiffness: float = 500.0
    force_noise: float = 0.05
    torque_noise: float = 0.005
    substep: float = 0.002
    max_iters: int = 20
    tolerance: float = 1e-4


@dataclass
class StepRecord:
    step: int
    action: np.ndarray
    pose_before: np.ndarray
    pose: np.ndarray
    wrench: np.ndarray
    contacts: list[dict]
    object_poses: np.ndarray

    @property
    def dx(self) -> np.ndarray:
        d = self.pose - self.pose_before
        d[2] = math.remainder(d[2], 2 * math.pi)
        return d

    def true_contact_object(self) -> int | None:
        """Object carrying the largest contact force this step."""
        if not self.contacts:
            return None
        return max(self.contacts, key=lambda c: c["force"])["object_id"]

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "action": self.action.tolist(),
            "pose_before": self.pose_before.tolist(),
            "pose": self.pose.tolist(),
            "wrench": self.wrench.tolist(),
            "contacts": [{k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in c.items()}
                         for c in self.contacts],
            "object_poses": self.object_poses.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepRecord":
        return cls(int(d["step"]), np.array(d["action"]), np.array(d["pose_before"]),
                   np.array(d["pose"]), np.array(d["wrench"]),
                   [dict(c, point=np.array(c["point"]), normal=np.array(c["normal"]))
                    for c in d["contacts"]],
                   np.array(d["object_poses"]))


def _overlap(shape_a, pose_a, rad_a, shape_b, pose_b, rad_b):
    d = pose_a[:2] - pose_b[:2]
    if d @ d >= (rad_a + rad_b) ** 2:
        return 0.0, None
    return penetration(shape_a, pose_a, shape_b, pose_b)


class _World:
    """Cached geometry for one environment during a step."""

    def __init__(self, env: EnvState, params: SimParams):
        self.env = env
        self.params = params
        self.shapes = [o.shape for o in env.objects]
        self.radii = [o.radius for o in env.objects]
        self.movable = [o.movable for o in env.objects]
        lo, hi = env.gripper.bounds()
        self.g_radius = float(max(np.linalg.norm(lo), np.linalg.norm(hi),
                                  np.linalg.norm([lo[0], hi[1]]), np.linalg.norm([hi[0], lo[1]])))

    def resolve(self, gripper_pose, poses):
        """Push objects out of the gripper at ``gripper_pose``.

        Returns ``(poses, pushes, reached)`` or ``None`` when a wall blocks the motion
        or the chain does not settle. ``reached`` flags objects the contact chain touched.
        """
        eps = 1e-12
        g = self.env.gripper
        poses = poses.copy()
        pushes = np.zeros((len(poses), 2))
        reached = np.zeros(len(poses), dtype=bool)
        for i, mov in enumerate(self.movable):
            if not mov:
                depth, _ = _overlap(g, gripper_pose, self.g_radius, self.shapes[i], poses[i], self.radii[i])
                if depth > eps:
                    return None
        order = sorted((i for i, m in enumerate(self.movable) if m),
                       key=lambda i: float(np.hypot(*(poses[i, :2] - gripper_pose[:2]))))
        for _ in range(self.params.max_iters):
            changed = False
            for i in order:
                depth, n = _overlap(g, gripper_pose, self.g_radius, self.shapes[i], poses[i], self.radii[i])
                if depth > eps:
                    poses[i, :2] += n * depth
                    pushes[i] += n * depth
                    reached[i] = True
                    changed = True
            for a, i in enumerate(order):
                for j in range(len(poses)):
                    if j == i or (self.movable[j] and j in order[:a + 1]):
                        continue
                    depth, n = _overlap(self.shapes[i], poses[i], self.radii[i],
                                        self.shapes[j], poses[j], self.radii[j])
                    if depth <= eps:
                        continue
                    if not self.movable[j]:
                        return None
                    poses[j, :2] += n * depth
                    reached[j] = True
                    changed = True
            if not changed:
                return poses, pushes, reached
        return None

    def touching(self, gripper_pose, poses, tol=1e-6):
        out = []
        for i in range(len(poses)):
            d = gripper_pose[:2] - poses[i, :2]
            if d @ d > (self.g_radius + self.radii[i] + tol) ** 2:
                continue
            if shape_distance(self.env.gripper, gripper_pose, self.shapes[i], poses[i]) <= tol:
                out.append(i)
        return out


def sim_step(env: EnvState, action, rng: np.random.Generator | None = None,
             params: SimParams | None = None, step: int = 0) -> tuple[EnvState, StepRecord]:
    """Advance the environment by one commanded gripper translation."""
    params = params or SimParams()
    a = action.as_array() if isinstance(action, ActionStep) else np.asarray(action, dtype=float)
    if np.any(np.abs(a) > MAX_ACTION + 1e-9):
        raise ValueError(f"action {a} exceeds {MAX_ACTION} per axis")
    world = _World(env, params)
    g0 = env.gripper_pose.copy()
    g = g0.copy()
    poses = env.poses.copy()
    pushes = np.zeros((len(poses), 2))
    reached = np.zeros(len(poses), dtype=bool)
    n_sub = max(1, int(math.ceil(np.max(np.abs(a)) / params.substep)))
    delta = np.r_[a / n_sub, 0.0]
    residual = np.zeros(2)
    for k in range(n_sub):
        res = world.resolve(g + delta, poses)
        if res is not None:
            g = g + delta
            poses, push, hit = res
            pushes += push
            reached |= hit
            continue
        lo, hi = 0.0, 1.0
        best = None
        for _ in range(30):
            mid = (lo + hi) / 2
            r = world.resolve(g + mid * delta, poses)
            if r is None:
                hi = mid
            else:
                lo, best = mid, r
        if best is not None:
            g = g + lo * delta
            poses, push, hit = best
            pushes += push
            reached |= hit
        residual = a * (n_sub - k - lo) / n_sub
        break

    forces = []
    for i in world.touching(g, poses):
        _, n = penetration(env.gripper, g, world.shapes[i], poses[i])
        f = -params.stiffness * pushes[i]
        if residual @ residual > 0:
            f = f - params.stiffness * max(0.0, float(residual @ n)) * n
        mag = float(np.hypot(*f))
        if mag <= 0:
            continue
        pt = contact_point(env.gripper, g, world.shapes[i], poses[i])
        forces.append({"object_id": env.objects[i].id, "point": pt, "normal": n, "force": mag,
                       "f": f})
    wrench = np.zeros(3)
    for c in forces:
        r = c["point"] - g[:2]
        wrench += np.r_[c["f"], r[0] * c["f"][1] - r[1] * c["f"][0]]
    if rng is not None:
        wrench = wrench + rng.normal(0.0, 1.0, 3) * np.array(
            [params.force_noise, params.force_noise, params.torque_noise])

    stray = np.any(poses != env.poses, axis=1) & ~reached
    if stray.any():
        raise SimulationFault(f"objects {np.nonzero(stray)[0].tolist()} moved outside the contact chain "
                              f"at step {step}")
    new_env = env.copy()
    new_env.poses = poses
    new_env.gripper_pose = g
    pen = new_env.max_interpenetration()
    if pen > params.tolerance:
        log.error("simulation fault at step %d: interpenetration %.2e m", step, pen)
        raise SimulationFault(f"unresolved interpenetration {pen:.3g} m at step {step}")
    contacts = [{k: v for k, v in c.items() if k != "f"} for c in forces]
    rec = StepRecord(step, a.copy(), g0, g.copy(), wrench, contacts, poses.copy())
    return new_env, rec


def _perturbed(actions, bound: float, rng: np.random.Generator):
    for act in actions:
        a = act.as_array() if isinstance(act, ActionStep) else np.asarray(act, dtype=float)
        noise = rng.uniform(-bound, bound, 2) if bound > 0 else np.zeros(2)
        yield np.clip(a + noise, -MAX_ACTION, MAX_ACTION)


def run_replay(env: EnvState, actions, perturb: float = 0.0005, seed: int = 0,
               params: SimParams | None = None) -> list[StepRecord]:
    """Replay an authored action sequence with uniform per-axis perturbation."""
    perturb_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
    prng = np.random.default_rng(perturb_seq)
    nrng = np.random.default_rng(noise_seq)
    records = []
    for t, a in enumerate(_perturbed(actions, perturb, prng)):
        env, rec = sim_step(env, a, nrng, params, step=t)
        records.append(rec)
    return records


def run_random_walk_policy(env: EnvState, goal=None, walk_length: int = 6, seed: int = 0,
                           params: SimParams | None = None, max_steps: int = 500,
                           detector=None) -> list[StepRecord]:
    """Greedy motion to ``goal`` that random-walks for ``walk_length`` steps after each contact.

    ``detector`` maps a step record to a contact flag; by default any simulated
    contact force counts.
    """
    goal = env.goal if goal is None else np.asarray(goal, dtype=float)
    if goal is None:
        raise ValueError("no goal given")
    detector = detector or (lambda rec: bool(rec.contacts))
    policy_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
    prng = np.random.default_rng(policy_seq)
    nrng = np.random.default_rng(noise_seq)
    records = []
    walk = 0
    for t in range(max_steps):
        pos = env.gripper_pose[:2]
        if walk == 0 and np.hypot(*(goal - pos)) < 0.01:
            break
        if walk > 0:
            a = prng.uniform(-MAX_ACTION, MAX_ACTION, 2)
            walk -= 1
        else:
            a = np.clip(goal - pos, -MAX_ACTION, MAX_ACTION)
        env, rec = sim_step(env, a, nrng, params, step=t)
        records.append(rec)
        if walk == 0 and detector(rec):
            walk = walk_length
    return records


def contact_fraction(records) -> float:
    if not records:
        return 0.0
    return sum(bool(r.contacts) for r in records) / len(records)


def discard_trajectory(records, min_fraction: float = 0.05) -> bool:
    """Training trajectories in contact too rarely are dropped."""
    return contact_fraction(records) < min_fraction


# --- presets -----------------------------------------------------------------

PRESETS = ("FB", "BC", "IB", "TC", "gap2", "training1", "training2", "training3", "training4")
BOR_PRESETS = ("FB", "BC", "IB", "TC")


def preset_path(name: str) -> Path:
    return Path(str(resources.files("stucco") / "presets" / f"{name}.yaml"))


def load_preset(name_or_path) -> dict:
    p = Path(name_or_path)
    if not p.suffix:
        if name_or_path not in PRESETS:
            raise ValueError(f"unknown preset {name_or_path!r}; choose from {', '.join(PRESETS)}")
        p = preset_path(name_or_path)
    with open(p) as f:
        return yaml.safe_load(f)


def parse_actions(entries, start=None) -> list[ActionStep]:
    """Expand ``[dx, dy]``, ``[dx, dy, repeat]`` or ``{to: [x, y], step: s}`` entries into steps.

    Waypoints are reached in straight lines of at most ``step`` (default ``MAX_ACTION``)
    per axis, measured from ``start`` plus all earlier steps (the authored, unperturbed path).
    """
    out = []
    cur = np.zeros(2) if start is None else np.asarray(start, dtype=float)[:2].copy()
    for e in entries:
        if isinstance(e, dict):
            if start is None:
                raise ValueError("waypoint actions need a start position")
            d = np.asarray(e["to"], dtype=float) - cur
            step = min(float(e.get("step", MAX_ACTION)), MAX_ACTION)
            if step <= 0:
                raise ValueError("waypoint step must be positive")
            n = max(1, math.ceil(np.abs(d).max() / step - 1e-9))
            steps = [ActionStep(*(d / n)) for _ in range(n)] if np.abs(d).max() > 0 else []
        else:
            n = int(e[2]) if len(e) > 2 else 1
            steps = [ActionStep(float(e[0]), float(e[1])) for _ in range(n)]
        for a in steps:
            cur += (a.dx, a.dy)
        out.extend(steps)
    return out


def load_actions(path, start=None) -> list[ActionStep]:
    """Actions from a YAML list, or a mapping with ``actions`` and an optional ``start``."""
    with open(path) as f:
        d = yaml.safe_load(f)
    if isinstance(d, dict):
        return parse_actions(d["actions"], d.get("start", start))
    return parse_actions(d, start)


def env_from_config(cfg: dict, seed: int = 0) -> EnvState:
    objects = []
    for i, o in enumerate(cfg["objects"]):
        objects.append(ObjectSpec(
            id=int(o.get("id", i)), name=o.get("name", f"obj{i}"),
            shape=Shape.from_dict(o["shape"]),
            pose=np.array([*o["pose"][:2], math.radians(o["pose"][2]) if len(o["pose"]) > 2 else 0.0]),
            movable=bool(o.get("movable", True)), mass_class=float(o.get("mass_class", 1.0))))
    gripper = Shape.from_dict(cfg["gripper"]["shape"])
    start = np.array([*cfg["gripper"]["start"][:2], 0.0])
    goal = np.array(cfg["goal"], dtype=float) if "goal" in cfg else None
    env = EnvState(objects, np.stack([o.pose for o in objects]), gripper, start,
                   cfg.get("target"), cfg.get("name", ""), goal)
    rnd = cfg.get("randomize")
    if rnd:
        rng = np.random.default_rng(seed)
        for _ in range(1000):
            env.gripper_pose = np.r_[rng.uniform(rnd["start"][0], rnd["start"][1]), 0.0]
            env.goal = rng.uniform(rnd["goal"][0], rnd["goal"][1])
            if min(shape_distance(gripper, env.gripper_pose, o.shape, p)
                   for o, p in zip(objects, env.poses)) > 0.01:
                break
        else:
            raise ValueError("could not place gripper start outside all objects")
    if env.max_interpenetration() > 1e-6:
        raise ValueError(f"preset {env.name!r} starts with interpenetrating bodies")
    return env


def make_env(preset: str, seed: int = 0) -> EnvState:
    """Build a named environment; training presets randomise start and goal by ``seed``."""
    return env_from_config(load_preset(preset), seed)


def preset_actions(preset: str) -> list[ActionStep]:
    cfg = load_preset(preset)
    if "actions" not in cfg:
        raise ValueError(f"preset {preset!r} has no authored action sequence")
    return parse_actions(cfg["actions"], cfg["gripper"]["start"])
