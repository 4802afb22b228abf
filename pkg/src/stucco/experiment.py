"""Experiment harness: simulate once per seed, replay through every method, score."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import yaml

from .baselines import ClusteringBaseline, GmphdBaseline, GmphdParams
from .contact import ResidualModel, calibrate_precision, isolate_contact
from .geometry import Shape, build_sdf
from .metrics import ambiguity_score, contact_error, fmi
from .retrieval import ModelPoints, RetrievalError, grasp_check, select_target
from .sim import (EnvState, SimParams, SimulationFault, discard_trajectory, load_actions, make_env,
                  preset_actions, run_random_walk_policy, run_replay, sim_step)
from .tracker import ContactObservation, SoftTracker, TrackerParams, belief_record

log = logging.getLogger(__name__)

METHODS = ("stucco", "dbscan", "kmeans", "gmphd")
SUMMARY_FIELDS = ("preset", "seed", "method", "status", "n_points", "fmi", "ce_cm", "ambiguity",
                  "grasp")


@dataclass
class ExperimentConfig:
    presets: list = field(default_factory=lambda: ["gap2"])
    methods: list = field(default_factory=lambda: list(METHODS))
    seeds: list = field(default_factory=lambda: list(range(20)))
    out: str = "runs"
    workers: int = 1
    trajectory: str | None = None
    tracker: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    gmphd: dict = field(default_factory=dict)
    dbscan_eps: float = 0.05
    dbscan_min_neighbors: int = 1
    kmeans_ratio: float = 5.0
    # chi-square(3) quantile at a 1e-5 false alarm rate; see README for why this is not 1
    contact_threshold: float = 25.9
    calibration_samples: int = 1000
    calibration_seed: int = 7
    perturb: float = 0.0005
    walk_length: int = 6
    max_steps: int = 500
    sdf_resolution: float = 0.001
    icp_restarts: int = 30
    model_spacing: float = 0.002
    grasp_translation: float = 0.02
    grasp_yaw_deg: float = 15.0
    full_belief_log: bool = False
    write_logs: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        if "preset" in d:
            raise ValueError("use 'presets' (a list) in config files")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_dict(yaml.safe_load(f) or {})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tracker"] = dataclasses.asdict(self.tracker_params())
        d["sim"] = dataclasses.asdict(self.sim_params())
        d["gmphd"] = dataclasses.asdict(self.gmphd_params())
        return d

    def tracker_params(self) -> TrackerParams:
        return TrackerParams(**self.tracker)

    def sim_params(self) -> SimParams:
        return SimParams(**self.sim)

    def gmphd_params(self) -> GmphdParams:
        return GmphdParams(**self.gmphd)

    def validate(self):
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        if not self.seeds:
            raise ValueError("no seeds given")
        self.tracker_params(), self.sim_params(), self.gmphd_params()
        return self


def free_space_wrenches(gripper: Shape, n: int, seed: int, params: SimParams) -> np.ndarray:
    """Wrenches recorded while executing random actions with nothing to touch."""
    empty = EnvState([], np.zeros((0, 3)), gripper, np.zeros(3))
    rng = np.random.default_rng(seed)
    out = []
    for t in range(n):
        empty, rec = sim_step(empty, rng.uniform(-0.03, 0.03, 2), rng, params, step=t)
        out.append(rec.wrench)
    return np.array(out)


@lru_cache(maxsize=16)
def _calibrated(gripper_key: str, n: int, seed: int, threshold: float, sim_key: str):
    params = SimParams(**json.loads(sim_key))
    samples = free_space_wrenches(Shape.from_dict(json.loads(gripper_key)), n, seed, params)
    return calibrate_precision(samples, threshold)


def residual_model(cfg: ExperimentConfig, env: EnvState) -> ResidualModel:
    return _calibrated(json.dumps(env.gripper.to_dict()), cfg.calibration_samples,
                       cfg.calibration_seed, cfg.contact_threshold,
                       json.dumps(dataclasses.asdict(cfg.sim_params()), sort_keys=True))


@dataclass
class Observation:
    step: int
    statistic: float
    contact: ContactObservation | None
    truth: int
    pose: np.ndarray


def observe(records, env: EnvState, model: ResidualModel) -> list[Observation]:
    """Turn simulator records into detector/isolation outputs with ground-truth labels."""
    out = []
    false_pos = 0
    for rec in records:
        stat = model.statistic(rec.wrench)
        obs = None
        truth = 0
        if stat > model.threshold:
            dx = rec.dx
            p = isolate_contact(rec.wrench, rec.pose, env.gripper)
            obs = ContactObservation(p - dx[:2], rec.pose_before, dx)
            t = rec.true_contact_object()
            if t is None:
                false_pos += 1
                truth = -false_pos
            else:
                truth = int(t)
        out.append(Observation(rec.step, stat, obs, truth, rec.pose))
    return out


def make_method(name: str, cfg: ExperimentConfig, grid, seed: int):
    if name == "stucco":
        return SoftTracker(cfg.tracker_params(), grid, seed)
    if name == "dbscan":
        return ClusteringBaseline("dbscan", cfg.dbscan_eps, cfg.dbscan_min_neighbors, seed=seed)
    if name == "kmeans":
        return ClusteringBaseline("kmeans", ratio=cfg.kmeans_ratio, seed=seed)
    if name == "gmphd":
        return GmphdBaseline(cfg.gmphd_params())
    raise ValueError(f"unknown method {name!r}")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def simulate(cfg: ExperimentConfig, preset: str, seed: int):
    env = make_env(preset, seed)
    params = cfg.sim_params()
    if cfg.trajectory:
        records = run_replay(env, load_actions(cfg.trajectory, env.gripper_pose), cfg.perturb, seed,
                             params)
    elif preset.startswith("training"):
        records = run_random_walk_policy(env, walk_length=cfg.walk_length, seed=seed, params=params,
                                         max_steps=cfg.max_steps)
    else:
        records = run_replay(env, preset_actions(preset), cfg.perturb, seed, params)
    return env, records


def run_method(name, cfg, env, records, observations, grid, seed, log_file=None):
    est = make_method(name, cfg, grid, seed)
    truth = []
    try:
        for obs in observations:
            if obs.contact is not None:
                est.update([obs.contact], obs.pose)
                truth.append(obs.truth)
            else:
                est.update([], obs.pose)
            if log_file is not None:
                if name == "stucco":
                    rec = belief_record(est.belief, cfg.full_belief_log)
                else:
                    rec = {"step": obs.step, "contact": obs.contact is not None,
                           "points": est.state.points.tolist(),
                           "labels": est.state.labels.tolist()}
                log_file.write(json.dumps(rec) + "\n")
        pts, labels = est.estimate()
    finally:
        est.close()
    return np.asarray(pts).reshape(-1, 2), np.asarray(labels), np.asarray(truth)


def score(name, cfg, env, records, pts, labels, truth, grid, seed) -> dict:
    final = env.copy()
    if records:
        final.poses = records[-1].object_poses.copy()
        final.gripper_pose = records[-1].pose.copy()
    row = {"method": name, "n_points": len(pts)}
    row["fmi"] = fmi(labels, truth) if len(pts) >= 2 else None
    ce = contact_error(pts, final)
    row["ce_cm"] = None if ce is None else ce * 100
    row["grasp"] = None
    row["retrieval"] = None
    if final.target_id is not None:
        model = ModelPoints.from_shape(final.target.shape, cfg.model_spacing)
        segments = [pts[labels == l] for l in np.unique(labels)]
        try:
            rep = select_target(segments, model, final.gripper_pose, grid, cfg.icp_restarts, seed)
            rep.grasp = grasp_check(rep.pose, final, cfg.grasp_translation,
                                    math.radians(cfg.grasp_yaw_deg))
            row["grasp"] = rep.grasp
            row["retrieval"] = rep.to_dict()
        except RetrievalError as e:
            log.warning("%s seed %d: %s", name, seed, e)
            row["grasp"] = False
    return row


def run_seed(cfg: ExperimentConfig, preset: str, seed: int) -> list[dict]:
    """All methods on one simulated trajectory."""
    out_dir = Path(cfg.out) / preset / f"seed{seed:03d}"
    try:
        env, records = simulate(cfg, preset, seed)
    except SimulationFault as e:
        log.error("%s seed %d failed: %s", preset, seed, e)
        return [{"preset": preset, "seed": seed, "method": m, "status": "sim_fault"}
                for m in cfg.methods]
    if preset.startswith("training") and not cfg.trajectory and discard_trajectory(records):
        log.info("%s seed %d discarded: in contact less than 5%% of the time", preset, seed)
        return [{"preset": preset, "seed": seed, "method": m, "status": "discarded"}
                for m in cfg.methods]
    grid = build_sdf(env.gripper, cfg.sdf_resolution)
    model = residual_model(cfg, env)
    observations = observe(records, env, model)
    amb = ambiguity_score(records, env)
    if cfg.write_logs:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "trajectory.jsonl", "w") as f:
            for rec, obs in zip(records, observations):
                d = rec.to_dict()
                d["statistic"] = obs.statistic
                d["detected"] = obs.contact is not None
                f.write(json.dumps(d) + "\n")
    rows = []
    for name in cfg.methods:
        log_file = open(out_dir / f"{name}.jsonl", "w") if cfg.write_logs else None
        try:
            pts, labels, truth = run_method(name, cfg, env, records, observations, grid, seed,
                                            log_file)
        finally:
            if log_file is not None:
                log_file.close()
        row = score(name, cfg, env, records, pts, labels, truth, grid, seed)
        row.update(preset=preset, seed=seed, status="ok", ambiguity=amb)
        if cfg.write_logs:
            with open(out_dir / f"{name}_final.json", "w") as f:
                json.dump({"points": pts.tolist(), "labels": labels.tolist(),
                           "truth": truth.tolist(), "retrieval": row["retrieval"]}, f)
        rows.append(row)
    return rows


def _run_cell(args):
    cfg, preset, seed = args
    return run_seed(cfg, preset, seed)


def run_experiment(cfg: ExperimentConfig) -> list[dict]:
    """Run every (preset, seed) cell, write summaries, return the summary rows."""
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.yaml", "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)
    cells = [(cfg, p, s) for p in cfg.presets for s in cfg.seeds]
    if cfg.workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    rows = [r for cell in results for r in cell]
    failed = sorted({(r["preset"], r["seed"]) for r in rows if r["status"] == "sim_fault"})
    for p, s in failed:
        log.warning("excluding %s seed %d (simulation fault)", p, s)
    write_summary(rows, out / "summary.csv")
    write_stats(rows, out / "stats.csv")
    emit_plot_data(rows, out)
    return rows


def summary_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for r in rows:
        w.writerow([_fmt(r.get(k)) for k in SUMMARY_FIELDS])
    return buf.getvalue()


def write_summary(rows, path):
    Path(path).write_text(summary_csv(rows))


def method_stats(rows) -> list[dict]:
    """Median and standard deviation per (preset, method), shaped like a results table."""
    out = []
    keys = sorted({(r["preset"], r["method"]) for r in rows},
                  key=lambda k: (k[0], METHODS.index(k[1]) if k[1] in METHODS else 99))
    for preset, method in keys:
        sel = [r for r in rows if r["preset"] == preset and r["method"] == method
               and r["status"] == "ok"]
        d = {"preset": preset, "method": method, "runs": len(sel)}
        for k in ("fmi", "ce_cm", "ambiguity"):
            v = np.array([r[k] for r in sel if r.get(k) is not None], dtype=float)
            d[f"{k}_median"] = float(np.median(v)) if len(v) else None
            d[f"{k}_std"] = float(np.std(v)) if len(v) else None
        g = [r["grasp"] for r in sel if r.get("grasp") is not None]
        d["grasp_rate"] = float(np.mean(g)) if g else None
        out.append(d)
    return out


def write_stats(rows, path):
    stats = method_stats(rows)
    fields = ["preset", "method", "runs", "fmi_median", "fmi_std", "ce_cm_median", "ce_cm_std",
              "ambiguity_median", "ambiguity_std", "grasp_rate"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(fields)
        for d in stats:
            w.writerow([_fmt(d[k]) for k in fields])
    return stats


def read_summary(path) -> list[dict]:
    rows = []
    with open(path) as f:
        for r in csv.DictReader(f):
            d = dict(r)
            d["seed"] = int(d["seed"])
            for k in ("fmi", "ce_cm", "ambiguity"):
                d[k] = float(d[k]) if d[k] else None
            d["n_points"] = int(d["n_points"]) if d["n_points"] else 0
            d["grasp"] = bool(int(d["grasp"])) if d["grasp"] else None
            rows.append(d)
    return rows


PLOT_FIELDS = ("method", "runs", "fmi_median", "fmi_p20", "fmi_p80", "ce_cm_median", "ce_cm_p20",
               "ce_cm_p80")
AMBIGUITY_CUTOFF = 0.3


def plot_table(rows, min_ambiguity: float | None = None) -> list[dict]:
    """Per-method median and 20/80th percentiles of FMI and CE over ok runs."""
    sel = [r for r in rows if r.get("status") == "ok"]
    if min_ambiguity is not None:
        sel = [r for r in sel if r.get("ambiguity") is not None and r["ambiguity"] >= min_ambiguity]
    methods = sorted({r["method"] for r in sel}, key=lambda m: (METHODS.index(m) if m in METHODS else 99, m))
    out = []
    for m in methods:
        d = {"method": m, "runs": sum(r["method"] == m for r in sel)}
        for k in ("fmi", "ce_cm"):
            v = np.array([r[k] for r in sel if r["method"] == m and r.get(k) is not None], dtype=float)
            q = np.percentile(v, [50, 20, 80]) if len(v) else [None] * 3
            d[f"{k}_median"], d[f"{k}_p20"], d[f"{k}_p80"] = (None if x is None else float(x) for x in q)
        out.append(d)
    return out


def emit_plot_data(rows, out_dir) -> dict:
    """Write ``plot_all.csv`` and ``plot_ambiguous.csv`` (runs with ambiguity >= 0.3)."""
    tables = {"all": plot_table(rows), "ambiguous": plot_table(rows, AMBIGUITY_CUTOFF)}
    if not tables["ambiguous"]:
        log.warning("no runs with ambiguity >= %.1f; the filtered plot table is empty", AMBIGUITY_CUTOFF)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, table in tables.items():
        with open(out / f"plot_{name}.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(PLOT_FIELDS)
            for d in table:
                w.writerow([_fmt(d[k]) for k in PLOT_FIELDS])
    return tables
