"""Soft tracking of contact points for planar manipulation in clutter."""
from .geometry import Circle, Polygon, Pose2, Shape, SdfGrid, build_sdf, penetration
from .metrics import ambiguity_score, contact_error, fmi
from .retrieval import ModelPoints, grasp_check, icp, select_target
from .sim import EnvState, make_env, run_random_walk_policy, run_replay, sim_step
from .tracker import ContactObservation, SoftTracker, TrackerParams, segment

__version__ = "0.1.0"
