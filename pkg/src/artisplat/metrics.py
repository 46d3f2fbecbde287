"""Articulation and reconstruction metrics against a planted ground truth."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .artic import JointEdge, KinematicTree
from .geom import RigidTransform, apply
from .splat import SemanticSplat, part_assignment
from .synth import GroundTruth, sample_mixture

AXIS_POS_UNIT = 0.1
DEFAULT_SAMPLES = 200_000

DEFAULT_THRESHOLDS = {
    "axis_angle_deg": 2.0,
    "part_motion_deg": 1.0,
    "part_motion_m": 0.002,
    "cd_moving_mm": 5.0,
}


class UnsupportedMetricError(ValueError):
    pass


def _unit(v, name):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not n > 0:
        raise ValueError(f"{name} must be a non-zero vector")
    return v / n


def axis_angle_error(est, gt) -> float:
    """Angle between two axes in degrees, ignoring their sign (0..90)."""
    c = abs(float(_unit(est, "est") @ _unit(gt, "gt")))
    return math.degrees(math.acos(min(c, 1.0)))


def line_distance(c1, a1, c2, a2) -> float:
    """Minimum distance between the infinite lines ``c1 + s a1`` and ``c2 + t a2``."""
    c1, c2 = np.asarray(c1, dtype=np.float64), np.asarray(c2, dtype=np.float64)
    a1, a2 = _unit(a1, "a1"), _unit(a2, "a2")
    d = c2 - c1
    n = np.cross(a1, a2)
    nn = np.linalg.norm(n)
    if nn < 1e-9:
        return float(np.linalg.norm(d - (d @ a1) * a1))
    return float(abs(d @ n) / nn)


def axis_pos_error(est, gt) -> float:
    """Distance between two revolute axis lines ``(point, direction)`` in units of 0.1 m."""
    for j in (est, gt):
        if isinstance(j, JointEdge) and j.kind != "revolute":
            raise UnsupportedMetricError("axis position is only defined for revolute joints")
    est = (est.joint.center, est.joint.axis) if isinstance(est, JointEdge) else est
    gt = (gt.joint.center, gt.joint.axis) if isinstance(gt, JointEdge) else gt
    return line_distance(est[0], est[1], gt[0], gt[1]) / AXIS_POS_UNIT


def part_motion_error(est: JointEdge, gt: JointEdge, sign=1.0) -> float:
    """``|dv_est - dv_gt|`` with ``dv = v_last - v_first``; degrees for revolute,
    metres for prismatic.  ``sign`` flips the estimate when its axis points
    the other way.  A type mismatch scores ``inf``."""
    if est.kind != gt.kind:
        return math.inf
    err = abs(sign * est.motion - gt.motion)
    return math.degrees(err) if gt.kind == "revolute" else err


def chamfer(a, b) -> float:
    """Symmetric mean nearest-neighbour distance in millimetres."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer needs non-empty point sets")
    ab = cKDTree(b).query(a)[0].mean()
    ba = cKDTree(a).query(b)[0].mean()
    return 1000.0 * 0.5 * (ab + ba)


def world_axis(edge: JointEdge, parent_pose: RigidTransform):
    """Joint axis line in world coordinates given the parent's pose."""
    r = parent_pose.rotation_matrix
    point = edge.joint.center if edge.kind == "revolute" else np.zeros(3)
    return apply(parent_pose, point[None])[0], r @ edge.joint.axis


def assignment_accuracy(splat: SemanticSplat, gt: GroundTruth, t=0) -> float:
    """Fraction of Gaussians whose part label matches the part of the nearest
    planted Gaussian at time ``t``."""
    poses = gt.poses
    pts = np.concatenate([apply(poses[p][t], gt.parts[p].means.astype(np.float64)) for p in sorted(gt.parts)])
    owner = np.concatenate([np.full(len(gt.parts[p]), p) for p in sorted(gt.parts)])
    _, nn = cKDTree(pts).query(splat.means.astype(np.float64))
    return float(np.mean(part_assignment(splat, warn=False) == owner[nn]))


@dataclass
class JointMetrics:
    parent: int
    child: int
    type: str
    found: bool
    type_correct: bool
    axis_angle_deg: float | None
    axis_pos: float | None
    part_motion: float | None

    @property
    def motion_key(self):
        return "part_motion_deg" if self.type == "revolute" else "part_motion_m"


@dataclass
class MetricReport:
    joints: list
    cd_static_mm: float
    cd_moving_mm: float
    cd_whole_mm: float
    tree_depth: int
    num_joints: int
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        for j in d["joints"]:
            for k, v in j.items():
                if isinstance(v, float) and not math.isfinite(v):
                    j[k] = None
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["joints"] = [JointMetrics(**j) for j in d["joints"]]
        return cls(**d)

    def violations(self, thresholds=None):
        """Human-readable list of metrics above their thresholds (missing or
        misclassified joints always count)."""
        th = DEFAULT_THRESHOLDS if thresholds is None else thresholds
        out = []
        for j in self.joints:
            name = f"joint {j.parent}->{j.child}"
            if not j.found:
                out.append(f"{name}: not recovered")
                continue
            if not j.type_correct:
                out.append(f"{name}: wrong joint type")
                continue
            checks = [("axis_angle_deg", j.axis_angle_deg), (j.motion_key, j.part_motion)]
            if j.axis_pos is not None:
                checks.append(("axis_pos", j.axis_pos))
            for key, val in checks:
                if key in th and val is not None and val > th[key]:
                    out.append(f"{name}: {key} {val:.4g} > {th[key]:.4g}")
        for key in ("cd_static_mm", "cd_moving_mm", "cd_whole_mm"):
            if key in th and getattr(self, key) > th[key]:
                out.append(f"{key} {getattr(self, key):.4g} > {th[key]:.4g}")
        return out

    def text(self):
        lines = ["joint           type        axis_angle_deg  axis_pos(0.1m)  part_motion"]
        for j in self.joints:
            def fmt(v):
                return "-" if v is None else f"{v:.4f}"
            motion = "-" if j.part_motion is None else (
                f"{j.part_motion:.4f} deg" if j.type == "revolute" else f"{j.part_motion * 1000:.3f} mm")
            status = "" if j.found and j.type_correct else ("  MISSING" if not j.found else "  WRONG TYPE")
            lines.append(f"{j.parent:>3} -> {j.child:<6}  {j.type:<10}  {fmt(j.axis_angle_deg):>14}  "
                         f"{fmt(j.axis_pos):>14}  {motion}{status}")
        lines.append(f"CD static {self.cd_static_mm:.3f} mm, moving {self.cd_moving_mm:.3f} mm, "
                     f"whole {self.cd_whole_mm:.3f} mm")
        lines.append(f"tree: {self.num_joints} joints, depth {self.tree_depth}")
        for k in sorted(self.extras):
            lines.append(f"{k}: {self.extras[k]}")
        return "\n".join(lines) + "\n"


def _find_edge(tree: KinematicTree, parent, child):
    for e in tree.edges:
        if (e.parent, e.child) == (parent, child):
            return e
        if (e.parent, e.child) == (child, parent):
            return e.reversed()
    return None


def joint_metrics(est_tree: KinematicTree, est_poses: dict, gt: GroundTruth) -> list:
    """Per planted joint: axis, position and motion errors of the matching
    estimated joint, compared as world lines at the first time."""
    out = []
    for g in gt.tree.edges:
        e = _find_edge(est_tree, g.parent, g.child)
        if e is None:
            out.append(JointMetrics(g.parent, g.child, g.kind, False, False, None, None, math.inf))
            continue
        if e.kind != g.kind:
            out.append(JointMetrics(g.parent, g.child, g.kind, True, False, None, None, math.inf))
            continue
        ec, ea = world_axis(e, est_poses[g.parent][0])
        gc, ga = world_axis(g, gt.poses[g.parent][0])
        sign = 1.0 if ea @ ga >= 0 else -1.0
        pos = axis_pos_error((ec, ea), (gc, ga)) if g.kind == "revolute" else None
        out.append(JointMetrics(g.parent, g.child, g.kind, True, True, axis_angle_error(ea, ga), pos,
                                part_motion_error(e, g, sign)))
    return out


def reconstruction_metrics(est_canonical: dict, est_poses: dict, gt: GroundTruth, n=DEFAULT_SAMPLES, seed=0,
                           static_parts=(1,)):
    """Chamfer (mm) between mixture samples of the estimated and planted parts
    at the first time: static parts, moving parts and the whole object.

    Both sides draw ``n`` samples per part with the same seed, so an exact
    estimate scores zero."""
    est, ref = {}, {}
    cfg0 = gt.tree.configuration(0)
    for p in sorted(gt.parts):
        ref[p] = gt.sample_points(p, cfg0, n, seed)
        if p in est_canonical and len(est_canonical[p]):
            est[p] = sample_mixture(est_canonical[p], est_poses[p][0], n, seed)

    def group(parts):
        a = [est[p] for p in parts if p in est]
        b = [ref[p] for p in parts]
        if not a or not b:
            return math.inf
        return chamfer(np.concatenate(a), np.concatenate(b))

    static = [p for p in sorted(gt.parts) if p in static_parts]
    moving = [p for p in sorted(gt.parts) if p not in static_parts]
    return group(static), group(moving) if moving else 0.0, group(sorted(gt.parts))


def evaluate(est_tree: KinematicTree, est_poses: dict, est_canonical: dict, gt: GroundTruth, n=DEFAULT_SAMPLES,
             seed=0, extras=None) -> MetricReport:
    """Full report; ``est_poses[part]`` lists the per-time RigidTransforms."""
    joints = joint_metrics(est_tree, est_poses, gt)
    cd_s, cd_m, cd_w = reconstruction_metrics(est_canonical, est_poses, gt, n, seed, static_parts=(gt.tree.root,))
    return MetricReport(joints, cd_s, cd_m, cd_w, est_tree.depth(), len(est_tree.edges), dict(extras or {}))
