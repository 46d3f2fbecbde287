"""Joint fitting between part pairs, joint graphs, kinematic trees and FK.

Joint conventions (``x`` in the child part's frame, result in the parent's):

* revolute  ``J(theta) = Trans(c) ∘ Rot(a, theta) ∘ r``
* prismatic ``J(d)     = Trans(a * d) ∘ c``

so the child's pose is ``P_parent ∘ J(v)``.  With this ordering the
revolute centre ``c`` is a point on the rotation axis in the parent frame.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from itertools import combinations, permutations

import numpy as np
import torch
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .geom import (RigidTransform, apply, axis_angle_to_matrix, compose, inverse, matrix_to_axis_angle)

logger = logging.getLogger(__name__)

FIXED_ANGLE = math.radians(0.5)
FIXED_DISTANCE = 1e-3


class UnreachablePartsWarning(UserWarning):
    pass


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("axis must be non-zero")
    return v / n


def _se3_to_vec(t: RigidTransform):
    return np.concatenate([t.translation, Rotation.from_matrix(t.rotation_matrix).as_rotvec()])


def _vec_to_se3(v):
    v = np.asarray(v, dtype=np.float64)
    return RigidTransform.from_rotation_matrix(Rotation.from_rotvec(v[3:6]).as_matrix(), v[:3])


@dataclass
class RevoluteJoint:
    center: np.ndarray
    axis: np.ndarray
    offset: RigidTransform = field(default_factory=RigidTransform)

    kind = "revolute"

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.axis = _unit(self.axis)

    def transform(self, angle) -> RigidTransform:
        rot = RigidTransform.from_rotation_matrix(axis_angle_to_matrix(self.axis, float(angle)))
        return compose(RigidTransform.from_translation(self.center), compose(rot, self.offset))

    def reversed(self) -> "RevoluteJoint":
        """Joint giving the parent in the child's frame at the same configuration."""
        m = compose(inverse(self.offset), RigidTransform.from_translation(-self.center))
        c_new = m.translation + m.rotation_matrix @ self.center
        a_new = -(m.rotation_matrix @ self.axis)
        return RevoluteJoint(c_new, a_new, compose(RigidTransform.from_translation(-c_new), m))

    @property
    def parameters(self):
        return np.concatenate([self.center, self.axis, _se3_to_vec(self.offset)])

    @classmethod
    def from_parameters(cls, p):
        p = np.asarray(p, dtype=np.float64)
        return cls(p[0:3], p[3:6], _vec_to_se3(p[6:12]))


@dataclass
class PrismaticJoint:
    offset: RigidTransform
    axis: np.ndarray

    kind = "prismatic"

    def __post_init__(self):
        self.axis = _unit(self.axis)

    def transform(self, displacement) -> RigidTransform:
        return compose(RigidTransform.from_translation(self.axis * float(displacement)), self.offset)

    def reversed(self) -> "PrismaticJoint":
        return PrismaticJoint(inverse(self.offset), -(self.offset.rotation_matrix.T @ self.axis))

    @property
    def parameters(self):
        return np.concatenate([_se3_to_vec(self.offset), self.axis])

    @classmethod
    def from_parameters(cls, p):
        p = np.asarray(p, dtype=np.float64)
        return cls(_vec_to_se3(p[0:6]), p[6:9])


def revolute_transform(j: RevoluteJoint, angle) -> RigidTransform:
    return j.transform(angle)


def prismatic_transform(j: PrismaticJoint, displacement) -> RigidTransform:
    return j.transform(displacement)


_JOINT_TYPES = {"revolute": RevoluteJoint, "prismatic": PrismaticJoint}


@dataclass
class JointEdge:
    """A joint hypothesis between ``parent`` and ``child`` part ids."""

    parent: int
    child: int
    kind: str
    joint: object
    configs: np.ndarray
    score: float = 0.0
    fixed: bool = False

    def __post_init__(self):
        self.configs = np.asarray(self.configs, dtype=np.float64)

    def transform(self, value) -> RigidTransform:
        return self.joint.transform(value)

    def reversed(self) -> "JointEdge":
        return JointEdge(self.child, self.parent, self.kind, self.joint.reversed(), self.configs.copy(), self.score,
                         self.fixed)

    @property
    def motion(self):
        return float(self.configs[-1] - self.configs[0])

    def to_dict(self):
        return {"parent": self.parent, "child": self.child, "type": self.kind, "fixed": self.fixed,
                "parameters": self.joint.parameters.tolist(), "configurations": self.configs.tolist(),
                "add": self.score}

    @classmethod
    def from_dict(cls, d):
        joint = _JOINT_TYPES[d["type"]].from_parameters(d["parameters"])
        return cls(int(d["parent"]), int(d["child"]), d["type"], joint, d["configurations"], float(d["add"]),
                   bool(d.get("fixed", False)))


# ---------------------------------------------------------------------------
# pair fitting
# ---------------------------------------------------------------------------

@dataclass
class JointFitConfig:
    steps: int = 300
    lr: float = 1e-3


@dataclass
class PairResult:
    child: int
    parent: int
    revolute: JointEdge
    prismatic: JointEdge
    gap: float = 0.0     # closest distance between the two parts at the first time


def _skew(w):
    z = torch.zeros((), dtype=w.dtype)
    return torch.stack([torch.stack([z, -w[2], w[1]]), torch.stack([w[2], z, -w[0]]),
                        torch.stack([-w[1], w[0], z])])


def _rodrigues_batch(axis, angles):
    k = _skew(axis)
    s = torch.sin(angles)[:, None, None]
    c = (1 - torch.cos(angles))[:, None, None]
    return torch.eye(3, dtype=axis.dtype) + s * k + c * (k @ k)


def add_score(joint, configs, points, targets):
    """Mean over times of the mean distance between ``J(v_t) x`` and the
    targets ``Y_t`` (all in the parent frame)."""
    total = 0.0
    for v, y in zip(configs, targets):
        total += np.linalg.norm(apply(joint.transform(v), points) - y, axis=1).mean()
    return total / len(targets)


def _relative_targets(points, poses_child, poses_parent):
    rel = [compose(inverse(pk), pj) for pj, pk in zip(poses_child, poses_parent)]
    return rel, [apply(m, points) for m in rel]


def _init_revolute(rel, points, bound=None):
    d = compose(rel[-1], inverse(rel[0]))
    axis, angle = matrix_to_axis_angle(d.rotation_matrix)
    child_centroid = apply(rel[0], points).mean(axis=0)
    mid = 0.5 * child_centroid if bound is None else bound[0]
    if angle < 1e-9:
        c = mid
    else:
        # fixed points of d satisfy (I - R) c = t; pick the one nearest the centroid midpoint
        c, *_ = np.linalg.lstsq(np.eye(3) - d.rotation_matrix, d.translation, rcond=None)
        c = c + axis * (axis @ (mid - c))
    if bound is not None:
        c = _clip_ball(c, *bound)
    offset = compose(RigidTransform.from_translation(-c), rel[0])
    configs = np.zeros(len(rel))
    for t in range(1, len(rel)):
        dt = compose(rel[t], inverse(rel[0]))
        ax, ang = matrix_to_axis_angle(dt.rotation_matrix)
        configs[t] = ang * np.sign(ax @ axis) if ang > 0 else 0.0
    return RevoluteJoint(c, axis, offset), configs


def _init_prismatic(rel):
    d = compose(rel[-1], inverse(rel[0]))
    dist = np.linalg.norm(d.translation)
    axis = d.translation / dist if dist > 1e-12 else np.array([1.0, 0.0, 0.0])
    configs = np.array([axis @ (compose(r, inverse(rel[0])).translation) for r in rel])
    return PrismaticJoint(rel[0], axis), configs


def _clip_ball(x, center, radius):
    d = x - center
    n = np.linalg.norm(d)
    return x if n <= radius else center + d * (radius / n)


def joint_region(points_child, rel0, points_parent):
    """Bounding sphere (parent frame, first time) of both parts' points."""
    pts = apply(rel0, points_child)
    if points_parent is not None and len(points_parent):
        pts = np.concatenate([pts, np.asarray(points_parent, dtype=np.float64)])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = 0.5 * (lo + hi)
    return center, float(np.linalg.norm(pts - center, axis=1).max())


def _refine(kind, joint, configs, points, targets, cfg: JointFitConfig, bound=None):
    dt = torch.float64
    x = torch.tensor(points, dtype=dt)
    ys = [torch.tensor(y, dtype=dt) for y in targets]
    v = torch.tensor(configs, dtype=dt, requires_grad=True)
    axis = torch.tensor(joint.axis, dtype=dt, requires_grad=True)
    dw = torch.zeros(3, dtype=dt, requires_grad=True)
    if kind == "revolute":
        c = torch.tensor(joint.center, dtype=dt, requires_grad=True)
        r_rot0 = torch.tensor(joint.offset.rotation_matrix, dtype=dt)
        r_t = torch.tensor(joint.offset.translation, dtype=dt, requires_grad=True)
        params = [c, axis, dw, r_t, v]
    else:
        c_rot0 = torch.tensor(joint.offset.rotation_matrix, dtype=dt)
        c_t = torch.tensor(joint.offset.translation, dtype=dt, requires_grad=True)
        params = [c_t, axis, dw, v]

    def loss_fn():
        a = axis / axis.norm()
        if kind == "revolute":
            local = x @ (r_rot0 @ torch.linalg.matrix_exp(_skew(dw))).T + r_t
            rots = _rodrigues_batch(a, v)
            preds = [local @ rots[t].T + c for t in range(len(ys))]
        else:
            base = x @ (c_rot0 @ torch.linalg.matrix_exp(_skew(dw))).T + c_t
            preds = [base + a * v[t] for t in range(len(ys))]
        per_t = [torch.sqrt(((p - y) ** 2).sum(-1) + 1e-18).mean() for p, y in zip(preds, ys)]
        return sum(per_t) / len(per_t)

    def snapshot():
        a = (axis / axis.norm()).detach().numpy()
        rw = Rotation.from_rotvec(dw.detach().numpy()).as_matrix()
        if kind == "revolute":
            off = RigidTransform.from_rotation_matrix(joint.offset.rotation_matrix @ rw, r_t.detach().numpy())
            return RevoluteJoint(c.detach().numpy().copy(), a, off), v.detach().numpy().copy()
        off = RigidTransform.from_rotation_matrix(joint.offset.rotation_matrix @ rw, c_t.detach().numpy())
        return PrismaticJoint(off, a), v.detach().numpy().copy()

    opt = torch.optim.Adam(params, lr=cfg.lr)
    best = (add_score(joint, configs, points, targets), joint, np.asarray(configs, dtype=np.float64))
    for _ in range(cfg.steps):
        opt.zero_grad()
        loss = loss_fn()
        if not torch.isfinite(loss):
            return joint, configs, math.inf
        loss.backward()
        opt.step()
        with torch.no_grad():
            axis /= axis.norm()
            if bound is not None and kind == "revolute":
                c.copy_(torch.tensor(_clip_ball(c.numpy(), *bound)))
    j, vs = snapshot()
    score = add_score(j, vs, points, targets)
    if not np.isfinite(score):
        return joint, configs, math.inf
    if score < best[0]:
        best = (score, j, vs)
    return best[1], best[2], float(best[0])


def fit_joint_pair(points_child, poses_child, poses_parent, child=0, parent=1, cfg: JointFitConfig | None = None,
                   points_parent=None):
    """Fit revolute and prismatic candidates explaining the child's motion
    relative to the parent across all observed times.

    ``points_child`` are the child's Gaussian means in its own frame and
    ``poses_*`` the per-time part poses.  Scores are ADD values in metres.
    A revolute centre is kept inside the bounding sphere of the two parts
    (``points_parent`` in the parent frame; the child alone if omitted):
    with two observations a distant axis can imitate any screw motion, so
    an unbounded centre would accept joints between unconnected parts.
    """
    cfg = cfg or JointFitConfig()
    points = np.asarray(points_child, dtype=np.float64)
    if len(points) == 0:
        raise ValueError(f"part {child} has no points")
    rel, targets = _relative_targets(points, poses_child, poses_parent)
    bound = joint_region(points, rel[0], points_parent)
    edges = {}
    for kind in ("revolute", "prismatic"):
        if kind == "revolute":
            joint, configs = _init_revolute(rel, points, bound)
        else:
            joint, configs = _init_prismatic(rel)
        try:
            joint, configs, score = _refine(kind, joint, configs, points, targets, cfg, bound)
        except (ValueError, RuntimeError) as exc:
            logger.warning("%s fit %d->%d failed: %s", kind, parent, child, exc)
            score = math.inf
        edges[kind] = JointEdge(parent, child, kind, joint, configs, score)
    return PairResult(child, parent, edges["revolute"], edges["prismatic"])


def part_gaps(part_points: dict, part_poses: dict, t=0) -> dict:
    """Closest distance between every two parts placed at time ``t``."""
    placed = {p: apply(part_poses[p][t], np.asarray(x, dtype=np.float64)) for p, x in part_points.items()}
    trees = {p: cKDTree(x) for p, x in placed.items()}
    gaps = {}
    for j, k in combinations(sorted(placed), 2):
        d, _ = trees[k].query(placed[j])
        gaps[(j, k)] = gaps[(k, j)] = float(d.min())
    return gaps


def contact_distance(part_points: dict, factor=5.0, gaps=None, slack=1.5) -> float:
    """``factor`` times the median nearest-neighbour spacing of the parts' points,
    raised if needed to ``slack`` times the widest gap of the minimum spanning
    tree over part gaps, so every part keeps at least one contact."""
    spacings = []
    for x in part_points.values():
        x = np.asarray(x, dtype=np.float64)
        if len(x) > 1:
            d, _ = cKDTree(x).query(x, k=2)
            spacings.append(d[:, 1])
    if not spacings:
        return math.inf
    out = factor * float(np.median(np.concatenate(spacings)))
    if gaps:
        ids = sorted(part_points)
        m = np.zeros((len(ids), len(ids)))
        for (j, k), g in gaps.items():
            # csgraph treats zeros as missing edges
            m[ids.index(j), ids.index(k)] = max(g, 1e-12)
        widest = minimum_spanning_tree(m).max()
        out = max(out, slack * float(widest))
    return out


def fit_all_pairs(part_points: dict, part_poses: dict, cfg: JointFitConfig | None = None):
    """Both joint candidates for every ordered pair ``(child, parent)``."""
    gaps = part_gaps(part_points, part_poses)
    results = []
    for j, k in permutations(sorted(part_points), 2):
        res = fit_joint_pair(part_points[j], part_poses[j], part_poses[k], j, k, cfg, points_parent=part_points[k])
        res.gap = gaps[(j, k)]
        results.append(res)
    return results


# ---------------------------------------------------------------------------
# graph and tree
# ---------------------------------------------------------------------------

@dataclass
class JointGraph:
    parts: list
    edges: list

    def neighbours(self, part):
        out = []
        for e in self.edges:
            if e.parent == part:
                out.append((e.child, e))
            elif e.child == part:
                out.append((e.parent, e))
        return out


def _is_fixed(edge: JointEdge):
    tol = FIXED_ANGLE if edge.kind == "revolute" else FIXED_DISTANCE
    return abs(edge.motion) < tol


def build_joint_graph(results, eps, parts=None, max_gap=None) -> JointGraph:
    """Keep, per unordered part pair, the best candidate whose ADD is below ``eps``.

    With ``max_gap`` set, pairs whose parts are further apart than that are
    not joint candidates at all: with two observations the ADD of a pair
    separated by intermediate links is often as small as a real joint's.
    """
    best = {}
    both_pass = {}
    for res in results:
        if max_gap is not None and res.gap > max_gap:
            continue
        key = tuple(sorted((res.child, res.parent)))
        for cand in (res.revolute, res.prismatic):
            if not cand.score < eps:
                continue
            if key not in best or cand.score < best[key].score:
                best[key] = cand
        if res.revolute.score < eps and res.prismatic.score < eps:
            both_pass.setdefault(key, []).append(res)
    edges = []
    for key in sorted(best):
        edge = best[key]
        if key in both_pass and any(_is_fixed(r.revolute) and _is_fixed(r.prismatic) for r in both_pass[key]):
            edge.fixed = True
        edges.append(edge)
    if parts is None:
        parts = sorted({p for r in results for p in (r.child, r.parent)})
    return JointGraph(list(parts), edges)


@dataclass
class KinematicTree:
    root: int
    edges: list                 # JointEdge oriented parent -> child, DFS order
    parts: list
    unreachable: list = field(default_factory=list)
    dropped: list = field(default_factory=list)

    @property
    def parent_of(self):
        return {e.child: e.parent for e in self.edges}

    def depth(self):
        """Number of parts on the longest root-to-leaf path."""
        parent = self.parent_of
        best = 1
        for p in parent:
            d, q = 1, p
            while q in parent:
                q = parent[q]
                d += 1
            best = max(best, d)
        return best

    def configuration(self, t):
        return np.array([e.configs[t] for e in self.edges])

    def to_dict(self):
        return {"root": self.root, "parts": list(self.parts), "unreachable": list(self.unreachable),
                "edges": [e.to_dict() for e in self.edges], "dropped": [e.to_dict() for e in self.dropped]}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["root"]), [JointEdge.from_dict(e) for e in d["edges"]], list(d["parts"]),
                   list(d.get("unreachable", [])), [JointEdge.from_dict(e) for e in d.get("dropped", [])])


def build_tree(graph: JointGraph, root: int) -> KinematicTree:
    """Depth-first spanning tree from ``root``; lower-ADD neighbours are explored first."""
    if root not in graph.parts:
        raise ValueError(f"root part {root} not in graph parts {graph.parts}")
    visited = {root}
    tree_edges = []
    used = set()

    def visit(part):
        nbrs = sorted(graph.neighbours(part), key=lambda ne: (ne[1].score, ne[0]))
        for other, edge in nbrs:
            if other in visited:
                continue
            visited.add(other)
            used.add(id(edge))
            tree_edges.append(edge if edge.parent == part else edge.reversed())
            visit(other)

    visit(root)
    dropped = [e for e in graph.edges if id(e) not in used]
    unreachable = [p for p in graph.parts if p not in visited]
    if unreachable:
        warnings.warn(f"parts unreachable from root {root}: {unreachable}", UnreachablePartsWarning, stacklevel=2)
    return KinematicTree(root, tree_edges, list(graph.parts), unreachable, dropped)


def forward_kinematics(tree: KinematicTree, config, base_pose: RigidTransform | None = None) -> dict:
    """Part poses keyed by part id; the root gets ``base_pose``."""
    config = np.asarray(config, dtype=np.float64).reshape(-1)
    if len(config) != len(tree.edges):
        raise ValueError(f"configuration has {len(config)} values, tree has {len(tree.edges)} joints")
    poses = {tree.root: base_pose if base_pose is not None else RigidTransform.identity()}
    for edge, value in zip(tree.edges, config):
        poses[edge.child] = compose(poses[edge.parent], edge.transform(value))
    return poses


def render_configuration(part_splats: dict, tree: KinematicTree, config, cam, base_pose=None,
                         with_semantics=True):
    """Rasterise part-local splats at the FK poses of ``config``."""
    from .render import rasterize
    poses = forward_kinematics(tree, config, base_pose)
    parts = [(part_splats[p], poses[p]) for p in sorted(poses) if p in part_splats]
    return rasterize(parts, cam, with_semantics=with_semantics)


def save_tree(tree: KinematicTree, path, graph: JointGraph | None = None, extra=None):
    doc = {"tree": tree.to_dict()}
    if graph is not None:
        doc["graph"] = {"parts": list(graph.parts), "edges": [e.to_dict() for e in graph.edges]}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_tree(path) -> KinematicTree:
    with open(path) as fh:
        return KinematicTree.from_dict(json.load(fh)["tree"])


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------

class ArticulationEstimator(BaseEstimator):
    """Recover joints and a kinematic tree from per-time part poses.

    ``fit`` takes the part-local Gaussian means of every part and the
    per-time part poses; ``predict`` maps a configuration vector to part
    poses through the fitted tree.  ``max_gap="auto"`` uses
    :func:`contact_distance`; ``None`` disables the contact test.
    """

    def __init__(self, eps=0.005, root=1, steps=300, lr=1e-3, max_gap="auto"):
        self.eps = eps
        self.root = root
        self.steps = steps
        self.lr = lr
        self.max_gap = max_gap

    def fit(self, part_points: dict, part_poses: dict):
        if not part_points:
            raise ValueError("no parts given")
        missing = set(part_points) - set(part_poses)
        if missing:
            raise ValueError(f"no poses for parts {sorted(missing)}")
        cfg = JointFitConfig(self.steps, self.lr)
        self.pair_results_ = fit_all_pairs(part_points, part_poses, cfg)
        gaps = {(r.child, r.parent): r.gap for r in self.pair_results_}
        self.max_gap_ = contact_distance(part_points, gaps=gaps) if self.max_gap == "auto" else self.max_gap
        self.graph_ = build_joint_graph(self.pair_results_, self.eps, parts=sorted(part_points),
                                        max_gap=self.max_gap_)
        self.tree_ = build_tree(self.graph_, self.root)
        self.base_pose_ = part_poses[self.root][0]
        return self

    def training_configuration(self, t):
        check_is_fitted(self, "tree_")
        return self.tree_.configuration(t)

    def predict(self, config):
        check_is_fitted(self, "tree_")
        return forward_kinematics(self.tree_, config, self.base_pose_)
