"""Synthetic articulated objects with planted joints, and their posed views.

Parts are boxes filled with Gaussians.  Each part's local frame coincides
with the world frame at the all-zero configuration, so a planted revolute
joint through world point ``c`` is ``RevoluteJoint(c, a, Trans(-c))`` and
a prismatic one is ``PrismaticJoint(identity, a)``; part ``1`` is the root.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .artic import JointEdge, KinematicTree, PrismaticJoint, RevoluteJoint, forward_kinematics
from .geom import RigidTransform, apply, matrix_to_quat, quat_to_matrix
from .render import rasterize
from .splat import UNLABELED, Camera, Observation, SceneDataset, SemanticSplat

LOGIT_ONE_HOT = 30.0
GT_OPACITY_LOGIT = 3.0


class SpecError(ValueError):
    pass


@dataclass
class PartSpec:
    center: list
    extent: list
    color: list
    num_gaussians: int = 250

    def __post_init__(self):
        self.center, self.extent, self.color = (list(map(float, v)) for v in (self.center, self.extent, self.color))


@dataclass
class JointSpec:
    type: str
    parent: int
    child: int
    axis: list
    center: list = field(default_factory=lambda: [0.0, 0.0, 0.0])

    def __post_init__(self):
        self.axis, self.center = list(map(float, self.axis)), list(map(float, self.center))


@dataclass
class ObjectSpec:
    """Parts are numbered from 1 in list order; ``configurations`` holds one
    vector per observation time with one value per joint."""

    parts: list
    joints: list
    configurations: list
    seed: int = 0
    min_delta_angle: float = 0.1
    min_delta_distance: float = 0.05

    def __post_init__(self):
        self.parts = [p if isinstance(p, PartSpec) else PartSpec(**p) for p in self.parts]
        self.joints = [j if isinstance(j, JointSpec) else JointSpec(**j) for j in self.joints]
        self.configurations = [list(map(float, c)) for c in self.configurations]

    @property
    def num_parts(self):
        return len(self.parts)

    def validate(self):
        n = self.num_parts
        if n < 1:
            raise SpecError("object needs at least one part")
        if len(self.configurations) < 2:
            raise SpecError("need configurations for at least two times")
        for c in self.configurations:
            if len(c) != len(self.joints):
                raise SpecError(f"configuration {c} has {len(c)} values for {len(self.joints)} joints")
        parent_of = {}
        for i, j in enumerate(self.joints):
            if j.type not in ("revolute", "prismatic"):
                raise SpecError(f"joint {i}: unknown type {j.type!r}")
            for p in (j.parent, j.child):
                if not 1 <= p <= n:
                    raise SpecError(f"joint {i}: part id {p} outside 1..{n}")
            if j.child in parent_of:
                raise SpecError(f"part {j.child} has two parents: not a tree")
            parent_of[j.child] = j.parent
            delta = abs(self.configurations[-1][i] - self.configurations[0][i])
            need = self.min_delta_angle if j.type == "revolute" else self.min_delta_distance
            if delta < need:
                raise SpecError(f"joint {i}: configuration change {delta:g} below {need:g}")
        if 1 in parent_of:
            raise SpecError("part 1 is the root and cannot be a joint child")
        for child in parent_of:
            seen, p = {child}, child
            while p in parent_of:
                p = parent_of[p]
                if p in seen:
                    raise SpecError(f"joint graph has a cycle through part {p}")
                seen.add(p)
            if p != 1:
                raise SpecError(f"part {child} is not connected to the root")
        if len(parent_of) != n - 1:
            raise SpecError(f"{n} parts need {n - 1} joints to form a tree, got {len(parent_of)}")
        return self

    def to_json(self):
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


@dataclass
class GroundTruth:
    spec: ObjectSpec
    parts: dict          # part id -> SemanticSplat in the part frame
    tree: KinematicTree  # planted joints, root 1
    poses: dict          # part id -> [RigidTransform per time]

    @property
    def num_parts(self):
        return self.spec.num_parts

    @property
    def num_times(self):
        return len(self.spec.configurations)

    def part_poses(self, config):
        return forward_kinematics(self.tree, config)

    def world_splat(self, config):
        poses = self.part_poses(config)
        return [(self.parts[p], poses[p]) for p in sorted(self.parts)]

    def bounding_sphere(self):
        pts = np.concatenate([apply(self.poses[p][t], self.parts[p].means.astype(np.float64))
                              for p in self.parts for t in range(self.num_times)])
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        c = 0.5 * (lo + hi)
        return c, float(np.linalg.norm(pts - c, axis=1).max())

    def sample_points(self, part, config, n, seed=0):
        """Draws from the part's Gaussian mixture (weights = opacity), posed at ``config``."""
        return sample_mixture(self.parts[part], self.part_poses(config)[part], n, seed)

    def to_dict(self):
        return {"spec": asdict(self.spec), "tree": self.tree.to_dict()}


def sample_mixture(splat: SemanticSplat, pose: RigidTransform, n, seed=0):
    rng = np.random.default_rng(seed)
    w = splat.opacities
    idx = rng.choice(len(splat), size=n, p=w / w.sum())
    rot = np.stack([quat_to_matrix(q) for q in splat.quats.astype(np.float64)])
    eps = rng.standard_normal((n, 3)) * splat.scales[idx]
    local = splat.means[idx].astype(np.float64) + np.einsum("nij,nj->ni", rot[idx], eps)
    return apply(pose, local)


def _random_quats(rng, n):
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1
    return q


def _part_splat(spec: PartSpec, part_id, num_parts, rng):
    n = spec.num_gaussians
    ext = np.asarray(spec.extent, dtype=np.float64)
    local = (rng.random((n, 3)) - 0.5) * ext
    means = local + np.asarray(spec.center, dtype=np.float64)
    spacing = (np.prod(ext) / n) ** (1.0 / 3.0)
    sigma = np.minimum(0.5 * spacing, 0.3 * ext.min())
    log_scales = np.log(sigma * rng.uniform(0.8, 1.2, size=(n, 3)))
    texture = 0.12 * np.sin(2 * math.pi * local[:, :1] / max(ext[0], 1e-3) * 2) \
        * np.cos(2 * math.pi * local[:, 1:2] / max(ext[1], 1e-3))
    colors = np.clip(np.asarray(spec.color, dtype=np.float64) + texture, 0.0, 1.0)
    sem = np.zeros((n, num_parts + 1))
    sem[:, part_id] = LOGIT_ONE_HOT
    return SemanticSplat(means, log_scales, _random_quats(rng, n), np.full(n, GT_OPACITY_LOGIT), colors, sem,
                         num_parts)


def _planted_joint(j: JointSpec):
    if j.type == "revolute":
        c = np.asarray(j.center, dtype=np.float64)
        return RevoluteJoint(c, j.axis, RigidTransform.from_translation(-c))
    return PrismaticJoint(RigidTransform.identity(), j.axis)


def generate_object(spec: ObjectSpec) -> GroundTruth:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    parts = {i + 1: _part_splat(p, i + 1, spec.num_parts, rng) for i, p in enumerate(spec.parts)}
    # order joints root-outwards so FK can run edge by edge
    by_parent = {}
    for idx, j in enumerate(spec.joints):
        by_parent.setdefault(j.parent, []).append(idx)
    order, stack = [], [1]
    while stack:
        p = stack.pop()
        for idx in sorted(by_parent.get(p, []), reverse=True):
            order.append(idx)
            stack.append(spec.joints[idx].child)
    configs = np.asarray(spec.configurations, dtype=np.float64)
    edges = [JointEdge(spec.joints[i].parent, spec.joints[i].child, spec.joints[i].type,
                       _planted_joint(spec.joints[i]), configs[:, i]) for i in order]
    tree = KinematicTree(1, edges, list(parts))
    per_time = [forward_kinematics(tree, tree.configuration(t)) for t in range(len(configs))]
    poses = {p: [per_time[t][p] for t in range(len(configs))] for p in parts}
    return GroundTruth(spec, parts, tree, poses)


# ---------------------------------------------------------------------------
# views
# ---------------------------------------------------------------------------

def sample_cameras(center, radius, views, resolution, rng, distance_factor=2.5, fill=0.85):
    """Cameras on a sphere around ``center`` looking at it, framing the bounding sphere."""
    dist = distance_factor * radius
    half_angle = math.asin(radius / dist)
    f = 0.5 * resolution * fill / math.tan(half_angle)
    cams = []
    for _ in range(views):
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        cams.append(Camera.look_at(center + dist * d, center, f, resolution, resolution))
    return cams


def label_image(out, threshold=0.5):
    """Per pixel the part with the largest composited weight; background below ``threshold`` accumulation."""
    _, acc, seg = out.numpy()
    labels = (np.argmax(seg[..., 1:], axis=-1) + 1).astype(np.uint8)
    labels[acc < threshold] = 0
    return labels


def quantize(rgb):
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0) / 255.0


def render_view(gt: GroundTruth, config, cam):
    """(quantized rgb, labels, accumulation) of the object at ``config``."""
    out = rasterize(gt.world_splat(config), cam)
    return quantize(out.rgb.numpy()), label_image(out), out.accumulation.numpy()


def render_dataset(gt: GroundTruth, views=50, resolution=64, label_fraction=1.0, seed=None):
    """One :class:`SceneDataset` per time; the first ``ceil(label_fraction * views)``
    views of each time carry labels, the rest are all-``UNLABELED``."""
    if views < 1:
        raise ValueError("views must be >= 1")
    if not 0.0 <= label_fraction <= 1.0:
        raise ValueError("label_fraction must lie in [0, 1]")
    rng = np.random.default_rng(gt.spec.seed + 1 if seed is None else seed)
    center, radius = gt.bounding_sphere()
    n_labeled = math.ceil(round(label_fraction * views, 9))
    datasets = []
    for t in range(gt.num_times):
        cams = sample_cameras(center, radius, views, resolution, rng)
        obs = []
        for i, cam in enumerate(cams):
            rgb, labels, _ = render_view(gt, gt.tree.configuration(t), cam)
            if i >= n_labeled:
                labels = np.full_like(labels, UNLABELED)
            obs.append(Observation(cam, rgb, labels))
        datasets.append(SceneDataset(t, gt.num_parts, obs).validate())
    return datasets


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

_PALETTE = [(0.85, 0.25, 0.2), (0.2, 0.55, 0.9), (0.3, 0.8, 0.3), (0.95, 0.8, 0.2), (0.7, 0.3, 0.8),
            (0.2, 0.8, 0.8), (0.95, 0.55, 0.15), (0.6, 0.6, 0.6), (0.9, 0.4, 0.6), (0.45, 0.35, 0.2)]


def revolute_pair(seed=0, delta_deg=40.0, num_gaussians=250) -> ObjectSpec:
    """Laptop-like base and lid hinged along the base's back edge."""
    base = PartSpec([0.0, 0.0, 0.0], [0.6, 0.4, 0.06], _PALETTE[0], num_gaussians)
    lid = PartSpec([0.0, 0.23, 0.23], [0.6, 0.05, 0.38], _PALETTE[1], num_gaussians)
    hinge = JointSpec("revolute", 1, 2, [-1.0, 0.0, 0.0], [0.0, 0.21, 0.03])
    v0 = 0.2
    return ObjectSpec([base, lid], [hinge], [[v0], [v0 + math.radians(delta_deg)]], seed)


def prismatic_pair(seed=0, slide=0.15, num_gaussians=250) -> ObjectSpec:
    """A block sliding along a rail."""
    rail = PartSpec([0.0, 0.0, 0.0], [0.8, 0.35, 0.08], _PALETTE[0], num_gaussians)
    block = PartSpec([-0.2, 0.0, 0.15], [0.25, 0.3, 0.2], _PALETTE[1], num_gaussians)
    joint = JointSpec("prismatic", 1, 2, [1.0, 0.0, 0.0])
    return ObjectSpec([rail, block], [joint], [[0.0], [slide]], seed)


def serial_chain(num_parts=8, seed=0, link=0.14, width=0.07, num_gaussians=150) -> ObjectSpec:
    """Links along x joined by revolute joints with alternating z / y axes."""
    rng = np.random.default_rng(seed + 1000)
    x0 = -0.5 * num_parts * link
    parts, joints = [], []
    for i in range(num_parts):
        cx = x0 + (i + 0.5) * link
        parts.append(PartSpec([cx, 0.0, 0.0], [link * 0.9, width, width], _PALETTE[i % len(_PALETTE)],
                              num_gaussians))
        if i:
            axis = [0.0, 0.0, 1.0] if i % 2 else [0.0, 1.0, 0.0]
            joints.append(JointSpec("revolute", i, i + 1, axis, [x0 + i * link, 0.0, 0.0]))
    n = len(joints)
    v0 = rng.uniform(-0.15, 0.15, n)
    delta = rng.uniform(0.25, 0.4, n) * np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    return ObjectSpec(parts, joints, [v0.tolist(), (v0 + delta).tolist()], seed)


def panda_like(seed=0, num_gaussians=120) -> ObjectSpec:
    """Seven revolute links ending in a hand with two prismatic fingers."""
    chain = serial_chain(8, seed, num_gaussians=num_gaussians)
    tip = chain.parts[-1].center[0] + 0.5 * 0.14
    fingers = [PartSpec([tip + 0.06, s * 0.05, 0.0], [0.1, 0.025, 0.04], _PALETTE[8 + (s > 0)], num_gaussians // 2)
               for s in (-1.0, 1.0)]
    joints = chain.joints + [JointSpec("prismatic", 8, 9, [0.0, -1.0, 0.0]),
                             JointSpec("prismatic", 8, 10, [0.0, 1.0, 0.0])]
    configs = [chain.configurations[0] + [0.0, 0.0], chain.configurations[1] + [0.05, 0.05]]
    return ObjectSpec(chain.parts + fingers, joints, configs, seed)


PRESETS = {"revolute2": revolute_pair, "prismatic2": prismatic_pair, "chain8": serial_chain, "panda": panda_like}

DEFAULT_RESOLUTION = 64
# long chains of thin links cover only a few pixels per link at 64 px
PRESET_RESOLUTION = {"chain8": 96, "panda": 96}


def preset_resolution(preset) -> int:
    return PRESET_RESOLUTION.get(preset, DEFAULT_RESOLUTION)
