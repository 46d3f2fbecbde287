"""Optimisation stages: RGB splat fitting, semantic fitting with frozen
geometry, and cross-scene part-pose estimation by rendering loss."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations

import numpy as np
import torch
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .geom import (EulerPose, RigidTransform, compose, euler_to_matrix_t, euler_to_transform, icp_align,
                   icp_residual, inverse, matrix_to_euler, rotation_angle)
from .render import (GaussianTensors, LossWeights, render_parts, render_tensors, total_loss)
from .render.losses import accumulation_target, cross_entropy
from .render.rasterizer import NEAR_PLANE
from .splat import (LOG_SCALE_MAX, LOG_SCALE_MIN, UNLABELED, SceneDataset, SemanticSplat, part_assignment)

logger = logging.getLogger(__name__)

FOREGROUND_LEVEL = 4.0 / 255.0
SYMMETRY_TOL = 1.25


class FitError(RuntimeError):
    pass


class FitDivergedError(FitError):
    """Raised on a non-finite loss; ``last_good`` holds the state before the failing step."""

    def __init__(self, stage, iteration, last_good=None):
        super().__init__(f"{stage}: non-finite loss at iteration {iteration}")
        self.stage = stage
        self.iteration = iteration
        self.last_good = last_good


@dataclass
class OptimConfig:
    """Learning rates, schedules and loss weights for every stage.

    ``lr_means`` is relative to the scene radius; pose rates are absolute
    (metres and radians per step).
    """

    lr_means: float = 2e-3
    lr_log_scales: float = 5e-3
    lr_quats: float = 2e-3
    lr_opacity: float = 5e-2
    lr_colors: float = 1e-2
    lr_semantics: float = 5e-2
    lr_pose_t: float = 5e-4
    lr_pose_theta: float = 1e-3
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    num_gaussians: int = 2000
    rgb_iters: int = 2000
    semantic_epochs: int = 20
    cross_iters: int = 600
    prune_every: int = 200
    prune_alpha: float = 0.005
    max_scale_ratio: float = 10.0
    l1_target: float = 0.0
    hull_fraction: float = 0.95
    icp_seed: bool = True
    train_gaussians: bool = True
    self_weight: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        for name in ("lr_means", "lr_log_scales", "lr_quats", "lr_opacity", "lr_colors", "lr_semantics",
                     "lr_pose_t", "lr_pose_theta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def updated(self, **kw):
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def scene_bounds(dataset: SceneDataset):
    """Point closest to all optical axes and the mean camera distance to it."""
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for obs in dataset.observations:
        o = obs.camera.pose.translation
        d = obs.camera.pose.rotation_matrix[:, 2]
        p = np.eye(3) - np.outer(d, d)
        a += p
        b += p @ o
    center = np.linalg.lstsq(a, b, rcond=None)[0]
    dist = np.mean([np.linalg.norm(o.camera.pose.translation - center) for o in dataset.observations])
    return center, float(dist)


def _foreground(obs):
    fg = obs.rgb.max(axis=-1) > FOREGROUND_LEVEL
    known = obs.labels != UNLABELED
    fg[known] = obs.labels[known] != 0
    return fg


def _project_points(points, cam):
    r, t = cam.world_to_camera()
    p = points @ r.T + t
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * p[:, 0] / z + cam.cx
        v = cam.fy * p[:, 1] / z + cam.cy
    inside = (z > NEAR_PLANE) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return np.where(inside, u, 0).astype(np.int64), np.where(inside, v, 0).astype(np.int64), inside


def carve_points(dataset: SceneDataset, n, radius, center, rng, fraction=0.95, max_rounds=50):
    """Uniform samples in a ball kept when they land on foreground in at
    least ``fraction`` of the views that see them.  Returns points and the
    mean pixel colour under each."""
    masks = [_foreground(o) for o in dataset.observations]
    kept, cols = [], []
    total = drawn = 0
    for _ in range(max_rounds):
        d = rng.standard_normal((8 * n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pts = center + d * radius * rng.random((8 * n, 1)) ** (1.0 / 3.0)
        drawn += len(pts)
        hits = np.zeros(len(pts))
        seen = np.zeros(len(pts))
        col = np.zeros((len(pts), 3))
        for obs, mask in zip(dataset.observations, masks):
            u, v, inside = _project_points(pts, obs.camera)
            seen += inside
            fg = inside & mask[v, u]
            hits += fg
            col += np.where(fg[:, None], obs.rgb[v, u], 0.0)
        ok = (seen > 0) & (hits >= fraction * seen)
        kept.append(pts[ok])
        cols.append(col[ok] / np.maximum(hits[ok], 1)[:, None])
        total += int(ok.sum())
        if total >= n:
            break
    pts = np.concatenate(kept)[:n]
    cols = np.concatenate(cols)[:n]
    if len(pts) == 0:
        raise FitError("visual hull is empty: no sample lands on foreground in the views")
    volume = 4.0 / 3.0 * math.pi * radius ** 3 * total / drawn
    return pts, cols, volume


def init_splat(dataset: SceneDataset, n, cfg: OptimConfig) -> SemanticSplat:
    """Gaussians filling the visual hull, coloured from the images."""
    rng = np.random.default_rng(cfg.seed)
    center, dist = scene_bounds(dataset)
    radius = 0.6 * dist
    pts, cols, volume = carve_points(dataset, n, radius, center, rng, cfg.hull_fraction)
    spacing = (volume / len(pts)) ** (1.0 / 3.0)
    m = len(pts)
    q = np.zeros((m, 4))
    q[:, 0] = 1.0
    return SemanticSplat(pts, np.full((m, 3), math.log(0.5 * spacing)), q, np.full(m, -2.0), np.clip(cols, 0, 1),
                         np.zeros((m, dataset.num_parts + 1)), dataset.num_parts)


def _clamp_gaussians(g: GaussianTensors, max_ratio):
    with torch.no_grad():
        ls = g.log_scales.clamp_(LOG_SCALE_MIN, LOG_SCALE_MAX)
        floor = ls.max(dim=1, keepdim=True).values - math.log(max_ratio)
        torch.maximum(ls, floor, out=ls)
        g.quats /= g.quats.norm(dim=1, keepdim=True).clamp_min(1e-12)
        g.colors.clamp_(0.0, 1.0)


def _prune(opt, g: GaussianTensors, keep):
    """Drop Gaussians outside ``keep``; trainable tensors are replaced by new
    leaves and their Adam moments carried over."""
    keep_t = torch.as_tensor(keep)
    for name in ("means", "log_scales", "quats", "opacity_logits", "colors", "semantic_logits"):
        old = getattr(g, name)
        new = old.detach()[keep_t].clone().requires_grad_(old.requires_grad)
        setattr(g, name, new)
        for group in opt.param_groups:
            for i, p in enumerate(group["params"]):
                if p is old:
                    group["params"][i] = new
                    state = opt.state.pop(old, None)
                    if state:
                        opt.state[new] = {k: (v[keep_t] if k in ("exp_avg", "exp_avg_sq") else v)
                                          for k, v in state.items()}


def _view_order(n, rng):
    while True:
        yield from rng.permutation(n)


def _check_finite(loss, stage, it, last_good):
    if not torch.isfinite(loss):
        raise FitDivergedError(stage, it, last_good)


# ---------------------------------------------------------------------------
# RGB fit
# ---------------------------------------------------------------------------

@dataclass
class FitHistory:
    losses: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)


def fit_rgb_splat(dataset: SceneDataset, num_gaussians=None, cfg: OptimConfig | None = None,
                  init: SemanticSplat | None = None, history: FitHistory | None = None) -> SemanticSplat:
    """Fit positions, shapes, opacities and colours to the RGB views.

    The loss is ``l1 * L1 + ssim * (1 - SSIM) + acc * L_acc`` with the
    accumulation target taken from the label images where labeled; the
    semantic logits stay at zero.
    """
    cfg = cfg or OptimConfig()
    if len(dataset) == 0:
        raise FitError("dataset has no observations")
    num_gaussians = num_gaussians or cfg.num_gaussians
    splat = init if init is not None else init_splat(dataset, num_gaussians, cfg)
    _, dist = scene_bounds(dataset)
    g = GaussianTensors.from_splat(splat)
    train = [g.means, g.log_scales, g.quats, g.opacity_logits, g.colors]
    for t in train:
        t.requires_grad_(True)
    opt = torch.optim.Adam([
        {"params": [g.means], "lr": cfg.lr_means * 0.6 * dist},
        {"params": [g.log_scales], "lr": cfg.lr_log_scales},
        {"params": [g.quats], "lr": cfg.lr_quats},
        {"params": [g.opacity_logits], "lr": cfg.lr_opacity},
        {"params": [g.colors], "lr": cfg.lr_colors},
    ], betas=cfg.betas, eps=cfg.adam_eps)
    w = replace(cfg.weights, seg=0.0)
    targets = [accumulation_target(o.labels) for o in dataset.observations]
    rng = np.random.default_rng(cfg.seed)
    views = _view_order(len(dataset), rng)
    window = []
    for it in range(cfg.rgb_iters):
        i = next(views)
        obs = dataset.observations[i]
        out = render_tensors(g, obs.camera, with_semantics=False)
        acc_t, mask = targets[i]
        loss = total_loss(out, obs.rgb, acc_t, None, w, acc_mask=mask)
        _check_finite(loss, "fit_rgb", it, lambda: g.to_splat(dataset.num_parts))
        opt.zero_grad()
        loss.backward()
        opt.step()
        _clamp_gaussians(g, cfg.max_scale_ratio)
        l1 = float((out.rgb.detach() - torch.as_tensor(obs.rgb)).abs().mean())
        window.append(l1)
        if history is not None:
            history.losses.append(loss.item())
        if len(window) >= len(dataset):
            if history is not None:
                history.epoch_losses.append(float(np.mean(window)))
            if np.mean(window) < cfg.l1_target:
                logger.info("fit_rgb: L1 target reached at iteration %d", it)
                break
            window = []
        if cfg.prune_every and (it + 1) % cfg.prune_every == 0 and it + 1 < cfg.rgb_iters:
            keep = (torch.sigmoid(g.opacity_logits.detach()) >= cfg.prune_alpha).numpy()
            if 0 < keep.sum() < len(keep):
                _prune(opt, g, keep)
                logger.debug("fit_rgb: pruned %d gaussians at iteration %d", int((~keep).sum()), it)
    out = g.to_splat(dataset.num_parts)
    out.semantic_logits[:] = 0.0
    return out


# ---------------------------------------------------------------------------
# semantic fit
# ---------------------------------------------------------------------------

def fit_semantics(splat: SemanticSplat, dataset: SceneDataset, cfg: OptimConfig | None = None,
                  history: FitHistory | None = None) -> SemanticSplat:
    """Train only the semantic logits by masked cross-entropy on labeled views."""
    cfg = cfg or OptimConfig()
    if splat.num_parts != dataset.num_parts:
        raise ValueError(f"splat has {splat.num_parts} parts, dataset {dataset.num_parts}")
    labeled = dataset.labeled_indices
    if not labeled:
        raise FitError("fit_semantics needs at least one labeled view")
    g = GaussianTensors.from_splat(splat)
    g.semantic_logits.requires_grad_(True)
    opt = torch.optim.Adam([g.semantic_logits], lr=cfg.lr_semantics, betas=cfg.betas, eps=cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.semantic_epochs):
        losses = []
        for i in rng.permutation(labeled):
            obs = dataset.observations[i]
            out = render_tensors(g, obs.camera, with_semantics=True)
            loss = cross_entropy(out, obs.labels)
            _check_finite(loss, "fit_semantics", epoch, None)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        if history is not None:
            history.epoch_losses.append(float(np.mean(losses)))
    result = splat.copy()
    result.semantic_logits = g.semantic_logits.detach().numpy().astype(np.float32)
    return result


def split_parts(splat: SemanticSplat, warn=True) -> dict:
    """World-frame Gaussians of each part ``1..N_p`` (background dropped)."""
    labels = part_assignment(splat, warn=warn)
    return {p: splat.subset(labels == p) for p in range(1, splat.num_parts + 1)}


# ---------------------------------------------------------------------------
# part poses
# ---------------------------------------------------------------------------

@dataclass
class PartPoseSet:
    """``poses[part][t]`` is the :class:`EulerPose` of ``part`` at time ``t``."""

    poses: dict

    @property
    def parts(self):
        return sorted(self.poses)

    @property
    def num_times(self):
        return len(next(iter(self.poses.values())))

    def transform(self, part, t) -> RigidTransform:
        return euler_to_transform(self.poses[part][t])

    def transforms(self) -> dict:
        return {p: [self.transform(p, t) for t in range(self.num_times)] for p in self.parts}

    def relative(self, part, src=0, dst=1) -> RigidTransform:
        """Motion of ``part`` from time ``src`` to ``dst`` in world coordinates."""
        return compose(self.transform(part, dst), inverse(self.transform(part, src)))

    def is_finite(self):
        return all(np.all(np.isfinite(p.translation)) and np.all(np.isfinite(p.angles))
                   for ps in self.poses.values() for p in ps)

    def to_text(self):
        lines = ["# part time tx ty tz rx ry rz  (metres, radians; R = Rz @ Ry @ Rx)"]
        for p in self.parts:
            for t, pose in enumerate(self.poses[p]):
                vals = " ".join(repr(float(v)) for v in (*pose.translation, *pose.angles))
                lines.append(f"{p} {t} {vals}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        rows = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 8:
                raise ValueError(f"pose line {n}: expected 8 fields, got {len(fields)}")
            vals = [float(v) for v in fields[2:]]
            rows.setdefault(int(fields[0]), {})[int(fields[1])] = EulerPose(vals[:3], vals[3:])
        poses = {}
        for p, by_t in rows.items():
            if sorted(by_t) != list(range(len(by_t))):
                raise ValueError(f"pose sidecar: part {p} has times {sorted(by_t)}")
            poses[p] = [by_t[t] for t in range(len(by_t))]
        return cls(poses)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())


def _icp_candidates(src, dst):
    """ICP of the centred ``src`` cloud onto the centred ``dst`` cloud, started
    from the identity and from the four proper principal-axis alignments.
    Returns ``(residual, rotation matrix)`` pairs."""
    a = src - src.mean(axis=0)
    b = dst - dst.mean(axis=0)
    starts = [np.eye(3)]
    _, _, va = np.linalg.svd(a, full_matrices=False)
    _, _, vb = np.linalg.svd(b, full_matrices=False)
    for signs in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
        r = vb.T @ np.diag(signs) @ va
        if np.linalg.det(r) < 0:
            r = vb.T @ np.diag(signs) @ np.diag([1, 1, -1]) @ va
        starts.append(r)
    out = []
    for r0 in starts:
        t = icp_align(a, b, init=RigidTransform.from_rotation_matrix(r0))
        out.append((icp_residual(t, a, b), t.rotation_matrix))
    return out


def _icp_rotation(src, dst):
    """Lowest-residual rotation of :func:`_icp_candidates`."""
    return min(_icp_candidates(src, dst), key=lambda c: c[0])[1]


def _contact_order(means_t0: dict, root):
    """Parts in breadth-first order over the minimum spanning tree of their
    closest distances at t=0, each with its already-visited neighbour."""
    ids = sorted(means_t0)
    gaps = np.zeros((len(ids), len(ids)))
    for i, j in combinations(range(len(ids)), 2):
        d = cKDTree(means_t0[ids[j]]).query(means_t0[ids[i]])[0].min()
        gaps[i, j] = max(d, 1e-12)
    tree = minimum_spanning_tree(gaps)
    tree = (tree + tree.T).toarray() > 0
    start = ids.index(root) if root in ids else 0
    order, seen = [(ids[start], None)], {start}
    for i, _ in enumerate(order):
        k = ids.index(order[i][0])
        for n in np.flatnonzero(tree[k]):
            if n not in seen:
                seen.add(n)
                order.append((ids[n], order[i][0]))
    return order


def _consistent_rotations(means, root=1, tol=SYMMETRY_TOL):
    """Per-part t=1 rotations from ICP candidates.

    Boxy, uniformly coloured parts register equally well under half-turns,
    so near-best candidates (residual within ``tol`` times the best) are
    ranked by their rotation relative to the contact neighbour chosen
    before them: joints are assumed to move less than a half-turn between
    the observations.  The root is ranked by its own rotation angle.
    """
    order = _contact_order({p: m[0] for p, m in means.items()}, root)
    rots = {}
    for p, nb in order:
        cands = _icp_candidates(means[p][0], means[p][1])
        best = min(c[0] for c in cands)
        near = [c for c in cands if c[0] <= tol * best]
        ref = np.eye(3) if nb is None else rots[nb]
        rots[p] = min(near, key=lambda c: (rotation_angle(c[1] @ ref.T), c[0]))[1]
    return rots


def init_part_poses(splat_t0: SemanticSplat, splat_t1: SemanticSplat, icp_seed=True, parts=None,
                    root=1) -> PartPoseSet:
    """Translations at part centroids; t=1 rotations seeded by ICP of the
    part means (t=0 rotations are zero)."""
    if splat_t0.num_parts != splat_t1.num_parts:
        raise ValueError("splats disagree on num_parts")
    parts = parts or [split_parts(splat_t0), split_parts(splat_t1)]
    means = {}
    for p in range(1, splat_t0.num_parts + 1):
        means[p] = []
        for t, pts in enumerate(parts):
            if len(pts[p]) == 0:
                raise FitError(f"part {p} has no Gaussians at time {t}")
            means[p].append(pts[p].means.astype(np.float64))
    rots = _consistent_rotations(means, root) if icp_seed else {}
    poses = {}
    for p, (m0, m1) in means.items():
        rot = matrix_to_euler(rots[p]) if p in rots else np.zeros(3)
        poses[p] = [EulerPose(m0.mean(axis=0), np.zeros(3)), EulerPose(m1.mean(axis=0), rot)]
    return PartPoseSet(poses)


def _to_local(splat: SemanticSplat, pose: RigidTransform) -> SemanticSplat:
    from .geom import apply, matrix_to_quat, quat_to_matrix
    inv = inverse(pose)
    out = splat.copy()
    out.means = apply(inv, splat.means.astype(np.float64)).astype(np.float32)
    rinv = inv.rotation_matrix
    out.quats = np.stack([matrix_to_quat(rinv @ quat_to_matrix(q)) for q in splat.quats.astype(np.float64)]
                         ).astype(np.float32).reshape(-1, 4)
    return out


@dataclass
class CrossSceneResult:
    poses: PartPoseSet
    canonical: list      # per time: {part: SemanticSplat in the part frame}
    history: FitHistory


def optimize_cross_scene(splats, datasets, poses: PartPoseSet, cfg: OptimConfig | None = None,
                         parts=None) -> CrossSceneResult:
    """Jointly refine part poses and part Gaussians by re-rendering each scene.

    Every iteration draws one view per time ``dst``.  The parts of the
    other splat are rendered at the ``dst`` poses (cross term) together with
    a same-scene render of the ``dst`` splat (weighted by ``self_weight``),
    which ties each splat's part frames to its own scene.  Means, rotations,
    scales and colours of the parts are trained along with the poses;
    opacities and semantics are frozen.
    """
    cfg = cfg or OptimConfig()
    times = len(splats)
    if len(datasets) != times or poses.num_times != times:
        raise ValueError("need one splat, dataset and pose per time")
    parts = parts or [split_parts(s, warn=False) for s in splats]
    ids = poses.parts
    local = [[GaussianTensors.from_splat(_to_local(parts[t][p], poses.transform(p, t))) for p in ids]
             for t in range(times)]
    trainable = []
    if cfg.train_gaussians:
        for per_t in local:
            for g in per_t:
                for tns in (g.means, g.quats, g.log_scales, g.colors):
                    tns.requires_grad_(True)
                trainable.append(g)
    trans = torch.tensor(np.array([[poses.poses[p][t].translation for p in ids] for t in range(times)]),
                         dtype=torch.float64, requires_grad=True)
    angles = torch.tensor(np.array([[poses.poses[p][t].angles for p in ids] for t in range(times)]),
                          dtype=torch.float64, requires_grad=True)
    _, dist = scene_bounds(datasets[0])
    groups = [{"params": [trans], "lr": cfg.lr_pose_t}, {"params": [angles], "lr": cfg.lr_pose_theta}]
    if trainable:
        groups += [
            {"params": [g.means for g in trainable], "lr": cfg.lr_means * 0.6 * dist * 0.25},
            {"params": [g.quats for g in trainable], "lr": cfg.lr_quats},
            {"params": [g.log_scales for g in trainable], "lr": cfg.lr_log_scales},
            {"params": [g.colors for g in trainable], "lr": cfg.lr_colors},
        ]
    opt = torch.optim.Adam(groups, betas=cfg.betas, eps=cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    views = [_view_order(len(d), rng) for d in datasets]
    targets = [[accumulation_target(o.labels) for o in d.observations] for d in datasets]
    history = FitHistory()

    def snapshot():
        tr = trans.detach().numpy().copy()
        an = angles.detach().numpy().copy()
        ps = PartPoseSet({p: [EulerPose(tr[t, j], an[t, j]) for t in range(times)] for j, p in enumerate(ids)})
        canon = [{p: local[t][j].to_splat(splats[t].num_parts) for j, p in enumerate(ids)} for t in range(times)]
        return ps, canon

    def scene_loss(dst, src, i):
        obs = datasets[dst].observations[i]
        rots = euler_to_matrix_t(angles[dst])
        out = render_parts(local[src], list(rots), list(trans[dst]), obs.camera, with_semantics=cfg.weights.seg > 0)
        acc_t, mask = targets[dst][i]
        labels = obs.labels if np.any(mask) else None
        return total_loss(out, obs.rgb, acc_t, labels, cfg.weights, acc_mask=mask)

    import warnings
    from .render.losses import UnlabeledViewWarning
    for it in range(cfg.cross_iters):
        loss = 0.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UnlabeledViewWarning)
            for dst in range(times):
                i = next(views[dst])
                for src in range(times):
                    if src == dst:
                        if cfg.self_weight > 0:
                            loss = loss + cfg.self_weight * scene_loss(dst, src, i)
                    else:
                        loss = loss + scene_loss(dst, src, i) / (times - 1)
        _check_finite(loss, "optimize_cross_scene", it, snapshot)
        opt.zero_grad()
        loss.backward()
        opt.step()
        for g in trainable:
            _clamp_gaussians(g, cfg.max_scale_ratio)
        history.losses.append(loss.item())
    ps, canon = snapshot()
    return CrossSceneResult(ps, canon, history)


def cross_scene_losses(canonical, datasets, poses: PartPoseSet, weights: LossWeights, views=None):
    """Mean cross and same-scene losses over the given views (all by default)."""
    ids = poses.parts
    tensors = [[GaussianTensors.from_splat(canonical[t][p]) for p in ids] for t in range(len(canonical))]
    cross, same = [], []
    with torch.no_grad():
        for dst, ds in enumerate(datasets):
            rots = [torch.tensor(poses.transform(p, dst).rotation_matrix) for p in ids]
            trs = [torch.tensor(poses.transform(p, dst).translation) for p in ids]
            for i in (views if views is not None else range(len(ds))):
                obs = ds.observations[i]
                acc_t, mask = accumulation_target(obs.labels)
                labels = obs.labels if np.any(mask) else None
                w = weights if labels is not None else replace(weights, seg=0.0)
                for src in range(len(canonical)):
                    out = render_parts(tensors[src], rots, trs, obs.camera, with_semantics=w.seg > 0)
                    val = float(total_loss(out, obs.rgb, acc_t, labels, w, acc_mask=mask))
                    (same if src == dst else cross).append(val)
    return float(np.mean(cross)), float(np.mean(same))


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------

class SplatFitter(BaseEstimator):
    """RGB fit then (if labels exist) semantic fit of one scene.

    ``fit(dataset)`` sets ``splat_``; ``predict(camera)`` renders it and
    ``transform()`` returns per-Gaussian part labels.
    """

    def __init__(self, config=None, num_gaussians=None, semantics=True):
        self.config = config
        self.num_gaussians = num_gaussians
        self.semantics = semantics

    def fit(self, dataset, y=None):
        cfg = self.config or OptimConfig()
        self.history_ = FitHistory()
        splat = fit_rgb_splat(dataset, self.num_gaussians, cfg, history=self.history_)
        if self.semantics:
            self.semantic_history_ = FitHistory()
            splat = fit_semantics(splat, dataset, cfg, history=self.semantic_history_)
        self.splat_ = splat
        return self

    def transform(self, X=None):
        check_is_fitted(self, "splat_")
        return part_assignment(self.splat_)

    def predict(self, camera):
        from .render import rasterize
        check_is_fitted(self, "splat_")
        return rasterize([(self.splat_, RigidTransform.identity())], camera)


class PartPoseEstimator(BaseEstimator):
    """Per-part, per-time poses from two segmented splats and their datasets.

    ``fit([splat0, splat1], [data0, data1])`` sets ``poses_`` and
    ``canonical_`` (part-frame Gaussians per time).
    """

    def __init__(self, config=None):
        self.config = config

    def fit(self, splats, datasets):
        cfg = self.config or OptimConfig()
        parts = [split_parts(s) for s in splats]
        init = init_part_poses(splats[0], splats[1], icp_seed=cfg.icp_seed, parts=parts)
        self.initial_poses_ = init
        res = optimize_cross_scene(splats, datasets, init, cfg, parts=parts)
        self.poses_ = res.poses
        self.canonical_ = res.canonical
        self.history_ = res.history
        return self

    def transform(self, X=None):
        check_is_fitted(self, "poses_")
        return self.poses_.transforms()
