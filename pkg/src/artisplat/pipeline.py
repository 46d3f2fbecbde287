"""End-to-end driver: one run directory, one checkpoint per stage.

Stages run in order ``synth, train, segment, poses, joints, render, eval``.
A stage whose outputs already exist is loaded instead of recomputed, so an
interrupted run resumes where it stopped and produces the same artifacts.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .artic import ArticulationEstimator, KinematicTree, forward_kinematics, load_tree, save_tree
from .fit import (OptimConfig, PartPoseSet, fit_rgb_splat, fit_semantics, init_part_poses, optimize_cross_scene,
                  split_parts)
from .metrics import DEFAULT_SAMPLES, DEFAULT_THRESHOLDS, assignment_accuracy, evaluate
from .render import rasterize, ssim
from .splat import load_dataset, load_splat, save_dataset, save_splat
from .synth import PRESETS, ObjectSpec, generate_object, preset_resolution, render_dataset

logger = logging.getLogger(__name__)

STAGES = ("synth", "train", "segment", "poses", "joints", "render", "eval")
THREADS_ENV = "ARTISPLAT_THREADS"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


@dataclass
class PipelineConfig:
    out: str
    preset: str | None = "revolute2"
    object_spec: str | None = None
    data0: str | None = None
    data1: str | None = None
    views: int = 50
    resolution: int | None = None
    label_fraction: float = 1.0
    optim: OptimConfig = field(default_factory=OptimConfig)
    eps: float = 0.005
    root: int = 1
    joint_steps: int = 300
    joint_lr: float = 1e-3
    max_gap: float | str | None = "auto"
    interp: int = 8
    eval_samples: int = DEFAULT_SAMPLES
    thresholds: dict = field(default_factory=lambda: dict(DEFAULT_THRESHOLDS))
    seed: int = 7

    def __post_init__(self):
        if isinstance(self.optim, dict):
            self.optim = OptimConfig.from_dict(self.optim)
        if self.resolution is None:
            self.resolution = preset_resolution(self.preset if self.object_spec is None else None)

    def validate(self):
        if (self.data0 is None) != (self.data1 is None):
            raise ConfigError("give both scene manifests or neither")
        if self.data0 is not None:
            for p in (self.data0, self.data1):
                if not Path(p).is_file():
                    raise ConfigError(f"scene manifest not found: {p}")
        elif self.object_spec is not None:
            if not Path(self.object_spec).is_file():
                raise ConfigError(f"object spec not found: {self.object_spec}")
        elif self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.views < 1 or self.resolution < 16:
            raise ConfigError("need views >= 1 and resolution >= 16")
        if not 0.0 <= self.label_fraction <= 1.0:
            raise ConfigError("label_fraction must lie in [0, 1]")
        if self.interp < 2:
            raise ConfigError("interp needs at least 2 configurations")
        return self

    def to_dict(self):
        d = asdict(self)
        d["optim"] = self.optim.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def object(self) -> ObjectSpec | None:
        if self.object_spec is not None:
            return ObjectSpec.load(self.object_spec)
        if self.data0 is None:
            return PRESETS[self.preset](seed=self.seed)
        return None


def configure_threads(n=None):
    """Fix torch's thread count (default from ``ARTISPLAT_THREADS``); the
    compositing kernels are single-threaded."""
    import torch
    if n is None:
        n = int(os.environ.get(THREADS_ENV, "1"))
    n = max(1, int(n))
    torch.set_num_threads(n)
    return n


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _atomic_save_splat(splat, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    save_splat(splat, tmp)
    os.replace(tmp, path)


class RunDirectory:
    """Paths of every artifact in a run."""

    def __init__(self, root):
        self.root = Path(root)

    def manifest(self, t):
        return self.root / "data" / f"t{t}" / "manifest.json"

    @property
    def object_spec(self):
        return self.root / "object.json"

    def splat(self, kind, t):
        return self.root / "splats" / f"{kind}_t{t}.splat"

    @property
    def initial_poses(self):
        return self.root / "poses" / "initial.txt"

    @property
    def poses(self):
        return self.root / "poses" / "poses.txt"

    def canonical(self, t, part):
        return self.root / "canonical" / f"t{t}_part{part}.splat"

    @property
    def joints(self):
        return self.root / "joints.json"

    @property
    def renders(self):
        return self.root / "renders"

    @property
    def metrics(self):
        return self.root / "metrics.json"

    @property
    def report(self):
        return self.root / "report.txt"

    @property
    def artifacts(self):
        return self.root / "artifacts.json"

    @property
    def timing(self):
        return self.root / "timing.json"

    @property
    def config(self):
        return self.root / "config.json"

    def write_artifact_manifest(self):
        skip = {self.artifacts, self.timing}
        files = sorted(p for p in self.root.rglob("*") if p.is_file() and p not in skip and p.suffix != ".tmp")
        doc = {str(p.relative_to(self.root)): sha256_file(p) for p in files}
        _atomic_write_text(self.artifacts, json.dumps(doc, indent=1, sort_keys=True))
        return doc


# ---------------------------------------------------------------------------
# stage functions (also used by the individual subcommands)
# ---------------------------------------------------------------------------

def stage_synth(spec: ObjectSpec, out_dirs, views, resolution, label_fraction):
    gt = generate_object(spec)
    datasets = render_dataset(gt, views, resolution, label_fraction)
    return [save_dataset(d, o) for d, o in zip(datasets, out_dirs)], gt


def stage_train(dataset, cfg: OptimConfig, out_path):
    splat = fit_rgb_splat(dataset, cfg.num_gaussians, cfg)
    _atomic_save_splat(splat, out_path)
    return splat


def stage_segment(splat, dataset, cfg: OptimConfig, out_path):
    splat = fit_semantics(splat, dataset, cfg)
    _atomic_save_splat(splat, out_path)
    return splat


def save_canonical(canonical, run: RunDirectory):
    for t, parts in enumerate(canonical):
        for p, s in parts.items():
            _atomic_save_splat(s, run.canonical(t, p))


def load_canonical(directory, times=2):
    directory = Path(directory)
    out = []
    for t in range(times):
        parts = {}
        for f in sorted(directory.glob(f"t{t}_part*.splat")):
            parts[int(f.stem.split("part")[1])] = load_splat(f)
        if not parts:
            raise FileNotFoundError(f"no canonical splats for time {t} in {directory}")
        out.append(parts)
    return out


def stage_poses(splats, datasets, cfg: OptimConfig, run: RunDirectory):
    parts = [split_parts(s) for s in splats]
    init = init_part_poses(splats[0], splats[1], icp_seed=cfg.icp_seed, parts=parts)
    _atomic_write_text(run.initial_poses, init.to_text())
    res = optimize_cross_scene(splats, datasets, init, cfg, parts=parts)
    save_canonical(res.canonical, run)
    _atomic_write_text(run.poses, res.poses.to_text())
    return res.poses, res.canonical


def stage_joints(poses: PartPoseSet, canonical, eps, root, steps, lr, max_gap, out_path):
    pts = {p: canonical[0][p].means.astype(np.float64) for p in poses.parts}
    est = ArticulationEstimator(eps=eps, root=root, steps=steps, lr=lr, max_gap=max_gap)
    est.fit(pts, poses.transforms())
    extra = {"eps": eps, "max_gap": est.max_gap_, "base_pose": est.base_pose_.as_matrix().reshape(-1).tolist()}
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    save_tree(est.tree_, out_path, est.graph_, extra)
    return est.tree_


def load_base_pose(joints_path):
    from .geom import RigidTransform
    with open(joints_path) as fh:
        doc = json.load(fh)
    m = doc.get("base_pose")
    return RigidTransform.identity() if m is None else RigidTransform.from_matrix(np.array(m).reshape(4, 4))


def interpolated_configs(tree: KinematicTree, n):
    v0, v1 = tree.configuration(0), tree.configuration(-1)
    return [v0 + (v1 - v0) * k / (n - 1) for k in range(n)]


def _to_png(rgb):
    return Image.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8), "RGB")


def render_configs(canonical_t0, tree, configs, cam, base_pose, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    outputs = []
    for k, cfg in enumerate(configs):
        poses = forward_kinematics(tree, cfg, base_pose)
        out = rasterize([(canonical_t0[p], poses[p]) for p in sorted(poses) if p in canonical_t0], cam)
        _to_png(out.rgb.numpy()).save(out_dir / f"config_{k:03d}.png")
        lines.append(" ".join(repr(float(v)) for v in cfg))
        outputs.append(out)
    _atomic_write_text(out_dir / "configs.txt", "\n".join(lines) + "\n")
    return outputs


def interpolation_checks(canonical_t0, tree, base_pose, gt, cams, n):
    """Accumulation range, monotonicity and SSIM of est vs planted renders along the interpolation."""
    est_cfgs = interpolated_configs(tree, n)
    gt_cfgs = interpolated_configs(gt.tree, n)
    steps = np.diff(np.array(est_cfgs), axis=0)
    monotone = bool(np.all((steps > 0).all(axis=0) | (steps < 0).all(axis=0)))
    acc_lo, acc_hi, ssims = np.inf, -np.inf, []
    for ec, gc in zip(est_cfgs, gt_cfgs):
        ep = forward_kinematics(tree, ec, base_pose)
        gp = forward_kinematics(gt.tree, gc)
        for cam in cams:
            e = rasterize([(canonical_t0[p], ep[p]) for p in sorted(ep) if p in canonical_t0], cam,
                          with_semantics=False)
            g = rasterize([(gt.parts[p], gp[p]) for p in sorted(gp)], cam, with_semantics=False)
            acc = e.accumulation.numpy()
            acc_lo, acc_hi = min(acc_lo, float(acc.min())), max(acc_hi, float(acc.max()))
            ssims.append(float(ssim(e.rgb, g.rgb)))
    return {"interp_monotone": monotone, "interp_acc_min": acc_lo, "interp_acc_max": acc_hi,
            "interp_ssim_min": min(ssims), "interp_ssim_mean": float(np.mean(ssims))}


# ---------------------------------------------------------------------------
# full run
# ---------------------------------------------------------------------------

def run_pipeline(cfg: PipelineConfig, stop_after=None):
    """Execute (or resume) every stage; returns the :class:`MetricReport` or None."""
    cfg.validate()
    run = RunDirectory(cfg.out)
    run.root.mkdir(parents=True, exist_ok=True)
    # the run directory is implicit, so identical runs in different places hash the same
    saved = {k: v for k, v in cfg.to_dict().items() if k != "out"}
    _atomic_write_text(run.config, json.dumps(saved, indent=1, sort_keys=True))
    optim = cfg.optim
    if optim.seed != cfg.seed:
        optim = optim.updated(seed=cfg.seed)
    timing = {}
    state = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:
            raise StageError(name, exc) from exc
        timing[name] = time.perf_counter() - t0
        logger.info("stage %s done in %.1fs", name, timing[name])
        return result

    def synth():
        spec = cfg.object()
        if cfg.data0 is not None:
            state["datasets"] = [load_dataset(cfg.data0), load_dataset(cfg.data1)]
            if spec is None:
                state["gt"] = None
                return
        if spec is not None:
            if not run.object_spec.exists():
                _atomic_write_text(run.object_spec, spec.to_json())
            state["gt"] = generate_object(ObjectSpec.load(run.object_spec))
        if cfg.data0 is None:
            if not (run.manifest(0).exists() and run.manifest(1).exists()):
                stage_synth(state["gt"].spec, [run.manifest(t).parent for t in range(2)], cfg.views,
                            cfg.resolution, cfg.label_fraction)
            state["datasets"] = [load_dataset(run.manifest(t)) for t in range(2)]

    def train():
        state["rgb"] = [load_splat(run.splat("rgb", t)) if run.splat("rgb", t).exists()
                        else stage_train(state["datasets"][t], optim, run.splat("rgb", t)) for t in range(2)]

    def segment():
        state["sem"] = [load_splat(run.splat("sem", t)) if run.splat("sem", t).exists()
                        else stage_segment(state["rgb"][t], state["datasets"][t], optim, run.splat("sem", t))
                        for t in range(2)]

    def poses():
        if run.poses.exists():
            state["poses"] = PartPoseSet.load(run.poses)
            state["canonical"] = load_canonical(run.root / "canonical")
        else:
            state["poses"], state["canonical"] = stage_poses(state["sem"], state["datasets"], optim, run)

    def joints():
        if not run.joints.exists():
            stage_joints(state["poses"], state["canonical"], cfg.eps, cfg.root, cfg.joint_steps, cfg.joint_lr,
                         cfg.max_gap, run.joints)
        state["tree"] = load_tree(run.joints)
        state["base"] = load_base_pose(run.joints)

    def render():
        if not (run.renders / "configs.txt").exists():
            cam = state["datasets"][0].observations[0].camera
            render_configs(state["canonical"][0], state["tree"], interpolated_configs(state["tree"], cfg.interp),
                           cam, state["base"], run.renders)

    def evaluate_stage():
        gt = state.get("gt")
        if gt is None:
            logger.info("no ground truth object: skipping evaluation")
            return None
        est_poses = state["poses"].transforms()
        extras = {"assignment_accuracy_t0": assignment_accuracy(state["sem"][0], gt, 0),
                  "assignment_accuracy_t1": assignment_accuracy(state["sem"][1], gt, 1)}
        cams = [o.camera for o in state["datasets"][0].observations[:4]]
        extras.update(interpolation_checks(state["canonical"][0], state["tree"], state["base"], gt, cams, cfg.interp))
        report = evaluate(state["tree"], est_poses, state["canonical"][0], gt, cfg.eval_samples, cfg.seed, extras)
        _atomic_write_text(run.metrics, report.to_json())
        violations = report.violations(cfg.thresholds)
        _atomic_write_text(run.report, report.text() + "".join(f"FAIL {v}\n" for v in violations))
        return report

    steps = dict(zip(STAGES, (synth, train, segment, poses, joints, render, evaluate_stage)))
    report = None
    for name in STAGES:
        report = stage(name, steps[name])
        if name == stop_after:
            break
    run.write_artifact_manifest()
    _atomic_write_text(run.timing, json.dumps({k: round(v, 3) for k, v in timing.items()}, indent=1))
    return report
