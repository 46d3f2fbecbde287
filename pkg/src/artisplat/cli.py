"""Command line: ``artisplat <subcommand> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .fit import OptimConfig, PartPoseSet
from .render import LossWeights

logger = logging.getLogger("artisplat")

EXIT_OK, EXIT_THRESHOLD, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2, 3

_WEIGHT_FLAGS = {"lambda_acc": "acc", "lambda_l1": "l1", "lambda_ssim": "ssim", "lambda_seg": "seg"}


def _add_optim_flags(p, exclude=()):
    g = p.add_argument_group("optimisation (defaults from OptimConfig)")
    g.add_argument("--config", help="JSON file with OptimConfig fields (flags override it)")
    for f in dataclasses.fields(OptimConfig):
        if f.type in ("float", "int", float, int) and f.name not in exclude:
            g.add_argument("--" + f.name.replace("_", "-"), type=float if "float" in str(f.type) else int,
                           default=None, dest=f.name)
    for flag in _WEIGHT_FLAGS:
        g.add_argument("--" + flag.replace("_", "-"), type=float, default=None, dest=flag)
    g.add_argument("--no-icp-seed", action="store_true", help="start t=1 part rotations at zero")
    g.add_argument("--pose-only", action="store_true", help="cross-scene stage trains poses but not Gaussians")


def _optim_from_args(args) -> OptimConfig:
    base = {}
    if getattr(args, "config", None):
        base = json.loads(Path(args.config).read_text())
        base = base.get("optim", base)
    cfg = OptimConfig.from_dict(base) if base else OptimConfig()
    over = {f.name: getattr(args, f.name, None) for f in dataclasses.fields(OptimConfig)
            if getattr(args, f.name, None) is not None and f.name not in ("weights", "betas")}
    w = dataclasses.asdict(cfg.weights)
    for flag, key in _WEIGHT_FLAGS.items():
        if getattr(args, flag, None) is not None:
            w[key] = getattr(args, flag)
    over["weights"] = LossWeights(**w)
    if getattr(args, "no_icp_seed", False):
        over["icp_seed"] = False
    if getattr(args, "pose_only", False):
        over["train_gaussians"] = False
    return cfg.updated(**over)


def _add_joint_flags(p):
    p.add_argument("--eps", type=float, default=0.005, help="ADD acceptance threshold in metres")
    p.add_argument("--root", type=int, default=1, help="root part id of the kinematic tree")
    p.add_argument("--joint-steps", type=int, default=300)
    p.add_argument("--joint-lr", type=float, default=1e-3)
    p.add_argument("--max-gap", default="auto",
                   help="largest part separation (m) for a joint candidate, 'auto' or 'none'")


def _max_gap(value):
    if value in (None, "auto"):
        return "auto"
    if str(value).lower() == "none":
        return None
    return float(value)


def _add_data_flags(p):
    p.add_argument("--preset", default=None, choices=sorted(pl.PRESETS))
    p.add_argument("--spec", default=None, help="object spec JSON file")
    p.add_argument("--views", type=int, default=50)
    p.add_argument("--resolution", type=int, default=None,
                   help="image size in pixels (default 64, 96 for the chain8 and panda presets)")
    p.add_argument("--label-fraction", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=7)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    from .synth import ObjectSpec
    spec = ObjectSpec.load(args.spec) if args.spec else pl.PRESETS[args.preset or "revolute2"](seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "object.json").write_text(spec.to_json())
    res = args.resolution or pl.preset_resolution(None if args.spec else args.preset)
    paths, _ = pl.stage_synth(spec, [out / "t0", out / "t1"], args.views, res, args.label_fraction)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_train(args):
    from .splat import load_dataset
    cfg = _optim_from_args(args)
    pl.stage_train(load_dataset(args.data), cfg, args.out)
    print(args.out)
    return EXIT_OK


def cmd_segment(args):
    from .splat import load_dataset, load_splat
    cfg = _optim_from_args(args)
    pl.stage_segment(load_splat(args.splat), load_dataset(args.data), cfg, args.out)
    print(args.out)
    return EXIT_OK


def cmd_poses(args):
    from .splat import load_dataset, load_splat
    cfg = _optim_from_args(args)
    run = pl.RunDirectory(args.out)
    splats = [load_splat(args.splat0), load_splat(args.splat1)]
    datasets = [load_dataset(args.data0), load_dataset(args.data1)]
    pl.stage_poses(splats, datasets, cfg, run)
    print(run.poses)
    return EXIT_OK


def _run_paths(args):
    run = pl.RunDirectory(args.run) if getattr(args, "run", None) else None
    poses = args.poses or (run and run.poses)
    canonical = args.canonical or (run and run.root / "canonical")
    return run, poses, canonical


def cmd_joints(args):
    run, poses, canonical = _run_paths(args)
    if poses is None or canonical is None:
        raise pl.ConfigError("give --run or both --poses and --canonical")
    out = args.out or (run.joints if run else "joints.json")
    pl.stage_joints(PartPoseSet.load(poses), pl.load_canonical(canonical), args.eps, args.root, args.joint_steps,
                    args.joint_lr, _max_gap(args.max_gap), out)
    print(out)
    return EXIT_OK


def cmd_render(args):
    from .artic import load_tree
    from .splat import load_dataset
    from .validation import check_config_vector
    run = pl.RunDirectory(args.run) if args.run else None
    joints = args.joints or (run and run.joints)
    canonical = args.canonical or (run and run.root / "canonical")
    data = args.data or (run and run.manifest(0))
    if not (joints and canonical and data):
        raise pl.ConfigError("give --run or --joints, --canonical and --data")
    tree = load_tree(joints)
    base = pl.load_base_pose(joints)
    cam = load_dataset(data).observations[args.view].camera
    if args.config_vector is not None:
        values = [float(v) for v in args.config_vector.replace(",", " ").split()]
        configs = [check_config_vector(values, len(tree.edges))]
    else:
        configs = pl.interpolated_configs(tree, args.interp)
    out = args.out or (run.renders if run else "renders")
    pl.render_configs(pl.load_canonical(canonical)[0], tree, configs, cam, base, out)
    print(out)
    return EXIT_OK


def _thresholds(args):
    th = dict(pl.DEFAULT_THRESHOLDS)
    if args.thresholds:
        th.update(json.loads(Path(args.thresholds).read_text()))
    for key in ("axis_angle_deg", "part_motion_deg", "part_motion_m", "cd_moving_mm", "axis_pos"):
        val = getattr(args, "max_" + key, None)
        if val is not None:
            th[key] = val
    return th


def _add_threshold_flags(p):
    p.add_argument("--thresholds", help="JSON file of metric thresholds")
    for key in ("axis_angle_deg", "part_motion_deg", "part_motion_m", "cd_moving_mm", "axis_pos"):
        p.add_argument("--max-" + key.replace("_", "-"), type=float, default=None, dest="max_" + key)


def cmd_eval(args):
    from .artic import load_tree
    from .metrics import assignment_accuracy, evaluate
    from .splat import load_dataset, load_splat
    from .synth import ObjectSpec, generate_object
    run, poses, canonical = _run_paths(args)
    joints = args.joints or (run and run.joints)
    obj = args.object or (run and run.object_spec)
    if not (poses and canonical and joints and obj):
        raise pl.ConfigError("give --run or --poses, --canonical, --joints and --object")
    gt = generate_object(ObjectSpec.load(obj))
    tree = load_tree(joints)
    canon = pl.load_canonical(canonical)
    extras = {}
    if run is not None:
        for t in range(2):
            if run.splat("sem", t).exists():
                extras[f"assignment_accuracy_t{t}"] = assignment_accuracy(load_splat(run.splat("sem", t)), gt, t)
        if run.manifest(0).exists():
            cams = [o.camera for o in load_dataset(run.manifest(0)).observations[:4]]
            extras.update(pl.interpolation_checks(canon[0], tree, pl.load_base_pose(joints), gt, cams, args.interp))
    report = evaluate(tree, PartPoseSet.load(poses).transforms(), canon[0], gt, args.samples, args.seed, extras)
    out = Path(args.out or (run.metrics if run else "metrics.json"))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    violations = report.violations(_thresholds(args))
    text = report.text() + "".join(f"FAIL {v}\n" for v in violations)
    if args.report:
        Path(args.report).write_text(text)
    sys.stdout.write(text)
    return EXIT_THRESHOLD if violations else EXIT_OK


def cmd_pipeline(args):
    if args.pipeline_config:
        doc = json.loads(Path(args.pipeline_config).read_text())
        doc.setdefault("out", args.out)
        cfg = pl.PipelineConfig.from_dict(doc)
        if args.out:
            cfg.out = args.out
    else:
        cfg = pl.PipelineConfig(out=args.out, preset=args.preset or "revolute2", object_spec=args.spec,
                                data0=args.data0, data1=args.data1, views=args.views, resolution=args.resolution,
                                label_fraction=args.label_fraction, eps=args.eps, root=args.root,
                                joint_steps=args.joint_steps, joint_lr=args.joint_lr, max_gap=_max_gap(args.max_gap),
                                interp=args.interp, eval_samples=args.samples, thresholds=_thresholds(args),
                                seed=args.seed)
        cfg.optim = _optim_from_args(args)
    if cfg.out is None:
        raise pl.ConfigError("--out is required")
    report = pl.run_pipeline(cfg, stop_after=args.stop_after)
    if report is None:
        return EXIT_OK
    sys.stdout.write(report.text())
    violations = report.violations(cfg.thresholds)
    for v in violations:
        print("FAIL", v)
    return EXIT_THRESHOLD if violations else EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="artisplat", description="Articulated objects from semantic splats.")
    parser.add_argument("--threads", type=int, default=None,
                        help=f"thread count for deterministic runs (default ${pl.THREADS_ENV} or 1)")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic object and its two scenes")
    _add_data_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit an RGB splat to one scene")
    p.add_argument("--data", required=True, help="scene manifest")
    p.add_argument("--out", required=True, help="output splat file")
    _add_optim_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="fit semantic logits of a trained splat")
    p.add_argument("--data", required=True)
    p.add_argument("--splat", required=True)
    p.add_argument("--out", required=True)
    _add_optim_flags(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("poses", help="estimate per-part poses across the two scenes")
    for name in ("data0", "data1", "splat0", "splat1"):
        p.add_argument("--" + name, required=True)
    p.add_argument("--out", required=True, help="run directory for poses and canonical splats")
    _add_optim_flags(p)
    p.set_defaults(func=cmd_poses)

    p = sub.add_parser("joints", help="fit joints and the kinematic tree")
    p.add_argument("--run")
    p.add_argument("--poses")
    p.add_argument("--canonical")
    p.add_argument("--out")
    _add_joint_flags(p)
    p.set_defaults(func=cmd_joints)

    p = sub.add_parser("render", help="render the object at given configurations")
    p.add_argument("--run")
    p.add_argument("--joints")
    p.add_argument("--canonical")
    p.add_argument("--data", help="scene manifest supplying the camera")
    p.add_argument("--view", type=int, default=0)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--config-vector", help="comma separated joint values")
    g.add_argument("--interp", type=int, help="number of configurations between the two observed ones")
    p.add_argument("--out")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="score a run against its planted object")
    p.add_argument("--run")
    p.add_argument("--poses")
    p.add_argument("--canonical")
    p.add_argument("--joints")
    p.add_argument("--object", help="object spec JSON")
    p.add_argument("--out")
    p.add_argument("--report")
    p.add_argument("--samples", type=int, default=pl.DEFAULT_SAMPLES)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--interp", type=int, default=8)
    _add_threshold_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="run every stage into one run directory")
    p.add_argument("--out")
    p.add_argument("--pipeline-config", help="JSON file of PipelineConfig fields")
    p.add_argument("--data0")
    p.add_argument("--data1")
    p.add_argument("--interp", type=int, default=8)
    p.add_argument("--samples", type=int, default=pl.DEFAULT_SAMPLES)
    p.add_argument("--stop-after", choices=pl.STAGES)
    _add_data_flags(p)
    _add_joint_flags(p)
    _add_optim_flags(p, exclude=("seed",))
    _add_threshold_flags(p)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    pl.configure_threads(args.threads)
    try:
        return args.func(args)
    except (pl.ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
