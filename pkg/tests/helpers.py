"""Small synthetic scenes shared by the fit, pipeline and acceptance tests."""
import numpy as np

from artisplat.geom import apply, matrix_to_quat, quat_to_matrix
from artisplat.splat import SemanticSplat
from artisplat.synth import JointSpec, ObjectSpec, PartSpec


def posed(splat: SemanticSplat, pose) -> SemanticSplat:
    """``splat`` moved into the world by ``pose``."""
    out = splat.copy()
    out.means = apply(pose, splat.means.astype(np.float64)).astype(np.float32)
    r = pose.rotation_matrix
    out.quats = np.stack([matrix_to_quat(r @ quat_to_matrix(q)) for q in splat.quats.astype(np.float64)]
                         ).astype(np.float32).reshape(-1, 4)
    return out


def world_splat(gt, t):
    return SemanticSplat.concatenate([posed(gt.parts[p], gt.poses[p][t]) for p in sorted(gt.parts)])


def owners(gt):
    return np.concatenate([np.full(len(gt.parts[p]), p) for p in sorted(gt.parts)])


def small_revolute(seed=0, num_gaussians=80, delta=0.6):
    parts = [PartSpec([0, 0, 0], [0.5, 0.4, 0.08], [0.85, 0.25, 0.2], num_gaussians),
             PartSpec([0, 0.2, 0.23], [0.5, 0.06, 0.35], [0.2, 0.55, 0.9], num_gaussians)]
    joints = [JointSpec("revolute", 1, 2, [-1.0, 0, 0], [0, 0.18, 0.04])]
    return ObjectSpec(parts, joints, [[0.1], [0.1 + delta]], seed)


TINY_FLAGS = ["--views", "8", "--resolution", "24", "--num-gaussians", "150", "--rgb-iters", "60",
              "--semantic-epochs", "3", "--cross-iters", "10", "--joint-steps", "20", "--samples", "2000"]
