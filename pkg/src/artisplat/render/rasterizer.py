"""Differentiable splat rendering on the CPU.

Projection, pose transport and semantic softmax are plain torch ops; the
per-pixel compositing runs in the numba kernels and is exposed to autograd
through :class:`RasterizeFunction`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from ..geom import quat_to_matrix_t
from ..splat import Camera, Gaussian, SemanticSplat
from . import _kernels

NEAR_PLANE = 0.01
DILATION = 0.3
T_MIN = 1e-4
# squared Mahalanobis radii: full weight up to Q_FADE (exp(-q/2) = 1e-6), faded to 0 at Q_MAX
Q_FADE = 2.0 * math.log(1e6)
Q_MAX = 2.0 * math.log(1e8)
LOGIT_CLAMP = 30.0


@dataclass
class RenderOutput:
    """Rendered maps. ``segmentation`` rows sum to ``accumulation``."""

    rgb: torch.Tensor            # (H, W, 3)
    accumulation: torch.Tensor   # (H, W)
    segmentation: torch.Tensor | None  # (H, W, K) or None when not requested
    order: np.ndarray            # visible Gaussian ids, front to back
    n_culled: int

    def numpy(self):
        seg = None if self.segmentation is None else self.segmentation.detach().cpu().numpy()
        return self.rgb.detach().cpu().numpy(), self.accumulation.detach().cpu().numpy(), seg


@dataclass
class GaussianTensors:
    """Trainable torch view of a Gaussian set (float64)."""

    means: torch.Tensor
    log_scales: torch.Tensor
    quats: torch.Tensor
    opacity_logits: torch.Tensor
    colors: torch.Tensor
    semantic_logits: torch.Tensor

    @classmethod
    def from_splat(cls, splat: SemanticSplat, dtype=torch.float64):
        return cls(*(torch.tensor(np.asarray(getattr(splat, n), dtype=np.float64), dtype=dtype) for n in
                     ("means", "log_scales", "quats", "opacity_logits", "colors", "semantic_logits")))

    def to_splat(self, num_parts=None) -> SemanticSplat:
        arrs = [t.detach().cpu().numpy() for t in self.tensors()]
        return SemanticSplat(*arrs, num_parts=num_parts)

    def tensors(self):
        return [self.means, self.log_scales, self.quats, self.opacity_logits, self.colors, self.semantic_logits]

    def __len__(self):
        return self.means.shape[0]


def _camera_tensors(cam: Camera, dtype):
    r, t = cam.world_to_camera()
    return torch.tensor(r, dtype=dtype), torch.tensor(t, dtype=dtype)


def project(means, rotmats, scales, cam: Camera):
    """Project world Gaussians into ``cam``.

    ``rotmats`` are the Gaussians' world orientations (N, 3, 3) and
    ``scales`` their axis lengths (N, 3).  Returns ``(visible ids, mean2d,
    cov2d, depth)`` for the Gaussians in front of the near plane; ``cov2d``
    already includes the isotropic dilation.
    """
    r_cw, t_cw = _camera_tensors(cam, means.dtype)
    p = means @ r_cw.T + t_cw
    with torch.no_grad():
        visible = torch.nonzero(p[:, 2] > NEAR_PLANE).squeeze(1)
    p = p[visible]
    x, y, z = p.unbind(-1)
    mean2d = torch.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], dim=-1)
    zero = torch.zeros_like(z)
    jac = torch.stack([
        torch.stack([cam.fx / z, zero, -cam.fx * x / (z * z)], dim=-1),
        torch.stack([zero, cam.fy / z, -cam.fy * y / (z * z)], dim=-1),
    ], dim=-2)                                               # (M, 2, 3)
    a = jac @ r_cw @ (rotmats[visible] * scales[visible][:, None, :])   # (M, 2, 3)
    cov2d = a @ a.transpose(-1, -2) + DILATION * torch.eye(2, dtype=means.dtype)
    return visible, mean2d, cov2d, z


def project_gaussian(g: Gaussian, cam: Camera):
    """Single-Gaussian projection: ``(pixel mean, 2x2 covariance, depth)`` or None if culled."""
    means = torch.tensor(np.asarray(g.mean, dtype=np.float64))[None]
    rot = quat_to_matrix_t(torch.tensor(np.asarray(g.quat, dtype=np.float64)))[None]
    scales = torch.exp(torch.tensor(np.asarray(g.log_scale, dtype=np.float64)))[None]
    visible, mean2d, cov2d, depth = project(means, rot, scales, cam)
    if len(visible) == 0:
        return None
    return mean2d[0].numpy(), cov2d[0].numpy(), float(depth[0])


def conic_from_cov(cov2d):
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    return torch.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], dim=-1)


def _radii(cov2d):
    c = cov2d.detach().numpy()
    mid = 0.5 * (c[:, 0, 0] + c[:, 1, 1])
    det = c[:, 0, 0] * c[:, 1, 1] - c[:, 0, 1] ** 2
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    return np.ceil(np.sqrt(Q_MAX * lam))


class RasterizeFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, mean2d, conic, opacity, feat, radius, order, width, height):
        m2 = mean2d.detach().numpy()
        co = conic.detach().numpy()
        op = opacity.detach().numpy()
        fe = np.ascontiguousarray(feat.detach().numpy())
        offsets, ids = _kernels.bin_tiles(m2, radius, order, width, height)
        out, acc, n_seen = _kernels.forward(m2, co, op, fe, offsets, ids, width, height, T_MIN, Q_FADE, Q_MAX)
        ctx.saved = (m2, co, op, fe, offsets, ids, n_seen, width, height)
        return torch.from_numpy(out), torch.from_numpy(acc)

    @staticmethod
    def backward(ctx, g_out, g_acc):
        m2, co, op, fe, offsets, ids, n_seen, width, height = ctx.saved
        g_out = np.ascontiguousarray(g_out.numpy(), dtype=fe.dtype)
        g_acc = np.ascontiguousarray(g_acc.numpy(), dtype=fe.dtype)
        d_m2, d_co, d_op, d_fe = _kernels.backward(m2, co, op, fe, offsets, ids, n_seen, width, height, Q_FADE, Q_MAX,
                                                   g_out, g_acc)
        return (torch.from_numpy(d_m2), torch.from_numpy(d_co), torch.from_numpy(d_op), torch.from_numpy(d_fe),
                None, None, None, None)


def render(means, rotmats, scales, opacities, colors, cam: Camera, semantic_probs=None) -> RenderOutput:
    """Composite world-space Gaussians front to back into ``cam``.

    Depth ties are broken by Gaussian index (stable sort), so renders are
    bit-reproducible.
    """
    n = means.shape[0]
    dtype = means.dtype
    h, w = cam.height, cam.width
    k = 0 if semantic_probs is None else semantic_probs.shape[1]
    if n == 0:
        seg = torch.zeros((h, w, k), dtype=dtype) if k else None
        return RenderOutput(torch.zeros((h, w, 3), dtype=dtype), torch.zeros((h, w), dtype=dtype), seg,
                            np.zeros(0, dtype=np.int64), 0)
    visible, mean2d, cov2d, depth = project(means, rotmats, scales, cam)
    conic = conic_from_cov(cov2d)
    feats = colors[visible] if k == 0 else torch.cat([colors[visible], semantic_probs[visible]], dim=1)
    order = np.argsort(depth.detach().numpy(), kind="stable").astype(np.int64)
    radius = _radii(cov2d)
    out, acc = RasterizeFunction.apply(mean2d, conic, opacities[visible], feats, radius, order, w, h)
    seg = out[..., 3:] if k else None
    return RenderOutput(out[..., :3], acc, seg, visible.numpy()[order], int(n - len(visible)))


def semantic_probabilities(logits):
    return torch.softmax(torch.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP), dim=-1)


def render_tensors(g: GaussianTensors, cam: Camera, with_semantics=True) -> RenderOutput:
    rot = quat_to_matrix_t(g.quats)
    probs = semantic_probabilities(g.semantic_logits) if with_semantics else None
    return render(g.means, rot, torch.exp(g.log_scales), torch.sigmoid(g.opacity_logits), g.colors, cam, probs)


def render_parts(parts, rotations, translations, cam: Camera, with_semantics=True) -> RenderOutput:
    """Render part-local Gaussian sets after moving part ``j`` by its pose.

    ``parts`` is a list of :class:`GaussianTensors`; ``rotations[j]`` (3, 3)
    and ``translations[j]`` (3,) are the torch pose of part ``j``.
    """
    means, rots, scales, opac, cols, probs = [], [], [], [], [], []
    for j, g in enumerate(parts):
        if len(g) == 0:
            continue
        r, t = rotations[j], translations[j]
        means.append(g.means @ r.T + t)
        rots.append(r @ quat_to_matrix_t(g.quats))
        scales.append(torch.exp(g.log_scales))
        opac.append(torch.sigmoid(g.opacity_logits))
        cols.append(g.colors)
        if with_semantics:
            probs.append(semantic_probabilities(g.semantic_logits))
    if not means:
        dtype = parts[0].means.dtype if parts else torch.float64
        empty = torch.zeros((0, 3), dtype=dtype)
        k = parts[0].semantic_logits.shape[1] if (parts and with_semantics) else 0
        return render(empty, torch.zeros((0, 3, 3), dtype=dtype), empty, torch.zeros(0, dtype=dtype), empty, cam,
                      torch.zeros((0, k), dtype=dtype) if k else None)
    return render(torch.cat(means), torch.cat(rots), torch.cat(scales), torch.cat(opac), torch.cat(cols), cam,
                  torch.cat(probs) if with_semantics else None)


def rasterize(parts, cam: Camera, with_semantics=True) -> RenderOutput:
    """Render ``[(SemanticSplat, RigidTransform), ...]`` with no gradient tracking."""
    if parts:
        k = {s.num_parts for s, _ in parts}
        if len(k) > 1:
            raise ValueError(f"part splats disagree on num_parts: {sorted(k)}")
    tensors, rots, trans = [], [], []
    for splat, pose in parts:
        tensors.append(GaussianTensors.from_splat(splat))
        rots.append(torch.tensor(pose.rotation_matrix))
        trans.append(torch.tensor(pose.translation))
    with torch.no_grad():
        return render_parts(tensors, rots, trans, cam, with_semantics=with_semantics)
