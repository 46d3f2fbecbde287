"""Image losses: L1, SSIM, accumulation and masked cross-entropy."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from ..splat import UNLABELED

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
CE_EPS = 1e-12


class UnlabeledViewWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LossWeights:
    acc: float = 1.0
    l1: float = 0.8
    ssim: float = 0.2
    seg: float = 1.0

    def __post_init__(self):
        vals = (self.acc, self.l1, self.ssim, self.seg)
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be nonnegative")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")


def _gauss_kernel(dtype):
    x = torch.arange(SSIM_WINDOW, dtype=dtype) - (SSIM_WINDOW - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _filter(img, k):
    # img: (C, H, W); separable Gaussian, 'valid' support
    c = img.shape[0]
    x = img[:, None]
    x = F.conv2d(x, k.view(1, 1, 1, -1))
    x = F.conv2d(x, k.view(1, 1, -1, 1))
    return x[:, 0]


def ssim(a, b) -> torch.Tensor:
    """Mean SSIM over the fully-covered window positions.

    11x11 Gaussian window (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2, data range 1.
    Accepts (H, W) or (H, W, C) arrays/tensors.
    """
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"ssim: images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    dtype = torch.promote_types(a.dtype, b.dtype)
    if not dtype.is_floating_point:
        dtype = torch.float64
    a = a.to(dtype)
    b = b.to(dtype)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    a = a.permute(2, 0, 1)
    b = b.permute(2, 0, 1)
    k = _gauss_kernel(dtype)
    mu_a, mu_b = _filter(a, k), _filter(b, k)
    saa = _filter(a * a, k) - mu_a ** 2
    sbb = _filter(b * b, k) - mu_b ** 2
    sab = _filter(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (saa + sbb + SSIM_C2)
    return (num / den).mean()


def accumulation_target(labels):
    """``(target, mask)`` from a label image: parts -> 1, background -> 0, sentinel masked."""
    labels = np.asarray(labels)
    mask = labels != UNLABELED
    target = ((labels != 0) & mask).astype(np.float64)
    return target, mask


def segmentation_distribution(out):
    """Per-pixel class distribution: composited part probabilities, with the
    untouched transmittance added to the background class."""
    seg = out.segmentation
    bg = seg[..., :1] + (1.0 - out.accumulation)[..., None]
    return torch.cat([bg, seg[..., 1:]], dim=-1)


def cross_entropy(out, labels):
    """Mean CE over labeled pixels, or None when nothing is labeled."""
    labels = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    mask = labels != UNLABELED
    if not bool(mask.any()):
        return None
    probs = segmentation_distribution(out)[mask]
    picked = probs.gather(1, labels[mask][:, None])[:, 0]
    return -torch.log(picked + CE_EPS).mean()


def total_loss(out, gt_rgb, gt_acc, gt_labels, w: LossWeights, acc_mask=None, terms=None):
    """Weighted sum of accumulation L1, RGB L1, 1-SSIM and segmentation CE.

    ``acc_mask`` restricts the accumulation term (defaults to the labeled
    pixels of ``gt_labels``).  If ``terms`` is a dict it receives the
    individual unweighted values.
    """
    dtype = out.rgb.dtype
    gt_rgb = torch.as_tensor(np.asarray(gt_rgb), dtype=dtype)
    if gt_rgb.shape != out.rgb.shape:
        raise ValueError(f"rgb shape mismatch {tuple(gt_rgb.shape)} vs {tuple(out.rgb.shape)}")
    zero = out.rgb.sum() * 0.0
    loss = zero
    if w.l1 > 0:
        l1 = (out.rgb - gt_rgb).abs().mean()
        loss = loss + w.l1 * l1
        if terms is not None:
            terms["l1"] = float(l1)
    if w.ssim > 0:
        ls = 1.0 - ssim(out.rgb, gt_rgb)
        loss = loss + w.ssim * ls
        if terms is not None:
            terms["ssim"] = float(ls)
    if w.acc > 0 and gt_acc is not None:
        if acc_mask is None:
            acc_mask = np.ones(out.accumulation.shape, dtype=bool) if gt_labels is None else \
                np.asarray(gt_labels) != UNLABELED
        mask = torch.as_tensor(np.asarray(acc_mask, dtype=bool))
        if bool(mask.any()):
            gt_acc_t = torch.as_tensor(np.asarray(gt_acc), dtype=dtype)
            la = (out.accumulation - gt_acc_t).abs()[mask].mean()
            loss = loss + w.acc * la
            if terms is not None:
                terms["acc"] = float(la)
    if w.seg > 0:
        if out.segmentation is None:
            raise ValueError("segmentation term requested but render has no segmentation")
        ce = cross_entropy(out, gt_labels) if gt_labels is not None else None
        if ce is None:
            warnings.warn("no labeled pixels; segmentation term contributes 0", UnlabeledViewWarning, stacklevel=2)
        else:
            loss = loss + w.seg * ce
            if terms is not None:
                terms["seg"] = float(ce)
    return loss


@dataclass
class GradientBuffer:
    """Named gradients after a backward pass (numpy copies)."""

    gaussians: dict = field(default_factory=dict)
    poses: dict = field(default_factory=dict)

    @classmethod
    def collect(cls, gaussian_params: dict, pose_params: dict | None = None):
        def grab(params):
            return {k: (np.zeros(tuple(v.shape)) if v.grad is None else v.grad.detach().numpy().copy())
                    for k, v in params.items()}
        return cls(grab(gaussian_params), grab(pose_params or {}))

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for d in (self.gaussians, self.poses) for v in d.values())
