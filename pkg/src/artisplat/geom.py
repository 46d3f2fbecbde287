"""Rigid-body algebra, Euler poses and point-set alignment.

Rotations are unit quaternions in ``(w, x, y, z)`` order.  Euler angles
``(ax, ay, az)`` map to the matrix ``Rz(az) @ Ry(ay) @ Rx(ax)``; this is the
only convention used anywhere in the package.

Torch counterparts (suffix ``_t``) exist for everything the optimisers need
to differentiate through.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

__all__ = [
    "RigidTransform",
    "EulerPose",
    "RankDeficientError",
    "compose",
    "inverse",
    "euler_to_transform",
    "euler_to_matrix",
    "matrix_to_euler",
    "apply",
    "kabsch_align",
    "icp_align",
    "quat_to_matrix",
    "matrix_to_quat",
    "axis_angle_to_matrix",
    "matrix_to_axis_angle",
    "rotation_angle",
    "euler_to_matrix_t",
    "quat_to_matrix_t",
    "axis_angle_to_matrix_t",
]


class RankDeficientError(ValueError):
    """Point sets too degenerate (coincident or collinear) to fix a rotation."""


# ---------------------------------------------------------------------------
# quaternion / matrix helpers (numpy)
# ---------------------------------------------------------------------------

def _quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    q = q / n
    # canonical hemisphere keeps equality checks meaningful
    return -q if q[0] < 0 else q


def _quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q):
    """Rotation matrix of one quaternion or a stack ``(..., 4)``."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m):
    m = np.asarray(m, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return _quat_normalize(q)


def axis_angle_to_matrix(axis, angle):
    """Rodrigues rotation about ``axis`` (normalised here) by ``angle`` radians."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def matrix_to_axis_angle(m):
    """Return ``(unit axis, angle in [0, pi])``; axis is +x for the identity."""
    m = np.asarray(m, dtype=np.float64)
    q = matrix_to_quat(m)
    s = np.linalg.norm(q[1:])
    if s < 1e-15:
        return np.array([1.0, 0.0, 0.0]), 0.0
    angle = 2.0 * np.arctan2(s, q[0])
    return q[1:] / s, float(angle)


def rotation_angle(m):
    """Geodesic angle of a rotation matrix, radians."""
    return matrix_to_axis_angle(m)[1]


def euler_to_matrix(angles):
    ax, ay, az = np.asarray(angles, dtype=np.float64)
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def matrix_to_euler(m):
    """Inverse of :func:`euler_to_matrix` (principal branch, ay in [-pi/2, pi/2])."""
    m = np.asarray(m, dtype=np.float64)
    ay = np.arcsin(np.clip(-m[2, 0], -1.0, 1.0))
    if abs(np.cos(ay)) > 1e-9:
        ax = np.arctan2(m[2, 1], m[2, 2])
        az = np.arctan2(m[1, 0], m[0, 0])
    else:  # gimbal lock: fold everything into az
        ax = 0.0
        az = np.arctan2(-m[0, 1], m[1, 1])
    return np.array([ax, ay, az])


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Element of SE(3): ``x -> R(rotation) @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _quat_normalize(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_translation(cls, t):
        return cls(translation=t)

    @classmethod
    def from_rotation_matrix(cls, r, t=(0.0, 0.0, 0.0)):
        return cls(matrix_to_quat(r), t)

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(matrix_to_quat(m[:3, :3]), m[:3, 3])

    @property
    def rotation_matrix(self):
        return quat_to_matrix(self.rotation)

    def as_matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other):
        return compose(self, other)

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation)

    def allclose(self, other, atol=1e-9):
        return np.allclose(self.as_matrix(), other.as_matrix(), atol=atol, rtol=0.0)


@dataclass
class EulerPose:
    """Six-number pose: translation (m) and unwrapped Euler angles (rad)."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angles: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.angles = np.asarray(self.angles, dtype=np.float64).reshape(3)

    def to_transform(self):
        return euler_to_transform(self)

    @classmethod
    def from_transform(cls, t: RigidTransform):
        return cls(t.translation.copy(), matrix_to_euler(t.rotation_matrix))


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    rot = _quat_mul(a.rotation, b.rotation)
    return RigidTransform(rot, a.rotation_matrix @ b.translation + a.translation)


def inverse(t: RigidTransform) -> RigidTransform:
    conj = t.rotation * np.array([1.0, -1.0, -1.0, -1.0])
    return RigidTransform(conj, -(quat_to_matrix(conj) @ t.translation))


def euler_to_transform(p: EulerPose) -> RigidTransform:
    if not np.any(p.angles):
        return RigidTransform(translation=p.translation)
    return RigidTransform.from_rotation_matrix(euler_to_matrix(p.angles), p.translation)


def apply(t: RigidTransform, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ t.rotation_matrix.T + t.translation


def kabsch_align(src, dst) -> RigidTransform:
    """Least-squares rigid transform taking ``src[i]`` onto ``dst[i]``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"expected matching (n, 3) arrays, got {src.shape} and {dst.shape}")
    if len(src) < 3:
        raise RankDeficientError("need at least 3 correspondences")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - cs, dst - cd
    for pts in (a, b):
        sv = np.linalg.svd(pts, compute_uv=False)
        if sv[0] < 1e-12 or sv[1] < 1e-9 * sv[0]:
            raise RankDeficientError("point set is coincident or collinear")
    h = a.T @ b
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform.from_rotation_matrix(r, cd - r @ cs)


def _nearest(src, dst, chunk=2048):
    idx = np.empty(len(src), dtype=np.int64)
    dist = np.empty(len(src))
    dst_sq = np.einsum("ij,ij->i", dst, dst)
    for s in range(0, len(src), chunk):
        block = src[s:s + chunk]
        d2 = np.einsum("ij,ij->i", block, block)[:, None] - 2.0 * block @ dst.T + dst_sq[None, :]
        j = np.argmin(d2, axis=1)
        idx[s:s + chunk] = j
        dist[s:s + chunk] = np.linalg.norm(block - dst[j], axis=1)
    return idx, dist


def icp_align(src, dst, max_iters=50, tol=1e-7, init: RigidTransform | None = None) -> RigidTransform:
    """Point-to-point ICP with brute-force nearest neighbours.

    Stops when the mean residual changes by less than ``tol`` metres.  The
    best transform seen (lowest mean residual) is returned.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("icp_align needs non-empty point sets")
    current = init if init is not None else RigidTransform.identity()
    moved = apply(current, src)
    idx, dist = _nearest(moved, dst)
    best, best_err = current, dist.mean()
    prev = best_err
    for _ in range(max_iters):
        try:
            step = kabsch_align(moved, dst[idx])
        except RankDeficientError:
            break
        current = compose(step, current)
        moved = apply(current, src)
        idx, dist = _nearest(moved, dst)
        err = dist.mean()
        if err < best_err:
            best, best_err = current, err
        if abs(prev - err) < tol:
            break
        prev = err
    return best


def icp_residual(t: RigidTransform, src, dst) -> float:
    """Mean nearest-neighbour distance from ``t(src)`` to ``dst``."""
    return float(_nearest(apply(t, src), np.asarray(dst, dtype=np.float64))[1].mean())


# ---------------------------------------------------------------------------
# torch counterparts
# ---------------------------------------------------------------------------

def euler_to_matrix_t(angles: torch.Tensor) -> torch.Tensor:
    """Batched ``Rz @ Ry @ Rx`` for ``angles`` of shape ``(..., 3)``."""
    ax, ay, az = angles.unbind(-1)
    cx, sx = torch.cos(ax), torch.sin(ax)
    cy, sy = torch.cos(ay), torch.sin(ay)
    cz, sz = torch.cos(az), torch.sin(az)
    m = torch.stack([
        cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx,
        sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx,
        -sy, cy * sx, cy * cx,
    ], dim=-1)
    return m.reshape(angles.shape[:-1] + (3, 3))


def quat_to_matrix_t(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    m = torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def axis_angle_to_matrix_t(axis: torch.Tensor, angle: torch.Tensor) -> torch.Tensor:
    """Rodrigues for a unit ``axis`` (3,) and a batch of angles ``(...,)``."""
    a = axis / axis.norm()
    zero = torch.zeros((), dtype=a.dtype)
    k = torch.stack([
        torch.stack([zero, -a[2], a[1]]),
        torch.stack([a[2], zero, -a[0]]),
        torch.stack([-a[1], a[0], zero]),
    ])
    angle = torch.as_tensor(angle, dtype=a.dtype)
    s = torch.sin(angle)[..., None, None]
    c = (1 - torch.cos(angle))[..., None, None]
    eye = torch.eye(3, dtype=a.dtype)
    return eye + s * k + c * (k @ k)
