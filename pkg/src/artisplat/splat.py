"""Semantic Gaussian splats, cameras, scene datasets and their on-disk formats."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geom import RigidTransform, quat_to_matrix

logger = logging.getLogger(__name__)

UNLABELED = 255
SPLAT_MAGIC = b"ARTSPLATv1" + b"\0" * 6
_MAGIC_PREFIX = b"ARTSPLATv"
MANIFEST_FORMAT = "artisplat-scene/1"

LOG_SCALE_MIN = math.log(1e-6)
LOG_SCALE_MAX = math.log(10.0)


class SplatFormatError(ValueError):
    pass


class DatasetError(ValueError):
    pass


class EmptyPartWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# splats
# ---------------------------------------------------------------------------

@dataclass
class Gaussian:
    mean: np.ndarray
    log_scale: np.ndarray
    quat: np.ndarray
    opacity_logit: float
    color: np.ndarray
    semantic_logits: np.ndarray

    @property
    def scale(self):
        return np.exp(np.asarray(self.log_scale, dtype=np.float64))

    @property
    def opacity(self):
        return 1.0 / (1.0 + math.exp(-float(self.opacity_logit)))


_FIELDS = (
    ("means", "mean", 3),
    ("log_scales", "log_scale", 3),
    ("quats", "quat", 4),
    ("opacity_logits", "opacity_logit", 1),
    ("colors", "color", 3),
)


@dataclass(eq=False)
class SemanticSplat:
    """Struct-of-arrays Gaussian set; all arrays are float32.

    ``semantic_logits`` has ``num_parts + 1`` columns: column 0 is the
    background class, columns ``1..num_parts`` are object parts.
    """

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    semantic_logits: np.ndarray
    num_parts: int = field(default=None)

    def __post_init__(self):
        n = len(np.asarray(self.means))
        for name, _, width in _FIELDS:
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            shape = (n,) if width == 1 else (n, width)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            setattr(self, name, arr)
        sem = np.ascontiguousarray(self.semantic_logits, dtype=np.float32)
        if sem.ndim != 2 or len(sem) != n:
            raise ValueError(f"semantic_logits: expected ({n}, K), got {sem.shape}")
        if self.num_parts is None:
            self.num_parts = sem.shape[1] - 1
        if sem.shape[1] != self.num_parts + 1:
            raise ValueError(f"semantic_logits has {sem.shape[1]} columns, expected num_parts+1={self.num_parts + 1}")
        self.semantic_logits = sem
        self.num_parts = int(self.num_parts)

    @classmethod
    def empty(cls, num_parts):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)),
                   np.zeros((0, num_parts + 1)), num_parts)

    def __len__(self):
        return len(self.means)

    def __getitem__(self, i) -> Gaussian:
        return Gaussian(self.means[i], self.log_scales[i], self.quats[i], float(self.opacity_logits[i]),
                        self.colors[i], self.semantic_logits[i])

    def __eq__(self, other):
        if not isinstance(other, SemanticSplat):
            return NotImplemented
        return self.num_parts == other.num_parts and all(
            np.array_equal(getattr(self, n), getattr(other, n))
            for n in ("means", "log_scales", "quats", "opacity_logits", "colors", "semantic_logits"))

    @property
    def opacities(self):
        return 1.0 / (1.0 + np.exp(-self.opacity_logits.astype(np.float64)))

    @property
    def scales(self):
        return np.exp(self.log_scales.astype(np.float64))

    def subset(self, mask) -> "SemanticSplat":
        """New splat holding copies of the selected Gaussians."""
        return SemanticSplat(*(np.array(getattr(self, n)[mask]) for n in
                               ("means", "log_scales", "quats", "opacity_logits", "colors", "semantic_logits")),
                             num_parts=self.num_parts)

    def copy(self) -> "SemanticSplat":
        return self.subset(slice(None))

    def geometry_checksum(self) -> str:
        h = hashlib.sha256()
        for name, _, _ in _FIELDS:
            h.update(getattr(self, name).tobytes())
        return h.hexdigest()

    @staticmethod
    def concatenate(splats) -> "SemanticSplat":
        splats = list(splats)
        if not splats:
            raise ValueError("nothing to concatenate")
        return SemanticSplat(*(np.concatenate([getattr(s, n) for s in splats]) for n in
                               ("means", "log_scales", "quats", "opacity_logits", "colors", "semantic_logits")),
                             num_parts=splats[0].num_parts)


def covariance(g: Gaussian) -> np.ndarray:
    """World covariance ``R diag(s)^2 R^T`` of a single Gaussian."""
    r = quat_to_matrix(np.asarray(g.quat, dtype=np.float64))
    m = r * np.exp(np.asarray(g.log_scale, dtype=np.float64))[None, :]
    return m @ m.T


def part_assignment(splat: SemanticSplat, warn=True) -> np.ndarray:
    """Label per Gaussian: argmax of its semantic logits (first max wins).

    0 means background; such Gaussians belong to no part.
    """
    labels = np.argmax(splat.semantic_logits, axis=1)
    counts = np.bincount(labels, minlength=splat.num_parts + 1)
    empty = [p for p in range(1, splat.num_parts + 1) if counts[p] == 0]
    if empty and warn:
        warnings.warn(f"parts with no Gaussians: {empty}", EmptyPartWarning, stacklevel=2)
    return labels


def save_splat(splat: SemanticSplat, path) -> None:
    k = splat.num_parts + 1
    header = (f"num_gaussians={len(splat)}\nnum_parts={splat.num_parts}\n"
              f"fields=mean:3,log_scale:3,quat:4,opacity_logit:1,color:3,semantic:{k}\n\n")
    records = np.concatenate([
        splat.means, splat.log_scales, splat.quats, splat.opacity_logits[:, None], splat.colors,
        splat.semantic_logits], axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(SPLAT_MAGIC)
        fh.write(header.encode("ascii"))
        fh.write(records.tobytes())


def load_splat(path) -> SemanticSplat:
    data = Path(path).read_bytes()
    magic = data[:16]
    if magic != SPLAT_MAGIC:
        if magic.startswith(_MAGIC_PREFIX):
            version = magic.rstrip(b"\0").decode("ascii", "replace")
            raise SplatFormatError(f"unsupported splat format version {version}")
        raise SplatFormatError("not a splat file (bad magic)")
    end = data.find(b"\n\n", 16)
    if end < 0:
        raise SplatFormatError("truncated header")
    try:
        header = dict(line.split("=", 1) for line in data[16:end].decode("ascii").splitlines())
        n = int(header["num_gaussians"])
        num_parts = int(header["num_parts"])
        fields = dict(f.split(":") for f in header["fields"].split(","))
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise SplatFormatError(f"malformed header: {exc}") from exc
    if int(fields.get("semantic", -1)) != num_parts + 1:
        raise SplatFormatError(f"header semantic width {fields.get('semantic')} inconsistent with num_parts={num_parts}")
    width = 14 + num_parts + 1
    body = data[end + 2:]
    expected = n * width * 4
    if len(body) != expected:
        raise SplatFormatError(f"truncated or oversized body: expected {expected} bytes for {n} Gaussians, got {len(body)}")
    rec = np.frombuffer(body, dtype="<f4").reshape(n, width).astype(np.float32)
    return SemanticSplat(rec[:, 0:3], rec[:, 3:6], rec[:, 6:10], rec[:, 10], rec[:, 11:14], rec[:, 14:], num_parts)


# ---------------------------------------------------------------------------
# cameras and datasets
# ---------------------------------------------------------------------------

@dataclass
class Camera:
    """Pinhole camera, OpenCV axes (x right, y down, z forward).

    Pixel ``(row i, col j)`` has its centre at image coordinates
    ``(j + 0.5, i + 0.5)``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform = field(default_factory=RigidTransform)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 8 or self.height < 8:
            raise ValueError("images must be at least 8x8")
        self.width, self.height = int(self.width), int(self.height)

    def world_to_camera(self):
        """``(R, t)`` with ``x_cam = R @ x_world + t``."""
        r = self.pose.rotation_matrix
        return r.T, -r.T @ self.pose.translation

    @classmethod
    def look_at(cls, eye, target, f, width, height, up=(0.0, 0.0, 1.0)):
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        up = np.asarray(up, dtype=np.float64)
        if abs(z @ up) > 0.99:
            up = np.array([0.0, 1.0, 0.0])
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        r = np.stack([x, y, z], axis=1)
        return cls(f, f, width / 2.0, height / 2.0, width, height, RigidTransform.from_rotation_matrix(r, eye))


@dataclass
class Observation:
    camera: Camera
    rgb: np.ndarray      # (H, W, 3) float64 in [0, 1]
    labels: np.ndarray   # (H, W) uint8, UNLABELED where unknown

    @property
    def is_labeled(self):
        return bool(np.any(self.labels != UNLABELED))


@dataclass
class SceneDataset:
    time: int
    num_parts: int
    observations: list

    def __len__(self):
        return len(self.observations)

    @property
    def labeled_indices(self):
        return [i for i, o in enumerate(self.observations) if o.is_labeled]

    def validate(self):
        if not self.observations:
            raise DatasetError("dataset has no observations")
        h, w = self.observations[0].rgb.shape[:2]
        for i, obs in enumerate(self.observations):
            if obs.rgb.shape != (h, w, 3) or obs.labels.shape != (h, w):
                raise DatasetError(f"view {i}: dimension mismatch ({obs.rgb.shape}, {obs.labels.shape}) vs {(h, w)}")
            if (obs.camera.width, obs.camera.height) != (w, h):
                raise DatasetError(f"view {i}: camera size {(obs.camera.width, obs.camera.height)} != image {(w, h)}")
            bad = (obs.labels > self.num_parts) & (obs.labels != UNLABELED)
            if np.any(bad):
                raise DatasetError(f"view {i}: label {int(obs.labels[bad].max())} out of range 0..{self.num_parts}")
        return self


def _read_png(path, mode):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except FileNotFoundError:
        raise DatasetError(f"missing file: {path}") from None


def load_dataset(manifest_path) -> SceneDataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DatasetError(f"missing file: {manifest_path}")
    doc = json.loads(manifest_path.read_text())
    if doc.get("format") != MANIFEST_FORMAT:
        raise DatasetError(f"unknown manifest format {doc.get('format')!r}")
    root = manifest_path.parent
    num_parts = int(doc["num_parts"])
    observations = []
    for i, view in enumerate(doc["views"]):
        cam = Camera(view["fx"], view["fy"], view["cx"], view["cy"], view["width"], view["height"],
                     RigidTransform.from_matrix(np.array(view["camera_to_world"], dtype=np.float64)))
        rgb = _read_png(root / view["rgb"], "RGB").astype(np.float64) / 255.0
        label_file = view.get("labels")
        if label_file is None:
            labels = np.full(rgb.shape[:2], UNLABELED, dtype=np.uint8)
        elif not (root / label_file).exists():
            logger.warning("view %d: label image %s missing, treating view as unlabeled", i, label_file)
            labels = np.full(rgb.shape[:2], UNLABELED, dtype=np.uint8)
        else:
            labels = _read_png(root / label_file, "L").astype(np.uint8)
        observations.append(Observation(cam, rgb, labels))
    return SceneDataset(int(doc["time"]), num_parts, observations).validate()


def save_dataset(ds: SceneDataset, directory) -> Path:
    """Write PNGs plus ``manifest.json``; unlabeled views get ``labels: null``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    views = []
    for i, obs in enumerate(ds.observations):
        cam = obs.camera
        rgb_name = f"rgb_{i:04d}.png"
        Image.fromarray(np.round(np.clip(obs.rgb, 0, 1) * 255).astype(np.uint8), "RGB").save(directory / rgb_name)
        label_name = None
        if obs.is_labeled:
            label_name = f"labels_{i:04d}.png"
            Image.fromarray(obs.labels.astype(np.uint8), "L").save(directory / label_name)
        views.append({
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "width": cam.width, "height": cam.height,
            "camera_to_world": cam.pose.as_matrix().reshape(-1).tolist(),
            "rgb": rgb_name, "labels": label_name,
        })
    manifest = {"format": MANIFEST_FORMAT, "time": ds.time, "num_parts": ds.num_parts, "views": views}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path
