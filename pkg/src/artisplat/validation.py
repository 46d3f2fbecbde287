"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.utils import check_array


def check_points(points, name="points", allow_empty=False) -> np.ndarray:
    """Finite float64 ``(n, 3)`` array."""
    arr = check_array(np.asarray(points, dtype=np.float64).reshape(-1, 3), dtype=np.float64,
                      ensure_min_samples=0 if allow_empty else 1, input_name=name)
    return arr


def check_unit_vector(v, name="axis", tol=1e-9) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be a finite 3-vector")
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError(f"{name} must be non-zero")
    if abs(n - 1.0) > tol:
        v = v / n
    return v


def check_positive(value, name):
    if not (np.isfinite(value) and value > 0):
        raise ValueError(f"{name} must be positive, got {value!r}")
    return value


def check_fraction(value, name="fraction"):
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value!r}")
    return float(value)


def check_existing(path, name="path") -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{name} does not exist: {p}")
    return p


def check_config_vector(values, n) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if len(v) != n:
        raise ValueError(f"configuration vector has {len(v)} values, expected {n}")
    if not np.all(np.isfinite(v)):
        raise ValueError("configuration vector must be finite")
    return v
