"""Dense float64 linear algebra and RNG helpers used by every component.

Everything is backed by numpy with float64 storage. Reductions rely on
numpy's fixed-order kernels, so repeated runs on the same build are
bit-identical. Seeded generators are PCG64 (counter-based), which produces
the same stream on every platform.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError

# Below this norm, normalization is refused instead of risking a silent
# blow-up that would corrupt training invisibly.
EPS_NORM = 1e-12


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seed gives identical draws."""
    return np.random.default_rng(seed)


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array, raising on bad input."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name}: expected 2-D array, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"{name}: contains non-finite entries")
    return m


def as_vector(a, name: str = "vector") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 1:
        raise ValueError(f"{name}: expected 1-D array, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"{name}: contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "matmul lhs")
    b = as_matrix(b, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul: inner dimensions differ ({a.shape[1]} vs {b.shape[0]})"
        )
    return a @ b


def euclidean_distance(u, v) -> float:
    u = as_vector(u, "distance lhs")
    v = as_vector(v, "distance rhs")
    if u.shape[0] != v.shape[0]:
        raise ValueError(
            f"euclidean_distance: length mismatch ({u.shape[0]} vs {v.shape[0]})"
        )
    diff = u - v
    return float(np.sqrt(np.dot(diff, diff)))


def l2_normalize(v) -> np.ndarray:
    v = as_vector(v, "l2_normalize input")
    norm = float(np.sqrt(np.dot(v, v)))
    if norm < EPS_NORM:
        raise NumericalError(f"l2_normalize: norm {norm:g} below {EPS_NORM:g}")
    return v / norm


def l2_normalize_rows(m) -> tuple[np.ndarray, np.ndarray]:
    """Normalize each row to unit norm; returns (normalized, row norms)."""
    m = as_matrix(m, "l2_normalize_rows input")
    norms = np.sqrt(np.sum(m * m, axis=1))
    if np.any(norms < EPS_NORM):
        bad = int(np.argmin(norms))
        raise NumericalError(
            f"l2_normalize_rows: row {bad} has norm {norms[bad]:g} below {EPS_NORM:g}"
        )
    return m / norms[:, None], norms
