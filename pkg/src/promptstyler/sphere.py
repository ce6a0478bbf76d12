"""Vector helpers for the unit hypersphere.

Feature vectors are plain 1-D numpy arrays. Unit-norm-ness is a property
checked with :func:`is_unit`, not a flag carried around.
"""

import numpy as np

from .errors import DimensionMismatch, NotNormalized, ZeroVector

ZERO_EPS = 1e-12
UNIT_TOL = 1e-6
_IDEMPOTENT_TOL = 8 * np.finfo(np.float64).eps


def as_vector(v, dtype=np.float64):
    arr = np.asarray(v, dtype=dtype)
    if arr.ndim != 1:
        raise DimensionMismatch(f"expected a 1-D vector, got shape {arr.shape}")
    return arr


def l2_normalize(v):
    """Return ``v / ||v||``. The input array is never modified."""
    arr = as_vector(v)
    norm = np.sqrt(np.dot(arr, arr))
    if not norm > ZERO_EPS:
        raise ZeroVector(f"cannot normalize vector with norm {norm!r}")
    # already unit up to round-off: dividing again would only jitter the last bits
    if abs(norm - 1.0) <= _IDEMPOTENT_TOL:
        return arr.copy()
    return arr / norm


def l2_normalize_rows(m):
    arr = np.asarray(m, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", arr, arr))
    if np.any(~(norms > ZERO_EPS)):
        raise ZeroVector("matrix has a zero row")
    out = arr / norms[:, None]
    already = np.abs(norms - 1.0) <= _IDEMPOTENT_TOL
    out[already] = arr[already]
    return out


def cosine(a, b):
    """Cosine similarity clamped to [-1, 1]."""
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.sqrt(np.dot(a, a))
    nb = np.sqrt(np.dot(b, b))
    if not (na > ZERO_EPS and nb > ZERO_EPS):
        raise ZeroVector("cosine of a zero vector is undefined")
    c = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(-1.0, c))


def is_unit(v, tol=UNIT_TOL):
    arr = np.asarray(v, dtype=np.float64)
    return bool(abs(np.sqrt(np.dot(arr, arr)) - 1.0) <= tol)


def require_unit(*vectors, tol=UNIT_TOL):
    for v in vectors:
        if not is_unit(v, tol):
            norm = float(np.linalg.norm(v))
            raise NotNormalized(f"expected unit-norm vector, got norm {norm:.9g}")


def normalize_with_grad(x):
    """Batched ``y = x / ||x||`` along the last axis plus its pullback.

    The pullback maps dL/dy to dL/dx = (g - y (y . g)) / ||x||.
    """
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(~(norm > ZERO_EPS)):
        raise ZeroVector("cannot normalize a zero vector")
    y = x / norm

    def pullback(g):
        g = np.asarray(g, dtype=np.float64)
        return (g - y * np.sum(y * g, axis=-1, keepdims=True)) / norm

    return y, pullback
