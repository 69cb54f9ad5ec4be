"""Deterministic numeric primitives.

Everything here is a pure function over numpy arrays. Binary operations
validate shapes instead of broadcasting, and every result is checked for
NaN/Inf before it is returned.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateDistribution,
    DegenerateMatrix,
    EmptySet,
    InvalidParam,
    NumericError,
    ShapeError,
    TooFewPoints,
    ZeroVector,
)

# rho * n is computed in floating point; 0.28 * 25 == 7.000000000000001.
_CEIL_SLACK = 1e-9

LN_EPS = 1e-5


def _finite(x: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite value produced")
    return x


def ceil_fraction(frac: float, n: int) -> int:
    """ceil(frac * n), robust to float noise in the product."""
    return int(math.ceil(frac * n - _CEIL_SLACK))


def check_fraction(value: float, name: str) -> float:
    value = float(value)
    if not (0.0 < value <= 1.0) or math.isnan(value):
        raise InvalidParam(f"{name} must lie in (0, 1], got {value}")
    return value


def quantile_threshold(values: Sequence[float] | np.ndarray, rho: float) -> float:
    """Nearest-rank top-fraction cutoff.

    Returns the ``ceil(rho * n)``-th largest value, i.e. the smallest value
    ``v`` such that keeping everything ``>= v`` keeps the top ``rho`` share
    (exactly that many when the values are distinct).
    """
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise EmptySet("quantile_threshold needs at least one value")
    rho = check_fraction(rho, "rho")
    k = ceil_fraction(rho, arr.size)
    ordered = np.sort(arr)[::-1]
    return float(ordered[k - 1])


def knee_threshold(counts: Sequence[int] | np.ndarray) -> tuple[int, int]:
    """Maximum-distance-to-chord knee of a descending count curve.

    Counts are sorted descending into points ``(i, c_i)``; the chord runs from
    the first to the last point in raw (unnormalised) coordinates. The point
    farthest from the chord wins, ties going to the smaller index.

    Returns ``(threshold, knee_index)`` where ``threshold`` is the count at the
    knee.
    """
    c = np.asarray(counts)
    if c.ndim != 1 or c.size < 3:
        raise TooFewPoints(f"knee detection needs >= 3 points, got {c.size}")
    if np.any(c < 0) or not np.all(np.equal(np.mod(c, 1), 0)):
        raise InvalidParam("counts must be non-negative integers")
    ordered = sorted((int(v) for v in c), reverse=True)
    first, last = ordered[0], ordered[-1]
    if first == last:
        raise DegenerateDistribution("all counts are equal")
    span = len(ordered) - 1
    rise = last - first
    # |rise * i - span * (c_i - first)| is the perpendicular distance times the
    # (constant) chord length; integer arithmetic keeps ties exact.
    best_i, best_d = 0, -1
    for i, ci in enumerate(ordered):
        d = abs(rise * i - span * (ci - first))
        if d > best_d:
            best_i, best_d = i, d
    return ordered[best_i], best_i


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"cosine: shapes {u.shape} and {v.shape} differ")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroVector("cosine of a zero vector is undefined")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def projection_magnitude(w: np.ndarray, target: np.ndarray) -> float:
    """Signed scalar projection ``<w, target> / |target|``."""
    w = np.asarray(w, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if w.shape != target.shape:
        raise ShapeError(f"projection: shapes {w.shape} and {target.shape} differ")
    nt = np.linalg.norm(target)
    if nt == 0.0:
        raise ZeroVector("projection onto a zero vector is undefined")
    return float(_finite(np.asarray(np.dot(w, target) / nt)))


def cosine_rows(X: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Cosine between every row of ``X`` and ``ref``; zero rows give NaN."""
    X = np.asarray(X, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[1] != ref.size:
        raise ShapeError(f"cosine_rows: {X.shape} vs {ref.shape}")
    nref = np.linalg.norm(ref)
    if nref == 0.0:
        raise ZeroVector("reference row is zero")
    norms = np.linalg.norm(X, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (X @ ref) / (norms * nref)
    out[norms == 0.0] = np.nan
    return np.clip(out, -1.0, 1.0)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return _finite(e / np.sum(e, axis=axis, keepdims=True))


def layer_norm(
    x: np.ndarray,
    gain: np.ndarray | None = None,
    bias: np.ndarray | None = None,
    eps: float = LN_EPS,
) -> np.ndarray:
    """Zero-mean unit-variance normalisation over the last axis."""
    x = np.asarray(x)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    out = (x - mu) / np.sqrt(var + eps)
    if gain is not None:
        if gain.shape != x.shape[-1:]:
            raise ShapeError(f"layer_norm gain {gain.shape} vs input {x.shape}")
        out = out * gain
    if bias is not None:
        if bias.shape != x.shape[-1:]:
            raise ShapeError(f"layer_norm bias {bias.shape} vs input {x.shape}")
        out = out + bias
    return _finite(out)


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    x = np.asarray(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "silu":
        # x * sigmoid(x), written to avoid overflow for large |x|
        return _finite(x * (0.5 * (1.0 + np.tanh(0.5 * x))))
    raise InvalidParam(f"unknown activation kind {kind!r}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return _finite(a @ b)


def scaled_identity_deviation(P: np.ndarray) -> tuple[float, float]:
    """Fit ``P ~ lam * I`` with ``lam = mean(diag P)``.

    Returns ``(relative Frobenius residual, lam)``.
    """
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != P.shape[1] or P.size == 0:
        raise ShapeError(f"expected a non-empty square matrix, got {P.shape}")
    lam = float(np.mean(np.diag(P)))
    if not lam > 0.0:
        raise DegenerateMatrix(f"mean diagonal {lam} is not positive")
    n = P.shape[0]
    resid = P.copy()
    resid[np.diag_indices(n)] -= lam
    return float(np.linalg.norm(resid) / (lam * math.sqrt(n))), lam


def random_orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Matrix with orthonormal rows (wide) or orthonormal columns (tall)."""
    n = max(rows, cols)
    g = rng.standard_normal((n, min(rows, cols)))
    q, r = np.linalg.qr(g)
    # sign fix makes the draw Haar-distributed
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T
