"""Small dense linear algebra, seeded randomness and finite-difference oracles.

Matrices and vectors are plain float64 numpy arrays. The helpers here add the
shape/finiteness checks the rest of the package relies on, and the
finite-difference routines serve as independent oracles for every analytic
gradient in the package.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import lapack


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NotSPDError(np.linalg.LinAlgError):
    """Cholesky factorization broke down.

    ``pivot`` is the 1-based index of the leading minor that is not positive
    definite.
    """

    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = pivot
        super().__init__(message or f"matrix is not positive definite (leading minor {pivot} failed)")


class NonFiniteError(FloatingPointError):
    pass


def as_mat(a, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} has non-finite entries")
    return arr


def as_vec(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} has non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_mat(a, "left operand")
    b = as_mat(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("product overflowed")
    return out


def cholesky(a) -> np.ndarray:
    """Lower Cholesky factor; raises :class:`NotSPDError` naming the failed pivot."""
    a = as_mat(a)
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got {a.shape}")
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise NotSPDError(int(info))
    if info < 0:  # pragma: no cover - argument error inside LAPACK
        raise ValueError(f"dpotrf: illegal argument {-info}")
    return c


def solve_spd(a, b) -> np.ndarray:
    """Solve ``a x = b`` for symmetric positive definite ``a`` by Cholesky.

    ``b`` may be a vector or a matrix of right-hand sides.
    """
    c = cholesky(a)
    b = np.asarray(b, dtype=float)
    if b.shape[0] != c.shape[0]:
        raise DimensionError(f"rhs has {b.shape[0]} rows, matrix is {c.shape}")
    x, info = lapack.dpotrs(c, b, lower=1)
    if info != 0:  # pragma: no cover
        raise ValueError(f"dpotrs failed with info={info}")
    return x


def smallest_eig_spd(a, iters: int = 200, tol: float = 1e-12) -> float:
    """Smallest eigenvalue of an SPD matrix by inverse power iteration.

    Returns 0.0 when the Cholesky factorization fails, i.e. the matrix is
    numerically singular or indefinite.
    """
    a = as_mat(a)
    try:
        c = cholesky(a)
    except NotSPDError:
        return 0.0
    x = np.ones(a.shape[0]) / np.sqrt(a.shape[0])
    lam = np.inf
    for _ in range(iters):
        y, _ = lapack.dpotrs(c, x, lower=1)
        y_norm = np.linalg.norm(y)
        x = y / y_norm
        new_lam = 1.0 / y_norm
        if abs(new_lam - lam) <= tol * max(1.0, new_lam):
            return float(new_lam)
        lam = new_lam
    return float(x @ a @ x)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed`` and optional stream ids.

    Equal keys give bit-identical draw sequences on every platform; normal
    variates use numpy's ziggurat transform of the Philox stream.
    """
    if seed < 0 or any(s < 0 for s in stream):
        raise ValueError("seed and stream ids must be non-negative")
    ss = np.random.SeedSequence([int(seed), *map(int, stream)])
    return np.random.Generator(np.random.Philox(ss))


def _finite(value: float, where) -> float:
    value = float(value)
    if not np.isfinite(value):
        raise NonFiniteError(f"function is not finite at {where}")
    return value


def fd_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``f`` at ``x`` (any array shape)."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _finite(f(x), "x + h e_%d" % i)
        flat[i] = orig - h
        fm = _finite(f(x), "x - h e_%d" % i)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


@dataclass
class Hessian2D:
    matrix: np.ndarray
    lambda_max: float
    trace: float
    asymmetry: float
    warnings: list[str] = field(default_factory=list)


def eig2_sym(h: np.ndarray) -> tuple[float, float]:
    """Eigenvalues (small, large) of a symmetric 2x2 matrix in closed form."""
    a, b, c = h[0, 0], 0.5 * (h[0, 1] + h[1, 0]), h[1, 1]
    mid = 0.5 * (a + c)
    rad = np.hypot(0.5 * (a - c), b)
    return float(mid - rad), float(mid + rad)


def fd_hessian_2d(
    f: Callable[[float, float], float],
    h: float = 1e-4,
    center: tuple[float, float] = (0.0, 0.0),
) -> Hessian2D:
    """Second-difference Hessian of a two-variable function.

    The returned matrix uses the symmetric four-point stencil for the mixed
    term. Two one-sided mixed estimates (upper-right and lower-left
    quadrants) are also formed; if they disagree by more than 1e-4 relative
    to the Hessian scale, a warning is attached to the result.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    c1, c2 = center

    def F(i: int, j: int) -> float:
        return _finite(f(c1 + i * h, c2 + j * h), (c1 + i * h, c2 + j * h))

    f00 = F(0, 0)
    fp0, fm0, f0p, f0m = F(1, 0), F(-1, 0), F(0, 1), F(0, -1)
    fpp, fpm, fmp, fmm = F(1, 1), F(1, -1), F(-1, 1), F(-1, -1)
    h2 = h * h
    d11 = (fp0 - 2 * f00 + fm0) / h2
    d22 = (f0p - 2 * f00 + f0m) / h2
    d12 = (fpp - fpm - fmp + fmm) / (4 * h2)
    upper = (fpp - fp0 - f0p + f00) / h2
    lower = (fmm - fm0 - f0m + f00) / h2
    mat = np.array([[d11, d12], [d12, d22]])
    scale = max(1.0, float(np.max(np.abs(mat))))
    asym = abs(upper - lower)
    warnings = []
    if asym > 1e-4 * scale:
        warnings.append(f"one-sided mixed differences disagree by {asym:.3e}")
    _, lmax = eig2_sym(mat)
    return Hessian2D(mat, lmax, float(d11 + d22), float(asym), warnings)
