"""Dense spectral linear algebra for small symmetric matrices.

Everything here operates on plain float64 numpy arrays.  The matrices involved
are tiny (state/input/output dimensions, at most a few dozen rows), so the
eigendecomposition is a cyclic Jacobi sweep: dependency-free and numerically
robust for symmetric input.  Asymmetric round-off is killed by averaging with
the transpose before any spectral operation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from dissipnet.errors import DimensionMismatch, NotPSD, NotSymmetric, RankDeficient

TOL_PSD = 1e-9
TOL_PD = 1e-12
TOL_RANK = 1e-10

_SYM_TOL = 1e-9


def symmetrize(mat: np.ndarray) -> np.ndarray:
    """Average a matrix with its transpose."""
    mat = np.asarray(mat, dtype=float)
    return 0.5 * (mat + mat.T)


def require_symmetric(mat: np.ndarray, tol: float = _SYM_TOL) -> np.ndarray:
    """Validate symmetry up to ``tol`` (scaled by magnitude) and symmetrize."""
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {mat.shape}")
    scale = max(1.0, float(np.abs(mat).max(initial=0.0)))
    gap = float(np.abs(mat - mat.T).max(initial=0.0))
    if gap > tol * scale:
        raise NotSymmetric(f"asymmetry {gap:.3e} exceeds tolerance {tol * scale:.3e}")
    return symmetrize(mat)


def eigh_sym(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(w, V)`` with eigenvalues ``w`` ascending and orthonormal
    eigenvector columns ``V`` such that ``mat == V @ diag(w) @ V.T``.
    """
    a = require_symmetric(mat)
    n = a.shape[0]
    if n == 1:
        return a[0, :1].copy(), np.eye(1)
    v = np.eye(n)
    scale = float(np.linalg.norm(a, "fro"))
    if scale == 0.0:
        return np.zeros(n), v
    stop = 1e-15 * scale
    for _ in range(100):
        off = float(np.sqrt(np.sum(np.tril(a, -1) ** 2) * 2.0))
        if off <= stop:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= stop / n:
                    continue
                theta = 0.5 * math.atan2(2.0 * apq, a[q, q] - a[p, p])
                c = math.cos(theta)
                s = math.sin(theta)
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = 0.0
                a[q, p] = 0.0
                vec_p = v[:, p].copy()
                vec_q = v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
    w = np.diag(a).copy()
    order = np.argsort(w)
    return w[order], v[:, order]


def psd_sqrt(mat: np.ndarray, tol: float = TOL_PSD) -> np.ndarray:
    """Symmetric PSD square root: returns S with ``S @ S == mat``.

    Eigenvalues in ``[-tol, 0)`` (scaled by the spectral radius) are treated
    as round-off and clamped to zero; anything below raises :class:`NotPSD`.
    """
    w, v = eigh_sym(mat)
    floor = -tol * max(1.0, float(np.abs(w).max(initial=0.0)))
    if float(w.min()) < floor:
        raise NotPSD(f"eigenvalue {w.min():.3e} below PSD tolerance {floor:.3e}")
    s = np.sqrt(np.clip(w, 0.0, None))
    return symmetrize((v * s) @ v.T)


def inv_sqrt_pd(mat: np.ndarray, tol: float = TOL_PD) -> np.ndarray:
    """Inverse symmetric square root of a positive definite matrix."""
    w, v = eigh_sym(mat)
    if float(w.min()) <= tol * max(1.0, float(np.abs(w).max())):
        raise NotPSD(f"matrix not positive definite (min eigenvalue {w.min():.3e})")
    return symmetrize((v / np.sqrt(w)) @ v.T)


def ramp_eig(mat: np.ndarray) -> np.ndarray:
    """Eigenvalue-wise positive clamp: negative eigenvalues are zeroed."""
    w, v = eigh_sym(mat)
    return symmetrize((v * np.maximum(w, 0.0)) @ v.T)


def angle_of(x: np.ndarray, tol: float = TOL_RANK) -> np.ndarray:
    """Column-orthonormalize ``x`` via ``x @ (x^T x)^{-1/2}``.

    Raises :class:`RankDeficient` when ``x^T x`` is numerically singular.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    gram = symmetrize(x.T @ x)
    w, v = eigh_sym(gram)
    if float(w.min()) <= tol * max(1.0, float(w.max())):
        raise RankDeficient(
            f"smallest eigenvalue of X^T X is {w.min():.3e}; columns are "
            "numerically dependent"
        )
    return x @ symmetrize((v / np.sqrt(w)) @ v.T)


@dataclass(frozen=True)
class Ellipsoid:
    """Matrix ellipsoid ``{X : (X - center)^T shape (X - center) <= radius}``.

    ``shape`` must be positive definite (n x n), ``radius`` positive
    semi-definite (m x m), ``center`` an n x m matrix.
    """

    shape_mat: np.ndarray
    center: np.ndarray
    radius: np.ndarray
    sqrt_shape: np.ndarray = field(init=False, repr=False)
    inv_sqrt_shape: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        a = require_symmetric(self.shape_mat)
        c = require_symmetric(self.radius)
        b = np.asarray(self.center, dtype=float)
        if b.ndim == 1:
            b = b[:, None]
        if b.shape != (a.shape[0], c.shape[0]):
            raise DimensionMismatch(
                f"center shape {b.shape} inconsistent with shape {a.shape} and "
                f"radius {c.shape}"
            )
        wa, _ = eigh_sym(a)
        if wa.min() <= TOL_PD * max(1.0, float(np.abs(wa).max())):
            raise NotPSD(f"ellipsoid shape matrix not PD (min eig {wa.min():.3e})")
        wc, _ = eigh_sym(c)
        if float(wc.min()) < -TOL_PSD * max(1.0, float(np.abs(wc).max())):
            raise NotPSD(f"ellipsoid radius not PSD (min eig {wc.min():.3e})")
        object.__setattr__(self, "shape_mat", a)
        object.__setattr__(self, "center", b)
        object.__setattr__(self, "radius", c)
        object.__setattr__(self, "sqrt_shape", psd_sqrt(a))
        object.__setattr__(self, "inv_sqrt_shape", inv_sqrt_pd(a))


def _shrink_to_radius(radius: np.ndarray, gram: np.ndarray) -> np.ndarray:
    """Largest-sensible PSD matrix that agrees with ``gram`` inside the radius.

    In the eigenbasis of ``radius`` this is the eigenvalue-wise clamp
    ``min(gram, radius)``; the congruence form below extends it to the
    non-commuting case while keeping the two properties the projection needs:
    the result never exceeds ``radius`` (membership) and is a fixed point once
    ``gram <= radius`` (idempotence).  The naive spectral clamp
    ``radius - Ramp(radius - gram)`` loses positive semi-definiteness when
    ``radius`` and ``gram`` do not commute, so it is not used.
    """
    w, v = eigh_sym(radius)
    w = np.clip(w, 0.0, None)
    root = np.sqrt(w)
    inv_root = np.where(root > TOL_PD, 1.0 / np.where(root > TOL_PD, root, 1.0), 0.0)
    sandwiched = symmetrize((v * inv_root).T @ gram @ (v * inv_root).T.T)
    wk, vk = eigh_sym(sandwiched)
    clipped = (vk * np.clip(wk, 0.0, 1.0)) @ vk.T
    half = (v * root) @ vk
    return symmetrize((half * np.clip(wk, 0.0, 1.0)) @ half.T)


def ellipsoid_project(ell: Ellipsoid, x: np.ndarray) -> np.ndarray:
    """Idempotent projection of ``x`` onto the matrix ellipsoid ``ell``.

    Points already inside are returned unchanged; outside points keep their
    direction factor (column-orthonormalized, in the metric of the shape
    matrix) and have their Gram radius shrunk onto the ellipsoid.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    if x.shape != ell.center.shape:
        raise DimensionMismatch(
            f"point shape {x.shape} does not match ellipsoid center "
            f"{ell.center.shape}"
        )
    m = ell.sqrt_shape @ (x - ell.center)
    direction = angle_of(m)
    gram = symmetrize(m.T @ m)
    shrunk = _shrink_to_radius(ell.radius, gram)
    out = ell.center + ell.inv_sqrt_shape @ direction @ psd_sqrt(shrunk)
    return out[:, 0] if squeeze else out


def ellipsoid_membership_residual(ell: Ellipsoid, x: np.ndarray) -> float:
    """Largest eigenvalue of ``(x-B)^T A (x-B) - C``; <= 0 means inside."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    d = x - ell.center
    w, _ = eigh_sym(symmetrize(d.T @ ell.shape_mat @ d) - ell.radius)
    return float(w.max())
