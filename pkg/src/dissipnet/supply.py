"""Storage functions and quadratic supply rates.

A supply rate is the quadratic form ``w(u, y) = y^T Q y + 2 y^T S u + u^T R u``
with parameters (Q, S, R).  Named presets bind the parameter choices that give
internal stability (all zero), input-output stability (-I, 0, gamma^2 I),
passivity (0, I/2, 0), and energy conservation (R = 0), plus the two analytic
benchmark certificates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dissipnet import autodiff as ad
from dissipnet.errors import DimensionMismatch, InvalidPreset
from dissipnet.linalg import TOL_PSD, eigh_sym, psd_sqrt, require_symmetric


@dataclass(frozen=True)
class SupplyRate:
    """Quadratic supply rate parameters; Q is l x l, S is l x m, R is m x m."""

    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        q = require_symmetric(self.Q)
        r = require_symmetric(self.R)
        s = np.asarray(self.S, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.shape != (q.shape[0], r.shape[0]):
            raise DimensionMismatch(
                f"S shape {s.shape} inconsistent with Q {q.shape} / R {r.shape}")
        object.__setattr__(self, "Q", q)
        object.__setattr__(self, "S", s)
        object.__setattr__(self, "R", r)

    @property
    def l_dim(self) -> int:
        return self.Q.shape[0]

    @property
    def m_dim(self) -> int:
        return self.R.shape[0]

    def require_r_psd(self) -> None:
        """The projection of the main theorem needs R positive semi-definite."""
        w, _ = eigh_sym(self.R)
        if float(w.min()) < -TOL_PSD * max(1.0, float(np.abs(w).max())):
            raise InvalidPreset(
                f"R has eigenvalue {w.min():.3e}; must be PSD for this "
                "projection kind")

    def sqrt_r(self) -> np.ndarray:
        self.require_r_psd()
        return psd_sqrt(self.R)

    def to_dict(self) -> dict:
        return {"Q": self.Q.tolist(), "S": self.S.tolist(), "R": self.R.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "SupplyRate":
        return SupplyRate(np.asarray(d["Q"], dtype=float),
                          np.asarray(d["S"], dtype=float),
                          np.asarray(d["R"], dtype=float))


def supply_eval(w: SupplyRate, u, y) -> float:
    """Evaluate ``y^T Q y + 2 y^T S u + u^T R u`` for one input/output pair."""
    u = np.asarray(u, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if u.size != w.m_dim or y.size != w.l_dim:
        raise DimensionMismatch(
            f"u has {u.size} entries (expected {w.m_dim}), "
            f"y has {y.size} (expected {w.l_dim})")
    return float(y @ w.Q @ y + 2.0 * (y @ w.S @ u) + u @ w.R @ u)


def supply_eval_series(w: SupplyRate, u: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Vectorized supply rate along rows of ``u`` (k x m) and ``y`` (k x l)."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    return (np.einsum("ki,ij,kj->k", y, w.Q, y)
            + 2.0 * np.einsum("ki,ij,kj->k", y, w.S, u)
            + np.einsum("ki,ij,kj->k", u, w.R, u))


@dataclass(frozen=True)
class StorageFunction:
    """Quadratic storage ``V(x) = x^T P x / 2`` with analytic gradient ``P x``.

    P must be symmetric positive definite; the default (identity) gives
    ``V(x) = ||x||^2 / 2``.  ``epsilon_guard`` is the floor applied to
    ``||grad V||^2`` wherever it appears in a projection denominator.
    """

    P: np.ndarray
    epsilon_guard: float = 1e-8

    def __post_init__(self):
        p = require_symmetric(self.P)
        w, _ = eigh_sym(p)
        if float(w.min()) <= 0.0:
            raise InvalidPreset(
                f"storage matrix must be positive definite (min eig {w.min():.3e})")
        object.__setattr__(self, "P", p)

    @property
    def n_dim(self) -> int:
        return self.P.shape[0]

    def value(self, x):
        """V(x); works on a vector, a (batch, n) array, or a taped Var."""
        xv = ad.value_of(x)
        if xv.ndim == 1:
            x2 = ad.reshape(x, (1, self.n_dim))
            return ad.reshape(
                ad.sum_(ad.multiply(x2, ad.matmul(x2, self.P)), axis=-1), ()) * 0.5
        return ad.multiply(
            ad.sum_(ad.multiply(x, ad.matmul(x, self.P)), axis=-1, keepdims=True),
            0.5)

    def grad(self, x):
        """grad V(x) = P x, batched along leading axis when present."""
        xv = ad.value_of(x)
        if xv.ndim == 1:
            return ad.reshape(
                ad.matmul(ad.reshape(x, (1, self.n_dim)), self.P), (self.n_dim,))
        return ad.matmul(x, self.P)


def storage_eval(v: StorageFunction, x) -> float:
    out = v.value(x)
    return float(ad.value_of(out))


def storage_grad(v: StorageFunction, x) -> np.ndarray:
    return ad.value_of(v.grad(np.asarray(x, dtype=float)))


def quadratic_storage(n: int, P: np.ndarray | None = None,
                      epsilon_guard: float = 1e-8) -> StorageFunction:
    return StorageFunction(np.eye(n) if P is None else P, epsilon_guard)


def preset(kind: str, l_dim: int, m_dim: int, *, gamma2: float | None = None,
           Q: np.ndarray | None = None, S: np.ndarray | None = None,
           R: np.ndarray | None = None, damping: float = 1.0) -> SupplyRate:
    """Named supply-rate presets.

    kind:
      stable        Q = S = R = 0 (internal stability)
      io_stable     Q = -I, S = 0, R = gamma2 * I   (requires gamma2 > 0)
      passive       Q = 0, S = I/2, R = 0           (requires l == m)
      conservative  user (Q, S), R forced to 0
      custom        user (Q, S, R)
      msd           certificate of the mass-spring-damper benchmark
      pendulum      certificate of the n-link pendulum benchmark (first-joint
                    damping only)
    """
    zq = np.zeros((l_dim, l_dim))
    zs = np.zeros((l_dim, m_dim))
    zr = np.zeros((m_dim, m_dim))
    if kind == "stable":
        return SupplyRate(zq, zs, zr)
    if kind == "io_stable":
        if gamma2 is None or gamma2 <= 0.0:
            raise InvalidPreset("io_stable preset needs gamma2 > 0")
        return SupplyRate(-np.eye(l_dim), zs, gamma2 * np.eye(m_dim))
    if kind == "passive":
        if l_dim != m_dim:
            raise InvalidPreset("passivity requires equal input/output dims")
        return SupplyRate(zq, 0.5 * np.eye(m_dim), zr)
    if kind == "conservative":
        if R is not None and np.any(np.asarray(R) != 0.0):
            raise InvalidPreset("conservative preset requires R = 0")
        return SupplyRate(zq if Q is None else Q, zs if S is None else S, zr)
    if kind == "custom":
        return SupplyRate(zq if Q is None else Q, zs if S is None else S,
                          zr if R is None else R)
    if kind in ("msd", "pendulum"):
        # output y = (position, velocity), input is the external force/torque:
        # damping acts on the velocity channel, the force enters through it.
        if l_dim != 2 or m_dim != 1:
            raise InvalidPreset(f"{kind} preset is defined for l=2, m=1")
        q = np.array([[0.0, 0.0], [0.0, -damping]])
        s = np.array([[0.0], [0.5]])
        return SupplyRate(q, s, zr)
    raise InvalidPreset(f"unknown supply preset {kind!r}")
