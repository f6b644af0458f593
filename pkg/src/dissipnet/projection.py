"""Differentiable projections of raw network dynamics onto certified subspaces.

Given raw maps (f, g, h) and a fixed storage function V, each projection kind
rewrites (f, g) -- and for the passive alpha variant also h -- so that the
algebraic dissipation certificate for the configured supply rate holds at
every state by construction.  All projections are idempotent and tape-aware:
with a recording tape the corrected dynamics stay differentiable with respect
to every network parameter.

The denominator ``||grad V||^2`` is floored at ``V.epsilon_guard`` via a hard
maximum, which keeps the formulas algebraically exact everywhere the gradient
norm exceeds the guard (an additive guard would leave O(eps/||grad V||^2)
residuals in the certificate, violating the certificate tolerances at states
close to the origin).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dissipnet import autodiff as ad
from dissipnet.errors import DimensionMismatch, InvalidPreset
from dissipnet.linalg import (
    Ellipsoid,
    ellipsoid_project,
    inv_sqrt_pd,
    psd_sqrt,
    require_symmetric,
    symmetrize,
    eigh_sym,
    TOL_PD,
    TOL_RANK,
)
from dissipnet.nets import Mlp, mlp_forward
from dissipnet.supply import StorageFunction, SupplyRate

PROJECTION_KINDS = (
    "naive",
    "dissipative",
    "stable",
    "io_stable",
    "conservative",
    "passive_beta",
    "passive_alpha",
    "general",
)

KINDS_WITH_L_NET = ("dissipative", "io_stable", "general")


@dataclass
class RawDynamics:
    """Pre-projection dynamics: networks f (n->n), g (n->n*m), h (n->l) and an
    optional constant direct-path matrix j (l x m)."""

    f: Mlp
    g: Mlp
    h: Mlp
    j: np.ndarray | None = None

    def __post_init__(self):
        n = self.f.in_dim
        if self.f.out_dim != n or self.g.in_dim != n or self.h.in_dim != n:
            raise DimensionMismatch("f, g, h must share the state dimension")
        if self.g.out_dim % n != 0:
            raise DimensionMismatch(
                f"g out_dim {self.g.out_dim} is not a multiple of n={n}")
        if self.j is not None:
            j = np.asarray(self.j, dtype=float)
            if j.ndim == 1:
                j = j[:, None]
            if j.shape != (self.l_dim, self.m_dim):
                raise DimensionMismatch(
                    f"j shape {j.shape} expected {(self.l_dim, self.m_dim)}")
            self.j = j

    @property
    def n_dim(self) -> int:
        return self.f.in_dim

    @property
    def m_dim(self) -> int:
        return self.g.out_dim // self.n_dim

    @property
    def l_dim(self) -> int:
        return self.h.out_dim


def _rowdot(a, b):
    return ad.sum_(ad.multiply(a, b), axis=-1, keepdims=True)


def _outer(a, b):
    batch, n = ad.value_of(a).shape
    m = ad.value_of(b).shape[-1]
    return ad.multiply(ad.reshape(a, (batch, n, 1)), ad.reshape(b, (batch, 1, m)))


def _col(x, width):
    batch = ad.value_of(x).shape[0]
    return ad.reshape(x, (batch, width, 1))


def _gradv_t_g(grad_v, g):
    """(batch, m) row vector grad V^T g from (batch, n) and (batch, n, m)."""
    batch, n = ad.value_of(grad_v).shape
    return ad.sum_(ad.multiply(ad.reshape(grad_v, (batch, n, 1)), g), axis=1)


def guarded_norm_sq(grad_v, eps: float):
    """``max(||grad V||^2, eps)`` per row, shape (batch, 1)."""
    return ad.clip_min(_rowdot(grad_v, grad_v), eps)


def complement_apply(grad_v, vec, eps: float):
    """Project rows of ``vec`` onto the orthogonal complement of grad V."""
    d2 = guarded_norm_sq(grad_v, eps)
    return ad.subtract(vec, ad.multiply(grad_v, ad.divide(_rowdot(grad_v, vec), d2)))


def complement_apply_mat(grad_v, mat, eps: float):
    d2 = guarded_norm_sq(grad_v, eps)
    coeff = ad.divide(_gradv_t_g(grad_v, mat), d2)
    return ad.subtract(mat, _outer(grad_v, coeff))


def complement_projector(grad_v: np.ndarray, vec: np.ndarray,
                         eps: float = 1e-8) -> np.ndarray:
    """Single-vector form of the complement projection (plain numpy)."""
    grad_v = np.asarray(grad_v, dtype=float)[None, :]
    vec = np.asarray(vec, dtype=float)[None, :]
    return complement_apply(grad_v, vec, eps)[0]


def dissipative_values(grad_v, f, g, h, l_val, Q, S, sqrt_r, eps):
    """Main projection: corrections along grad V pin the certificate."""
    d2 = guarded_norm_sq(grad_v, eps)
    h_q_h = _rowdot(ad.matmul(h, Q), h)
    l_sq = _rowdot(l_val, l_val)
    f_d = ad.add(complement_apply(grad_v, f, eps),
                 ad.multiply(grad_v, ad.divide(ad.subtract(h_q_h, l_sq), d2)))
    coeff = ad.subtract(ad.matmul(h, S), ad.matmul(l_val, sqrt_r))
    g_d = ad.add(complement_apply_mat(grad_v, g, eps),
                 ad.multiply(_outer(grad_v, coeff),
                             ad.reshape(ad.divide(2.0, d2), (-1, 1, 1))))
    return f_d, g_d, h


def stable_values(grad_v, f, eps):
    d2 = guarded_norm_sq(grad_v, eps)
    overshoot = ad.relu(_rowdot(grad_v, f))
    return ad.subtract(f, ad.multiply(grad_v, ad.divide(overshoot, d2)))


def io_stable_values(grad_v, f, g, h, l_val, gamma, eps):
    d2 = guarded_norm_sq(grad_v, eps)
    mag = ad.add(_rowdot(h, h), _rowdot(l_val, l_val))
    f_d = ad.subtract(complement_apply(grad_v, f, eps),
                      ad.multiply(grad_v, ad.divide(mag, d2)))
    g_d = ad.subtract(complement_apply_mat(grad_v, g, eps),
                      ad.multiply(_outer(grad_v, l_val),
                                  ad.reshape(ad.divide(2.0 * gamma, d2),
                                             (-1, 1, 1))))
    return f_d, g_d, h


def conservative_values(grad_v, f, g, h, Q, S, eps):
    d2 = guarded_norm_sq(grad_v, eps)
    h_q_h = _rowdot(ad.matmul(h, Q), h)
    f_d = ad.add(complement_apply(grad_v, f, eps),
                 ad.multiply(grad_v, ad.divide(h_q_h, d2)))
    g_d = ad.add(complement_apply_mat(grad_v, g, eps),
                 ad.multiply(_outer(grad_v, ad.matmul(h, S)),
                             ad.reshape(ad.divide(2.0, d2), (-1, 1, 1))))
    return f_d, g_d, h


def passive_beta_values(grad_v, f, g, h, eps):
    """Lur'e-pinning variant that leaves h untouched."""
    d2 = guarded_norm_sq(grad_v, eps)
    f_d = stable_values(grad_v, f, eps)
    residual = ad.subtract(_gradv_t_g(grad_v, g), ad.multiply(h, 2.0))
    g_d = ad.subtract(g, ad.multiply(_outer(grad_v, residual),
                                     ad.reshape(ad.divide(1.0, d2), (-1, 1, 1))))
    return f_d, g_d, h


def passive_alpha_values(grad_v, f, g, h, eps):
    """Joint least-squares update of (g, h) onto the Lur'e constraint."""
    f_d = stable_values(grad_v, f, eps)
    denom = ad.add(_rowdot(grad_v, grad_v), 4.0)
    residual = ad.subtract(_gradv_t_g(grad_v, g), ad.multiply(h, 2.0))
    scaled = ad.divide(residual, denom)
    g_d = ad.subtract(g, _outer(grad_v, scaled))
    h_d = ad.add(h, ad.multiply(scaled, 2.0))
    return f_d, g_d, h_d


@dataclass
class GeneralPath:
    """Constant direct-path data for the general (j != 0) projection."""

    j_d: np.ndarray
    w_mat: np.ndarray
    s_eff: np.ndarray
    ellipsoid: Ellipsoid


def build_general_path(w: SupplyRate, j: np.ndarray | None) -> GeneralPath:
    """Project j onto the supply-rate ellipsoid and derive the matching W.

    Requires Q negative definite and an ellipsoid radius ``R - S^T Q^{-1} S``
    that is positive semi-definite; W is the PSD root of the radius left over
    after the projection, which reduces to the spectral-clamp form whenever
    the radius and the projected Gram commute.
    """
    wq, vq = eigh_sym(w.Q)
    if float(wq.max()) >= -TOL_PD:
        raise InvalidPreset("general projection requires Q negative definite")
    q_inv = symmetrize((vq / wq) @ vq.T)
    center = -q_inv @ w.S
    radius = symmetrize(w.R - w.S.T @ q_inv @ w.S)
    wr, _ = eigh_sym(radius)
    if float(wr.min()) < -1e-9 * max(1.0, float(np.abs(wr).max())):
        raise InvalidPreset(
            f"ellipsoid radius R - S^T Q^-1 S has eigenvalue {wr.min():.3e}; "
            "must be PSD")
    ell = Ellipsoid(-w.Q, center, radius)
    j = np.zeros_like(center) if j is None else np.asarray(j, dtype=float)
    if j.ndim == 1:
        j = j[:, None]
    offset = ell.sqrt_shape @ (j - center)
    gram = symmetrize(offset.T @ offset)
    wg, _ = eigh_sym(gram)
    if float(wg.max()) <= TOL_RANK:
        # at the exact center the shrink factor vanishes, so the direction is
        # irrelevant and the projection is the center itself
        j_d = center.copy()
    else:
        j_d = ellipsoid_project(ell, j)
    used = j_d - center
    leftover = symmetrize(radius - used.T @ ell.shape_mat @ used)
    w_mat = psd_sqrt(leftover, tol=1e-6)
    s_eff = w.S + w.Q @ j_d
    return GeneralPath(j_d=j_d, w_mat=w_mat, s_eff=s_eff, ellipsoid=ell)


@dataclass
class ProjectionSpec:
    """Which projection to apply, with its supply rate, storage function, the
    optional l network, and the precomputed square root of R."""

    kind: str
    supply: SupplyRate
    V: StorageFunction
    l_net: Mlp | None = None
    gamma2: float | None = None
    sqrt_r: np.ndarray = field(init=False, repr=False)
    general: GeneralPath | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in PROJECTION_KINDS:
            raise InvalidPreset(f"unknown projection kind {self.kind!r}")
        if self.l_net is not None and self.kind not in KINDS_WITH_L_NET:
            raise InvalidPreset(f"kind {self.kind!r} does not take an l network")
        if self.kind in ("dissipative", "io_stable") and self.l_net is None:
            raise InvalidPreset(f"kind {self.kind!r} requires an l network")
        if self.kind == "io_stable":
            if self.gamma2 is None or self.gamma2 <= 0.0:
                raise InvalidPreset("io_stable requires gamma2 > 0")
        if self.kind == "conservative" and np.any(self.supply.R != 0.0):
            raise InvalidPreset("conservative projection requires R = 0")
        if self.kind in ("passive_beta", "passive_alpha"):
            if self.supply.l_dim != self.supply.m_dim:
                raise DimensionMismatch(
                    "passive projections require equal input/output dims")
        if self.kind in ("dissipative", "io_stable", "conservative"):
            self.sqrt_r = self.supply.sqrt_r()
        elif self.kind == "general":
            self.general = build_general_path(self.supply, None)
            self.sqrt_r = self.general.w_mat
        else:
            self.sqrt_r = np.zeros_like(self.supply.R)

    @property
    def eps(self) -> float:
        return self.V.epsilon_guard

    def with_direct_path(self, j: np.ndarray | None) -> "ProjectionSpec":
        """Re-derive the general-path constants for a concrete j."""
        if self.kind != "general":
            return self
        spec = ProjectionSpec(self.kind, self.supply, self.V, self.l_net,
                              self.gamma2)
        spec.general = build_general_path(self.supply, j)
        spec.sqrt_r = spec.general.w_mat
        return spec


@dataclass
class DynValues:
    """Raw and projected dynamics evaluated at a batch of states."""

    f: object
    g: object
    h: object
    l_val: object
    grad_v: object
    f_d: object
    g_d: object
    h_d: object
    j_d: np.ndarray | None = None


def apply_projection_values(spec: ProjectionSpec, grad_v, f, g, h, l_val):
    """Dispatch the kind-specific correction on already-evaluated values."""
    kind = spec.kind
    eps = spec.eps
    if kind == "naive":
        return f, g, h
    if kind == "stable":
        return stable_values(grad_v, f, eps), g, h
    if kind == "dissipative":
        return dissipative_values(grad_v, f, g, h, l_val, spec.supply.Q,
                                  spec.supply.S, spec.sqrt_r, eps)
    if kind == "io_stable":
        return io_stable_values(grad_v, f, g, h, l_val,
                                float(np.sqrt(spec.gamma2)), eps)
    if kind == "conservative":
        return conservative_values(grad_v, f, g, h, spec.supply.Q,
                                   spec.supply.S, eps)
    if kind == "passive_beta":
        return passive_beta_values(grad_v, f, g, h, eps)
    if kind == "passive_alpha":
        return passive_alpha_values(grad_v, f, g, h, eps)
    if kind == "general":
        return dissipative_values(grad_v, f, g, h, l_val, spec.supply.Q,
                                  spec.general.s_eff, spec.general.w_mat, eps)
    raise InvalidPreset(f"unknown projection kind {kind!r}")


class ProjectedModel:
    """Raw networks plus a projection spec and an optional reconstruction net."""

    def __init__(self, raw: RawDynamics, spec: ProjectionSpec,
                 eta: Mlp | None = None):
        if spec.supply.l_dim != raw.l_dim or spec.supply.m_dim != raw.m_dim:
            raise DimensionMismatch(
                f"supply dims (l={spec.supply.l_dim}, m={spec.supply.m_dim}) "
                f"do not match dynamics (l={raw.l_dim}, m={raw.m_dim})")
        if spec.l_net is not None:
            if spec.l_net.in_dim != raw.n_dim or spec.l_net.out_dim != raw.m_dim:
                raise DimensionMismatch("l network must map states to R^m")
        if spec.V.n_dim != raw.n_dim:
            raise DimensionMismatch("storage function dimension != state dim")
        if eta is not None:
            if eta.in_dim != raw.l_dim or eta.out_dim != raw.n_dim:
                raise DimensionMismatch("eta network must map outputs to states")
        if spec.kind == "general":
            spec = spec.with_direct_path(raw.j)
        self.raw = raw
        self.spec = spec
        self.eta = eta

    @property
    def n_dim(self):
        return self.raw.n_dim

    @property
    def m_dim(self):
        return self.raw.m_dim

    @property
    def l_dim(self):
        return self.raw.l_dim

    def networks(self) -> dict[str, Mlp]:
        nets = {"f": self.raw.f, "g": self.raw.g, "h": self.raw.h}
        if self.spec.l_net is not None:
            nets["l"] = self.spec.l_net
        if self.eta is not None:
            nets["eta"] = self.eta
        return nets

    def direct_path(self) -> np.ndarray | None:
        if self.spec.kind == "general":
            return self.spec.general.j_d
        return self.raw.j

    def eval(self, x, tape=None) -> DynValues:
        """Raw and projected dynamics at states ``x`` (vector or batch)."""
        xv = ad.value_of(x)
        squeeze = xv.ndim == 1
        if squeeze:
            x = ad.reshape(x, (1, self.n_dim))
        batch = ad.value_of(x).shape[0]
        n, m = self.n_dim, self.m_dim
        f = mlp_forward(self.raw.f, x, tape)
        g_flat = mlp_forward(self.raw.g, x, tape)
        # column-major reshape of the flat g output to (batch, n, m)
        g = ad.swapaxes(ad.reshape(g_flat, (batch, m, n)), 1, 2)
        h = mlp_forward(self.raw.h, x, tape)
        if self.spec.l_net is not None:
            l_val = mlp_forward(self.spec.l_net, x, tape)
        else:
            l_val = np.zeros((batch, m))
        grad_v = self.spec.V.grad(x)
        f_d, g_d, h_d = apply_projection_values(self.spec, grad_v, f, g, h, l_val)
        j_d = self.direct_path()
        out = DynValues(f=f, g=g, h=h, l_val=l_val, grad_v=grad_v,
                        f_d=f_d, g_d=g_d, h_d=h_d, j_d=j_d)
        if squeeze:
            for name in ("f", "g", "h", "l_val", "grad_v", "f_d", "g_d", "h_d"):
                val = getattr(out, name)
                shp = ad.value_of(val).shape[1:]
                setattr(out, name, ad.reshape(val, shp))
        return out


def _eval_raw(raw: RawDynamics, spec: ProjectionSpec, x: np.ndarray):
    x = np.asarray(x, dtype=float)[None, :]
    n, m = raw.n_dim, raw.m_dim
    f = mlp_forward(raw.f, x)
    g = np.swapaxes(mlp_forward(raw.g, x).reshape(1, m, n), 1, 2)
    h = mlp_forward(raw.h, x)
    l_val = (mlp_forward(spec.l_net, x) if spec.l_net is not None
             else np.zeros((1, m)))
    grad_v = ad.value_of(spec.V.grad(x))
    return grad_v, f, g, h, l_val


def project_dissipative(spec: ProjectionSpec, raw: RawDynamics, x):
    grad_v, f, g, h, l_val = _eval_raw(raw, spec, x)
    f_d, g_d, h_d = dissipative_values(grad_v, f, g, h, l_val, spec.supply.Q,
                                       spec.supply.S, spec.sqrt_r, spec.eps)
    return f_d[0], g_d[0], h_d[0]


def project_stable(v: StorageFunction, raw: RawDynamics, x):
    x2 = np.asarray(x, dtype=float)[None, :]
    n, m = raw.n_dim, raw.m_dim
    f = mlp_forward(raw.f, x2)
    g = np.swapaxes(mlp_forward(raw.g, x2).reshape(1, m, n), 1, 2)
    h = mlp_forward(raw.h, x2)
    grad_v = ad.value_of(v.grad(x2))
    return stable_values(grad_v, f, v.epsilon_guard)[0], g[0], h[0]


def project_io_stable(spec: ProjectionSpec, raw: RawDynamics, x):
    grad_v, f, g, h, l_val = _eval_raw(raw, spec, x)
    f_d, g_d, h_d = io_stable_values(grad_v, f, g, h, l_val,
                                     float(np.sqrt(spec.gamma2)), spec.eps)
    return f_d[0], g_d[0], h_d[0]


def project_conservative(v: StorageFunction, w: SupplyRate, raw: RawDynamics, x):
    if np.any(w.R != 0.0):
        raise InvalidPreset("conservative projection requires R = 0")
    spec = ProjectionSpec("conservative", w, v)
    grad_v, f, g, h, _ = _eval_raw(raw, spec, x)
    f_d, g_d, h_d = conservative_values(grad_v, f, g, h, w.Q, w.S, v.epsilon_guard)
    return f_d[0], g_d[0], h_d[0]


def _passive_eval(v: StorageFunction, raw: RawDynamics, x):
    if raw.m_dim != raw.l_dim:
        raise DimensionMismatch("passive projections require m == l")
    x2 = np.asarray(x, dtype=float)[None, :]
    n, m = raw.n_dim, raw.m_dim
    f = mlp_forward(raw.f, x2)
    g = np.swapaxes(mlp_forward(raw.g, x2).reshape(1, m, n), 1, 2)
    h = mlp_forward(raw.h, x2)
    grad_v = ad.value_of(v.grad(x2))
    return grad_v, f, g, h


def project_passive_beta(v: StorageFunction, raw: RawDynamics, x):
    grad_v, f, g, h = _passive_eval(v, raw, x)
    f_d, g_d, h_d = passive_beta_values(grad_v, f, g, h, v.epsilon_guard)
    return f_d[0], g_d[0], h_d[0]


def project_passive_alpha(v: StorageFunction, raw: RawDynamics, x):
    grad_v, f, g, h = _passive_eval(v, raw, x)
    f_d, g_d, h_d = passive_alpha_values(grad_v, f, g, h, v.epsilon_guard)
    return f_d[0], g_d[0], h_d[0]


def project_general(spec: ProjectionSpec, raw: RawDynamics, x):
    spec = spec.with_direct_path(raw.j)
    grad_v, f, g, h, l_val = _eval_raw(raw, spec, x)
    f_d, g_d, h_d = dissipative_values(grad_v, f, g, h, l_val, spec.supply.Q,
                                       spec.general.s_eff, spec.general.w_mat,
                                       spec.eps)
    return f_d[0], g_d[0], h_d[0], spec.general.j_d


@dataclass
class QMEInstance:
    """Blocks of the quadratic matrix equation X^T A X + B^T X + X^T B + C = 0."""

    X: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray


def qme_build(grad_v, f, g, h, j, l_val, w_mat, w: SupplyRate) -> QMEInstance:
    """Assemble the QME blocks from dynamics values at one state."""
    grad_v = np.asarray(grad_v, dtype=float).reshape(-1, 1)
    f = np.asarray(f, dtype=float).reshape(-1, 1)
    h = np.asarray(h, dtype=float).reshape(-1, 1)
    g = np.asarray(g, dtype=float)
    l_val = np.asarray(l_val, dtype=float).reshape(-1, 1)
    n = f.shape[0]
    l_dim, m = w.l_dim, w.m_dim
    if j is None:
        j = np.zeros((l_dim, m))
    j = np.asarray(j, dtype=float).reshape(l_dim, m)
    w_mat = np.asarray(w_mat, dtype=float)
    if g.shape != (n, m) or h.shape[0] != l_dim or grad_v.shape[0] != n:
        raise DimensionMismatch("QME block dimensions are inconsistent")
    x_blk = np.block([[f, g], [h, j]])
    a_blk = np.block([[np.zeros((n, n)), np.zeros((n, l_dim))],
                      [np.zeros((l_dim, n)), -w.Q]])
    b_blk = np.block([[0.5 * grad_v, np.zeros((n, m))],
                      [np.zeros((l_dim, 1)), -w.S]])
    c_blk = np.block([[l_val.T @ l_val, l_val.T @ w_mat],
                      [w_mat.T @ l_val, w_mat.T @ w_mat - w.R]])
    return QMEInstance(X=x_blk, A=a_blk, B=b_blk, C=c_blk)


def qme_build_at(model: ProjectedModel, x: np.ndarray) -> QMEInstance:
    vals = model.eval(np.asarray(x, dtype=float))
    return qme_build(ad.value_of(vals.grad_v), ad.value_of(vals.f_d),
                     ad.value_of(vals.g_d), ad.value_of(vals.h_d), vals.j_d,
                     ad.value_of(vals.l_val), model.spec.sqrt_r,
                     model.spec.supply)


def model_to_dict(model: ProjectedModel) -> dict:
    """Self-describing checkpoint payload with exact-decimal parameters."""
    from dissipnet.nets import net_to_dict

    d = {
        "kind": model.spec.kind,
        "supply": model.spec.supply.to_dict(),
        "gamma2": model.spec.gamma2,
        "storage": {
            "P": model.spec.V.P.tolist(),
            "epsilon_guard": model.spec.V.epsilon_guard,
        },
        "nets": {name: net_to_dict(net) for name, net in model.networks().items()},
        "j": None if model.raw.j is None else model.raw.j.tolist(),
    }
    return d


def model_from_dict(d: dict) -> ProjectedModel:
    from dissipnet.nets import net_from_dict

    nets = {name: net_from_dict(nd) for name, nd in d["nets"].items()}
    raw = RawDynamics(
        f=nets["f"], g=nets["g"], h=nets["h"],
        j=None if d.get("j") is None else np.asarray(d["j"], dtype=float))
    storage = StorageFunction(np.asarray(d["storage"]["P"], dtype=float),
                              float(d["storage"]["epsilon_guard"]))
    spec = ProjectionSpec(
        kind=d["kind"],
        supply=SupplyRate.from_dict(d["supply"]),
        V=storage,
        l_net=nets.get("l"),
        gamma2=None if d.get("gamma2") is None else float(d["gamma2"]),
    )
    return ProjectedModel(raw, spec, eta=nets.get("eta"))
