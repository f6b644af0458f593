"""Numerical certification of the dissipativity guarantees.

Every guarantee the projections provide is turned into a checkable residual:
the algebraic certificate at sampled states, the quadratic-matrix-equation
residual, trajectory-level dissipation budgets (inequality or equality form),
the Hamilton-Jacobi and L2-gain conditions for input-output stability, the
Lur'e conditions for passivity, and an idempotence audit of the projection
maps.  Checks report rather than assert; callers decide what is fatal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dissipnet import autodiff as ad
from dissipnet.errors import DimensionMismatch, MissingStates, NonFiniteState
from dissipnet.projection import (
    ProjectedModel,
    QMEInstance,
    apply_projection_values,
    build_general_path,
)
from dissipnet.simulate import SimConfig, Trajectory, simulate
from dissipnet.supply import StorageFunction, SupplyRate, supply_eval_series


@dataclass
class VerifyReport:
    name: str
    samples: int
    max_residual: float
    threshold: float
    passed: bool
    worst_index: int | None = None
    note: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def __str__(self):
        flag = "PASS" if self.passed else "FAIL"
        extra = f" ({self.note})" if self.note else ""
        return (f"[{flag}] {self.name}: max residual {self.max_residual:.3e} "
                f"vs threshold {self.threshold:.3e} over {self.samples} "
                f"samples{extra}")


def _report(name, residuals, threshold, note="") -> VerifyReport:
    residuals = np.asarray(residuals, dtype=float)
    worst = int(np.argmax(residuals)) if residuals.size else None
    max_res = float(residuals.max()) if residuals.size else 0.0
    return VerifyReport(name=name, samples=int(residuals.size),
                        max_residual=max_res, threshold=threshold,
                        passed=bool(max_res <= threshold),
                        worst_index=worst, note=note)


def kyp_residual(model: ProjectedModel, x: np.ndarray):
    """The three certificate residuals at one state.

    r1 is scalar, r2 an m-vector, r3 an m x m matrix; all vanish for a
    correctly projected model.  Only kinds that pin the full certificate are
    accepted (plus naive, so the check can demonstrably fail); the stable and
    passive kinds certify weaker conditions through :func:`stability_check`
    and :func:`lure_residual`.
    """
    if model.spec.kind not in ("dissipative", "io_stable", "conservative",
                               "general", "naive"):
        raise DimensionMismatch(
            f"kind {model.spec.kind!r} does not satisfy the full certificate; "
            "use the stability/Lur'e checks")
    vals = model.eval(np.asarray(x, dtype=float))
    grad_v = ad.value_of(vals.grad_v)
    f_d = ad.value_of(vals.f_d)
    g_d = ad.value_of(vals.g_d)
    h_d = ad.value_of(vals.h_d)
    l_val = ad.value_of(vals.l_val)
    w = model.spec.supply
    w_mat = model.spec.sqrt_r
    j = vals.j_d if vals.j_d is not None else np.zeros((w.l_dim, w.m_dim))
    r1 = float(grad_v @ f_d - h_d @ w.Q @ h_d + l_val @ l_val)
    r2 = 0.5 * grad_v @ g_d - h_d @ (w.S + w.Q @ j) + l_val @ w_mat
    r3 = w_mat.T @ w_mat - w.R - j.T @ w.S - w.S.T @ j - j.T @ w.Q @ j
    return r1, r2, r3


def stability_check(model: ProjectedModel, xs: np.ndarray,
                    threshold: float = 1e-9) -> VerifyReport:
    """Lyapunov decrease of the autonomous part: ``grad V . f_d <= 0``."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    vals = model.eval(xs)
    drift = np.einsum("bn,bn->b", ad.value_of(vals.grad_v),
                      ad.value_of(vals.f_d))
    return _report(f"stability[{model.spec.kind}]", drift, threshold)


def kyp_check(model: ProjectedModel, xs: np.ndarray,
              threshold: float = 1e-8) -> VerifyReport:
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    residuals = []
    for x in xs:
        r1, r2, r3 = kyp_residual(model, x)
        residuals.append(max(abs(r1), float(np.abs(r2).max()),
                             float(np.abs(r3).max())))
    return _report(f"kyp[{model.spec.kind}]", residuals, threshold)


def lure_residual(model: ProjectedModel, x: np.ndarray):
    """Passivity certificate: drift clamp and the g/h coupling equation."""
    vals = model.eval(np.asarray(x, dtype=float))
    grad_v = ad.value_of(vals.grad_v)
    r_f = max(0.0, float(grad_v @ ad.value_of(vals.f_d)))
    r_g = grad_v @ ad.value_of(vals.g_d) - 2.0 * ad.value_of(vals.h_d)
    return r_f, r_g


def lure_check(model: ProjectedModel, xs: np.ndarray,
               threshold: float = 1e-9) -> VerifyReport:
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    residuals = []
    for x in xs:
        r_f, r_g = lure_residual(model, x)
        residuals.append(max(r_f, float(np.abs(r_g).max())))
    return _report(f"lure[{model.spec.kind}]", residuals, threshold)


def qme_residual(q: QMEInstance) -> float:
    """Frobenius norm of ``X^T A X + B^T X + X^T B + C``."""
    res = q.X.T @ q.A @ q.X + q.B.T @ q.X + q.X.T @ q.B + q.C
    return float(np.linalg.norm(res))


def supply_integral_prefix(w: SupplyRate, traj: Trajectory) -> np.ndarray:
    """Prefix integrals of the supply rate along the trajectory.

    Each step contributes a trapezoid with the held input, which is the right
    quadrature for zero-order-hold signals.
    """
    u = traj.inputs
    y = traj.outputs
    w_lo = supply_eval_series(w, u, y[:-1])
    w_hi = supply_eval_series(w, u, y[1:])
    steps = 0.5 * traj.dt * (w_lo + w_hi)
    return np.concatenate([[0.0], np.cumsum(steps)])


def dissipativity_check(traj: Trajectory, v: StorageFunction, w: SupplyRate,
                        mode: str = "inequality",
                        c_tol: float = 1e-2) -> VerifyReport:
    """Prefix-wise dissipation budget along a simulated trajectory.

    inequality: ``V(x_k) - V(x_0) <= integral of w + tol`` for every prefix;
    equality additionally bounds the deficit.  ``tol = c_tol * dt * horizon``.
    """
    if mode not in ("inequality", "equality"):
        raise ValueError(f"unknown mode {mode!r}")
    if traj.states.size == 0:
        raise MissingStates("dissipativity check needs stored states")
    v_series = np.array([float(ad.value_of(v.value(x))) for x in traj.states])
    supplied = supply_integral_prefix(w, traj)
    gap = (v_series - v_series[0]) - supplied
    residuals = gap if mode == "inequality" else np.abs(gap)
    tol = c_tol * traj.dt * traj.horizon
    return _report(f"dissipativity[{mode}]", residuals, tol)


def hj_check(model: ProjectedModel, xs: np.ndarray, gamma: float,
             threshold: float = 1e-8) -> VerifyReport:
    """Hamilton-Jacobi inequality for L2 stability with gain ``gamma``."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    vals = model.eval(xs)
    grad_v = ad.value_of(vals.grad_v)
    f_d = ad.value_of(vals.f_d)
    g_d = ad.value_of(vals.g_d)
    h_d = ad.value_of(vals.h_d)
    drift = np.einsum("bn,bn->b", grad_v, f_d)
    gv_g = np.einsum("bn,bnm->bm", grad_v, g_d)
    lhs = (drift - np.sum(gv_g**2, axis=1) / (4.0 * gamma**2)
           - np.sum(h_d**2, axis=1))
    return _report("hamilton_jacobi", lhs, threshold)


def gain_check(model: ProjectedModel, input_set, gamma: float, dt: float,
               c_tol: float = 1e-2) -> VerifyReport:
    """Empirical L2-gain bound ``||y|| <= gamma ||u|| + tol`` from rest.

    This is a reporting tool: unprojected models may legitimately fail (or
    diverge, which is reported rather than raised).
    """
    residuals = []
    note = ""
    horizon = None
    for u in input_set:
        u = np.atleast_2d(np.asarray(u, dtype=float))
        horizon = u.shape[0]
        cfg = SimConfig(dt=dt, horizon=horizon)
        try:
            traj = simulate(model, u, cfg)
        except NonFiniteState as exc:
            residuals.append(float("inf"))
            note = f"diverged at step {exc.step}"
            continue
        y_norm = float(np.sqrt(np.sum(traj.outputs**2) * dt))
        u_norm = float(np.sqrt(np.sum(u**2) * dt))
        residuals.append(y_norm - gamma * u_norm)
    tol = c_tol * dt * (horizon or 1)
    return _report("l2_gain", residuals, tol, note=note)


def passivity_check(model: ProjectedModel, input_set, dt: float,
                    c_tol: float = 1e-2) -> VerifyReport:
    """``integral of u^T y >= -tol`` from rest, per input signal."""
    residuals = []
    horizon = None
    for u in input_set:
        u = np.atleast_2d(np.asarray(u, dtype=float))
        horizon = u.shape[0]
        traj = simulate(model, u, SimConfig(dt=dt, horizon=horizon))
        inner = np.einsum("km,km->k", u, 0.5 * (traj.outputs[:-1] + traj.outputs[1:]))
        residuals.append(-float(np.sum(inner) * dt))
    tol = c_tol * dt * (horizon or 1)
    return _report("passivity", residuals, tol)


def idempotence_audit(model: ProjectedModel, xs: np.ndarray,
                      threshold: float = 1e-9) -> VerifyReport:
    """Once- vs twice-projected dynamics over a set of states."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    vals = model.eval(xs)
    f_d = ad.value_of(vals.f_d)
    g_d = ad.value_of(vals.g_d)
    h_d = ad.value_of(vals.h_d)
    l_val = ad.value_of(vals.l_val)
    grad_v = ad.value_of(vals.grad_v)
    f_2, g_2, h_2 = apply_projection_values(model.spec, grad_v, f_d, g_d, h_d,
                                            l_val)
    residuals = np.maximum(
        np.abs(ad.value_of(f_2) - f_d).max(axis=-1),
        np.maximum(np.abs(ad.value_of(g_2) - g_d).max(axis=(-2, -1)),
                   np.abs(ad.value_of(h_2) - h_d).max(axis=-1)))
    note = ""
    if model.spec.kind == "general":
        gp = model.spec.general
        twice = build_general_path(model.spec.supply, gp.j_d)
        j_gap = float(np.abs(twice.j_d - gp.j_d).max())
        residuals = np.maximum(residuals, j_gap)
        note = f"direct-path gap {j_gap:.2e}"
    return _report(f"idempotence[{model.spec.kind}]", residuals, threshold,
                   note=note)
