"""Fixed-step Euler simulation of the learned state-space models.

Inputs are held constant over each step (zero-order hold); outputs are sampled
at the state grid points.  Any state entry beyond the divergence bound or any
NaN/Inf aborts with :class:`NonFiniteState` carrying the failing step index --
the training loop catches this and assigns a capped loss instead of crashing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dissipnet import autodiff as ad
from dissipnet.errors import DimensionMismatch, FormatError, NonFiniteState
from dissipnet.projection import ProjectedModel, ProjectionSpec, RawDynamics
from dissipnet.supply import quadratic_storage, preset

DIVERGENCE_BOUND = 1e6


@dataclass
class SimConfig:
    dt: float
    horizon: int
    x0: np.ndarray | None = None

    def __post_init__(self):
        if self.dt <= 0.0 or self.horizon < 1:
            raise ValueError("dt must be positive and horizon >= 1")
        if self.x0 is not None:
            self.x0 = np.asarray(self.x0, dtype=float)

    @property
    def span(self) -> float:
        return self.dt * self.horizon


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.outputs = np.atleast_2d(np.asarray(self.outputs, dtype=float))
        k = self.times.size
        if self.outputs.shape[0] != k or self.inputs.shape[0] != k - 1:
            raise DimensionMismatch(
                f"expected {k} output rows and {k - 1} input rows, got "
                f"{self.outputs.shape[0]} / {self.inputs.shape[0]}")
        if self.states.size and self.states.shape[0] != k:
            raise DimensionMismatch("state rows must match the time grid")
        if not (np.isfinite(self.states).all() and np.isfinite(self.outputs).all()):
            raise NonFiniteState(-1, "trajectory contains non-finite entries")

    @property
    def horizon(self) -> int:
        return self.times.size - 1

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


def naive_model(raw: RawDynamics) -> ProjectedModel:
    """Wrap raw dynamics as an unprojected model (baseline)."""
    spec = ProjectionSpec("naive", preset("stable", raw.l_dim, raw.m_dim),
                          quadratic_storage(raw.n_dim))
    return ProjectedModel(raw, spec)


def _as_model(model) -> ProjectedModel:
    if isinstance(model, RawDynamics):
        return naive_model(model)
    return model


def _check_state(x_val: np.ndarray, step: int) -> None:
    if not np.isfinite(x_val).all() or np.abs(x_val).max() > DIVERGENCE_BOUND:
        raise NonFiniteState(step)


def _g_times_u(g_d, u):
    batch, n, m = ad.value_of(g_d).shape
    return ad.sum_(ad.multiply(g_d, ad.reshape(u, (batch, 1, m))), axis=2)


def euler_step(model, x, u, dt: float, tape=None):
    """One explicit Euler step ``x + dt * (f_d(x) + g_d(x) u)``."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    model = _as_model(model)
    xv = ad.value_of(x)
    squeeze = xv.ndim == 1
    if squeeze:
        x = ad.reshape(x, (1, model.n_dim))
        u = ad.reshape(u, (1, model.m_dim))
    vals = model.eval(x, tape)
    dx = ad.add(vals.f_d, _g_times_u(vals.g_d, u))
    x_next = ad.add(x, ad.multiply(dx, dt))
    _check_state(ad.value_of(x_next), 1)
    return ad.reshape(x_next, (model.n_dim,)) if squeeze else x_next


def rollout(model, u_signal, x0, dt: float, tape=None):
    """Batched rollout returning per-step states and outputs (lists of length
    horizon+1); entries are taped Vars when a tape is supplied."""
    model = _as_model(model)
    uv = ad.value_of(u_signal)
    if uv.ndim == 2:
        uv = uv[None]
    batch, horizon, m = uv.shape
    if m != model.m_dim:
        raise DimensionMismatch(f"input width {m} != model m={model.m_dim}")
    x = np.broadcast_to(np.asarray(x0, dtype=float), (batch, model.n_dim)).copy()
    j_d = model.direct_path()
    states, outputs = [], []
    current = x if tape is None else tape.var(x)
    for k in range(horizon):
        u_k = uv[:, k, :]
        vals = model.eval(current, tape)
        y_k = vals.h_d if j_d is None else ad.add(vals.h_d, u_k @ j_d.T)
        states.append(current)
        outputs.append(y_k)
        dx = ad.add(vals.f_d, _g_times_u(vals.g_d, u_k))
        current = ad.add(current, ad.multiply(dx, dt))
        _check_state(ad.value_of(current), k + 1)
    vals = model.eval(current, tape)
    y_last = (vals.h_d if j_d is None
              else ad.add(vals.h_d, uv[:, -1, :] @ j_d.T))
    states.append(current)
    outputs.append(y_last)
    return states, outputs


def simulate(model, u_signal, cfg: SimConfig) -> Trajectory:
    """Simulate one input signal into a :class:`Trajectory` (plain numpy)."""
    model = _as_model(model)
    u_signal = np.atleast_2d(np.asarray(u_signal, dtype=float))
    if u_signal.shape[0] != cfg.horizon:
        raise DimensionMismatch(
            f"u_signal has {u_signal.shape[0]} rows, horizon is {cfg.horizon}")
    x0 = np.zeros(model.n_dim) if cfg.x0 is None else cfg.x0
    states, outputs = rollout(model, u_signal[None], x0, cfg.dt)
    return Trajectory(
        times=np.arange(cfg.horizon + 1) * cfg.dt,
        states=np.stack([s[0] for s in states]),
        inputs=u_signal,
        outputs=np.stack([ad.value_of(y)[0] for y in outputs]),
    )


def write_trajectory(path, traj: Trajectory, include_states: bool = True) -> None:
    """Delimiter-separated export, one row per grid point, exact decimals.

    The input column of the final grid point repeats the last held value.
    """
    m = traj.inputs.shape[1]
    l_dim = traj.outputs.shape[1]
    cols = ["t"] + [f"u_{i+1}" for i in range(m)] + [f"y_{i+1}" for i in range(l_dim)]
    n = traj.states.shape[1] if include_states and traj.states.size else 0
    cols += [f"x_{i+1}" for i in range(n)]
    u_ext = np.vstack([traj.inputs, traj.inputs[-1:]])
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for k in range(traj.times.size):
            row = [traj.times[k], *u_ext[k], *traj.outputs[k]]
            if n:
                row.extend(traj.states[k])
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_trajectory(path) -> Trajectory:
    """Parse a trajectory export; malformed rows raise :class:`FormatError`."""
    with open(path) as fh:
        header = fh.readline().strip()
        names = header.split(",")
        if not names or names[0] != "t":
            raise FormatError(f"{path}: first column must be 't', got {header!r}")
        m = sum(1 for c in names if c.startswith("u_"))
        l_dim = sum(1 for c in names if c.startswith("y_"))
        n = sum(1 for c in names if c.startswith("x_"))
        if 1 + m + l_dim + n != len(names) or m < 1 or l_dim < 1:
            raise FormatError(f"{path}: unrecognized header {header!r}")
        rows = []
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(names):
                raise FormatError(
                    f"{path}: row {i + 1} has {len(parts)} columns, "
                    f"expected {len(names)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise FormatError(f"{path}: row {i + 1}: {exc}") from None
    if len(rows) < 2:
        raise FormatError(f"{path}: needs at least two grid points")
    data = np.asarray(rows)
    times = data[:, 0]
    inputs = data[:-1, 1:1 + m]
    outputs = data[:, 1 + m:1 + m + l_dim]
    states = data[:, 1 + m + l_dim:] if n else np.zeros((len(rows), 0))
    return Trajectory(times=times, states=states, inputs=inputs, outputs=outputs)
