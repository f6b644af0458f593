"""Ground-truth benchmark systems, input-signal synthesis, and dataset files.

Two analytic systems are provided: the mass-spring-damper (force in, position
and velocity out) and the damped n-link pendulum driven by a torque on the
first joint (first angle and angular velocity out).  Both are integrated with
fine RK4 substeps under zero-order-hold inputs, then subsampled to the dataset
grid, so the reference trajectories are far more accurate than the learned
models' Euler grid.  The pendulum equations of motion are derived symbolically
from its Lagrangian, which scales to any link count and keeps the damping
matrix consistent with the energy bookkeeping.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dissipnet.errors import ConfigError, DimensionMismatch, FormatError
from dissipnet.simulate import SimConfig, Trajectory, read_trajectory, write_trajectory
from dissipnet.training import Dataset


@dataclass
class SignalSpec:
    kind: str
    horizon: int
    dt: float
    amplitude: float = 1.0
    rng_seed: int = 0
    channels: int = 1
    variance: float = 0.005          # random_walk increment variance
    min_segment: int | None = None   # rectangle segment bounds, in steps
    max_segment: int | None = None

    def __post_init__(self):
        if self.kind not in ("rectangle", "step", "random_walk"):
            raise ConfigError(f"unknown signal kind {self.kind!r}")
        if self.horizon < 1 or self.dt <= 0 or self.channels < 1:
            raise ConfigError("signal spec out of range")


def gen_signal(spec: SignalSpec) -> np.ndarray:
    """Deterministic (horizon, channels) input signal for the given seed."""
    rng = np.random.default_rng(spec.rng_seed)
    h, c = spec.horizon, spec.channels
    if spec.kind == "step":
        return np.full((h, c), spec.amplitude)
    if spec.kind == "random_walk":
        steps = rng.normal(0.0, np.sqrt(spec.variance), size=(h, c))
        return np.cumsum(steps, axis=0)
    lo = spec.min_segment or max(1, h // 10)
    hi = spec.max_segment or max(lo, h // 2)
    out = np.empty((h, c))
    for ch in range(c):
        k = 0
        while k < h:
            seg = int(rng.integers(lo, hi + 1))
            sign = 1.0 if rng.random() < 0.5 else -1.0
            out[k:k + seg, ch] = sign * spec.amplitude
            k += seg
    return out


def _rk4_path(rhs, x0: np.ndarray, u_signal: np.ndarray, dt: float,
              substeps: int) -> np.ndarray:
    """Integrate ``dx/dt = rhs(x, u)`` with ZOH inputs; returns the states at
    the coarse grid points, shape (horizon + 1, n).  ``x0`` may carry a batch
    axis, in which case the result is (horizon + 1, batch, n)."""
    h = dt / substeps
    x = np.array(x0, dtype=float)
    out = [x.copy()]
    for k in range(u_signal.shape[0]):
        u = u_signal[k]
        for _ in range(substeps):
            k1 = rhs(x, u)
            k2 = rhs(x + 0.5 * h * k1, u)
            k3 = rhs(x + 0.5 * h * k2, u)
            k4 = rhs(x + h * k3, u)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out.append(x.copy())
    return np.stack(out)


@dataclass
class MsdParams:
    mass: float = 1.0
    stiffness: float = 1.0
    damping: float = 1.0

    def __post_init__(self):
        if min(self.mass, self.stiffness, self.damping) <= 0:
            raise ConfigError("mass-spring-damper parameters must be positive")

    def state_matrices(self) -> tuple[np.ndarray, np.ndarray]:
        a = np.array([[0.0, 1.0],
                      [-self.stiffness / self.mass, -self.damping / self.mass]])
        b = np.array([0.0, 1.0 / self.mass])
        return a, b

    def energy(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return 0.5 * self.stiffness * x[..., 0] ** 2 + 0.5 * self.mass * x[..., 1] ** 2


def simulate_msd(p: MsdParams, u_signal: np.ndarray, cfg: SimConfig,
                 substeps: int = 100) -> Trajectory:
    """Reference mass-spring-damper trajectory; the output is the full state."""
    u_signal = np.asarray(u_signal, dtype=float).reshape(cfg.horizon, -1)
    a, b = p.state_matrices()
    x0 = np.zeros(2) if cfg.x0 is None else cfg.x0

    def rhs(x, u):
        return x @ a.T + b * u[0]

    states = _rk4_path(rhs, x0, u_signal, cfg.dt, substeps)
    return Trajectory(times=np.arange(cfg.horizon + 1) * cfg.dt,
                      states=states, inputs=u_signal, outputs=states.copy())


@dataclass
class PendulumParams:
    n_links: int = 2
    g_accel: float = 9.81
    lengths: tuple[float, ...] | None = None
    masses: tuple[float, ...] | None = None
    dampings: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.n_links not in (1, 2, 3):
            raise ConfigError("pendulum supports 1 to 3 links")
        n = self.n_links
        if self.lengths is None:
            self.lengths = tuple([1.0 / n] * n)
        if self.masses is None:
            self.masses = tuple([2.0 * (n + 1) / n] * n)
        if self.dampings is None:
            self.dampings = tuple([1.0] * n)
        for name in ("lengths", "masses", "dampings"):
            vals = getattr(self, name)
            if len(vals) != n or min(vals) <= 0:
                raise ConfigError(f"{name} must be {n} positive values")

    def damping_matrix(self) -> np.ndarray:
        """Tridiagonal matrix C with x' C x = sum of relative-damping powers."""
        n = self.n_links
        c = np.asarray(self.dampings, dtype=float)
        mat = np.zeros((n, n))
        for i in range(n):
            mat[i, i] = c[i] + (c[i + 1] if i + 1 < n else 0.0)
            if i + 1 < n:
                mat[i, i + 1] = -c[i + 1]
                mat[i + 1, i] = -c[i + 1]
        return mat


class PendulumDynamics:
    """Equations of motion assembled from the Lagrangian of the linked chain.

    The mass matrix, generalized forces, and total mechanical energy are
    derived symbolically once per parameter set and compiled to fast numeric
    callables; the potential is shifted so the hanging rest state has zero
    energy.
    """

    _cache: dict = {}

    def __new__(cls, p: PendulumParams):
        key = (p.n_links, p.g_accel, p.lengths, p.masses, p.dampings)
        if key in cls._cache:
            return cls._cache[key]
        self = super().__new__(cls)
        self._build(p)
        cls._cache[key] = self
        return self

    def _build(self, p: PendulumParams) -> None:
        import sympy as sp

        n = p.n_links
        q = sp.symbols(f"q0:{n}", real=True)
        dq = sp.symbols(f"dq0:{n}", real=True)
        tau = sp.Symbol("tau", real=True)
        lengths, masses, damps = p.lengths, p.masses, p.dampings
        # planar joint positions, angles measured from the downward vertical
        pot = sp.Integer(0)
        kin = sp.Integer(0)
        for i in range(n):
            psi = -sum(lengths[j] * sp.cos(q[j]) for j in range(i + 1))
            dphi = sum(lengths[j] * sp.cos(q[j]) * dq[j] for j in range(i + 1))
            dpsi = sum(lengths[j] * sp.sin(q[j]) * dq[j] for j in range(i + 1))
            pot += masses[i] * p.g_accel * psi
            kin += sp.Rational(1, 2) * masses[i] * (dphi**2 + dpsi**2)
        dissip = sp.Rational(1, 2) * damps[0] * dq[0] ** 2
        for i in range(1, n):
            dissip += sp.Rational(1, 2) * damps[i] * (dq[i] - dq[i - 1]) ** 2
        lagrangian = kin - pot
        mass_mat = sp.hessian(kin, dq)
        forcing = []
        for i in range(n):
            momentum = sp.diff(lagrangian, dq[i])
            convective = sum(sp.diff(momentum, q[j]) * dq[j] for j in range(n))
            forcing.append(sp.simplify(
                (tau if i == 0 else 0) - sp.diff(dissip, dq[i])
                + sp.diff(lagrangian, q[i]) - convective))
        pot_rest = pot.subs({qi: 0 for qi in q})
        self.n_links = n
        self.params = p
        self._mass = sp.lambdify(q, mass_mat, "numpy")
        self._force = sp.lambdify((*q, *dq, tau), sp.Matrix(forcing), "numpy")
        self._energy = sp.lambdify((*q, *dq), kin + pot - pot_rest, "numpy")
        self._damp_grad = sp.lambdify(
            (*q, *dq), sp.Matrix([sp.diff(dissip, d) for d in dq]), "numpy")

    def rhs(self, x: np.ndarray, u) -> np.ndarray:
        n = self.n_links
        q, dq = x[:n], x[n:]
        mass = np.asarray(self._mass(*q), dtype=float)
        force = np.asarray(self._force(*q, *dq, float(u)), dtype=float).ravel()
        ddq = np.linalg.solve(mass, force)
        return np.concatenate([dq, ddq])

    def energy(self, x: np.ndarray) -> float:
        n = self.n_links
        return float(self._energy(*x[:n], *x[n:]))

    def damping_gradient(self, dq: np.ndarray) -> np.ndarray:
        n = self.n_links
        return np.asarray(self._damp_grad(*np.zeros(n), *dq), dtype=float).ravel()


def simulate_pendulum(p: PendulumParams, u_signal: np.ndarray, cfg: SimConfig,
                      substeps: int = 100) -> Trajectory:
    """Reference n-link pendulum trajectory; output is (q1, dq1), the torque
    acts on the first joint only."""
    u_signal = np.asarray(u_signal, dtype=float).reshape(cfg.horizon, -1)
    if u_signal.shape[1] != 1:
        raise DimensionMismatch("pendulum takes a single torque input")
    dyn = PendulumDynamics(p)
    n = p.n_links
    x0 = np.zeros(2 * n) if cfg.x0 is None else cfg.x0

    def rhs(x, u):
        return dyn.rhs(x, u[0])

    states = _rk4_path(rhs, x0, u_signal, cfg.dt, substeps)
    outputs = states[:, [0, n]]
    return Trajectory(times=np.arange(cfg.horizon + 1) * cfg.dt,
                      states=states, inputs=u_signal, outputs=outputs)


def _simulate_system(system: str, params: dict, u_signal: np.ndarray,
                     cfg: SimConfig, substeps: int) -> Trajectory:
    if system == "msd":
        return simulate_msd(MsdParams(**params), u_signal, cfg, substeps)
    if system == "pendulum":
        return simulate_pendulum(PendulumParams(**params), u_signal, cfg, substeps)
    raise ConfigError(f"unknown system {system!r}")


def make_dataset(system: str, params: dict, signal: SignalSpec, n_traj: int,
                 out_dir, seed: int = 0, substeps: int = 100,
                 train_fraction: float = 0.9, include_states: bool = True,
                 extra: dict | None = None) -> dict:
    """Generate ``n_traj`` trajectories, write one file each plus a manifest.

    The split is a seeded 90/10 shuffle; per-trajectory signal seeds are
    spawned from the dataset seed so the directory contents are a pure
    function of the arguments.
    """
    if n_traj < 2:
        raise ConfigError("need at least two trajectories to split")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = SimConfig(dt=signal.dt, horizon=signal.horizon)
    seed_seq = np.random.SeedSequence(seed)
    traj_seeds = [int(s.generate_state(1)[0]) for s in seed_seq.spawn(n_traj)]
    files = []
    for i in range(n_traj):
        spec_i = SignalSpec(kind=signal.kind, horizon=signal.horizon,
                            dt=signal.dt, amplitude=signal.amplitude,
                            rng_seed=traj_seeds[i], channels=signal.channels,
                            variance=signal.variance,
                            min_segment=signal.min_segment,
                            max_segment=signal.max_segment)
        u = gen_signal(spec_i)
        traj = _simulate_system(system, params, u, cfg, substeps)
        name = f"traj_{i:04d}.csv"
        write_trajectory(out_dir / name, traj, include_states=include_states)
        files.append(name)
    rng = np.random.default_rng([seed & 0x7FFFFFFF, 0x511F])
    perm = [int(i) for i in rng.permutation(n_traj)]
    n_train = int(round(train_fraction * n_traj))
    manifest = {
        **(extra or {}),
        "system": system,
        "params": params,
        "dt": signal.dt,
        "horizon": signal.horizon,
        "n_traj": n_traj,
        "seed": seed,
        "substeps": substeps,
        "signal": {
            "kind": signal.kind,
            "amplitude": signal.amplitude,
            "channels": signal.channels,
            "variance": signal.variance,
            "min_segment": signal.min_segment,
            "max_segment": signal.max_segment,
        },
        "trajectory_seeds": traj_seeds,
        "files": files,
        "splits": {
            "train": sorted(perm[:n_train]),
            "test": sorted(perm[n_train:]),
        },
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def load_dataset(directory) -> Dataset:
    """Load a generated dataset directory back into memory."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{directory}: missing manifest.json")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    trajs = [read_trajectory(directory / name) for name in manifest["files"]]
    return _to_dataset(trajs, splits={k: list(v)
                                      for k, v in manifest["splits"].items()})


def load_external(paths) -> Dataset:
    """Build a dataset from bare trajectory files (no manifest).

    Dimensions are inferred from the first header; every file must agree on
    horizon, dt, and signal widths.
    """
    paths = [Path(p) for p in paths]
    if not paths:
        raise FormatError("no trajectory files given")
    trajs = [read_trajectory(p) for p in paths]
    return _to_dataset(trajs, splits=None)


def _to_dataset(trajs: list[Trajectory], splits) -> Dataset:
    first = trajs[0]
    for i, t in enumerate(trajs[1:], start=1):
        if (t.horizon != first.horizon
                or t.inputs.shape[1] != first.inputs.shape[1]
                or t.outputs.shape[1] != first.outputs.shape[1]):
            raise FormatError(f"trajectory {i} has inconsistent dimensions")
        if abs(t.dt - first.dt) > 1e-12:
            raise FormatError(f"trajectory {i} has dt {t.dt}, expected {first.dt}")
    inputs = np.stack([t.inputs for t in trajs])
    targets = np.stack([t.outputs for t in trajs])
    return Dataset(inputs=inputs, targets=targets, dt=first.dt,
                   splits=splits or {"train": list(range(len(trajs)))})
