"""Regularized training of projected models on input-output trajectories.

The total loss is ``mse + lambda1 * proj + lambda2 * recons``: the rollout
prediction error, a Monte-Carlo penalty on the distance moved by the
projection (sampled at standard-normal states, resampled each epoch), and the
state-reconstruction error of the eta network on the rollout states.  All
randomness is derived from per-epoch seeds, so runs are bit-reproducible and
a resumed run continues exactly where the checkpoint stopped.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from dissipnet import autodiff as ad
from dissipnet.errors import ConfigError, DimensionMismatch, MissingEta, NonFiniteState
from dissipnet.nets import Mlp, mlp_forward, net_from_dict, net_to_dict
from dissipnet.projection import (
    ProjectedModel,
    ProjectionSpec,
    RawDynamics,
)
from dissipnet.simulate import rollout
from dissipnet.supply import StorageFunction, SupplyRate

CAPPED_LOSS = 1e6


@dataclass
class LossConfig:
    lambda1: float = 0.001
    lambda2: float = 1e-4
    n_proj_samples: int = 100
    rng_seed: int = 0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.n_proj_samples < 1:
            raise ConfigError("loss hyperparameters out of range")


@dataclass
class OptimizerConfig:
    algorithm: str = "adam"
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 100

    def __post_init__(self):
        if self.algorithm not in ("adam", "rmsprop", "momentum"):
            raise ConfigError(f"unknown optimizer {self.algorithm!r}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("optimizer hyperparameters out of range")


@dataclass
class Dataset:
    """Stacked input/target pairs on a shared time grid with split tags."""

    inputs: np.ndarray    # (N, horizon, m)
    targets: np.ndarray   # (N, horizon + 1, l)
    dt: float
    splits: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        if (self.inputs.ndim != 3 or self.targets.ndim != 3
                or self.inputs.shape[0] != self.targets.shape[0]
                or self.targets.shape[1] != self.inputs.shape[1] + 1):
            raise DimensionMismatch(
                f"inconsistent dataset shapes {self.inputs.shape} / "
                f"{self.targets.shape}")
        if not self.splits:
            self.splits = {"train": list(range(self.inputs.shape[0]))}

    @property
    def n_traj(self) -> int:
        return self.inputs.shape[0]

    @property
    def horizon(self) -> int:
        return self.inputs.shape[1]

    @property
    def m_dim(self) -> int:
        return self.inputs.shape[2]

    @property
    def l_dim(self) -> int:
        return self.targets.shape[2]

    def subset(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits.get(tag, [])
        return self.inputs[idx], self.targets[idx]


def loss_mse(model: ProjectedModel, batch, dt: float, tape=None):
    """Mean over trajectories, grid points, and output dims of the squared
    rollout error.  Returns ``(loss, capped)``; a diverged rollout yields the
    capped constant with no gradient."""
    u_batch, y_batch = batch
    u_batch = np.asarray(u_batch, dtype=float)
    y_batch = np.asarray(y_batch, dtype=float)
    if u_batch.shape[0] == 0:
        raise ConfigError("empty batch")
    x0 = np.zeros(model.n_dim)
    try:
        states, outputs = rollout(model, u_batch, x0, dt, tape)
    except NonFiniteState:
        return CAPPED_LOSS, True, None
    total = None
    for k, y_k in enumerate(outputs):
        err = ad.subtract(y_k, y_batch[:, k, :])
        sq = ad.sum_(ad.multiply(err, err))
        total = sq if total is None else ad.add(total, sq)
    count = y_batch.shape[0] * y_batch.shape[1] * y_batch.shape[2]
    return ad.divide(total, float(count)), False, states


def proj_sample_states(n_dim: int, cfg: LossConfig, epoch: int) -> np.ndarray:
    rng = np.random.default_rng([cfg.rng_seed & 0x7FFFFFFF, epoch, 0x9E37])
    return rng.standard_normal((cfg.n_proj_samples, n_dim))


def loss_proj(model: ProjectedModel, cfg: LossConfig, epoch: int = 0, tape=None):
    """Monte-Carlo mean of ``||f - f_d||^2 + ||g - g_d||^2`` at normal states."""
    xs = proj_sample_states(model.n_dim, cfg, epoch)
    vals = model.eval(xs, tape)
    df = ad.subtract(vals.f, vals.f_d)
    dg = ad.subtract(vals.g, vals.g_d)
    per = ad.add(ad.sum_(ad.multiply(df, df), axis=-1),
                 ad.sum_(ad.sum_(ad.multiply(dg, dg), axis=-1), axis=-1))
    return ad.divide(ad.sum_(per), float(cfg.n_proj_samples))


def loss_recons(model: ProjectedModel, states, tape=None):
    """Mean squared reconstruction error ``||x - eta(h(x))||^2`` over states."""
    if model.eta is None:
        raise MissingEta("model has no eta network")
    h_val = mlp_forward(model.raw.h, states, tape)
    x_hat = mlp_forward(model.eta, h_val, tape)
    err = ad.subtract(states, x_hat)
    count = ad.value_of(states).shape[0]
    return ad.divide(ad.sum_(ad.multiply(err, err)), float(count))


class Optimizer:
    """Flat-vector first-order updates for a named set of networks."""

    def __init__(self, cfg: OptimizerConfig, networks: dict[str, Mlp]):
        self.cfg = cfg
        self.networks = networks
        self.step_count = 0
        self.slots = {
            name: {"m": np.zeros(net.n_params), "v": np.zeros(net.n_params)}
            for name, net in networks.items()
        }

    def step(self, grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        self.step_count += 1
        t = self.step_count
        for name, net in self.networks.items():
            g = grads.get(name)
            if g is None:
                continue
            slot = self.slots[name]
            if cfg.algorithm == "adam":
                slot["m"] = 0.9 * slot["m"] + 0.1 * g
                slot["v"] = 0.999 * slot["v"] + 0.001 * g * g
                m_hat = slot["m"] / (1.0 - 0.9**t)
                v_hat = slot["v"] / (1.0 - 0.999**t)
                update = m_hat / (np.sqrt(v_hat) + 1e-8)
            elif cfg.algorithm == "rmsprop":
                slot["v"] = 0.99 * slot["v"] + 0.01 * g * g
                update = g / (np.sqrt(slot["v"]) + 1e-8)
            else:  # momentum
                slot["m"] = 0.9 * slot["m"] + g
                update = slot["m"]
            if cfg.weight_decay:
                update = update + cfg.weight_decay * net.params
            net.params = net.params - cfg.learning_rate * update

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "slots": {
                name: {k: [float(x) for x in v] for k, v in slot.items()}
                for name, slot in self.slots.items()
            },
        }

    def load_state_dict(self, d: dict) -> None:
        self.step_count = int(d["step_count"])
        for name, slot in d["slots"].items():
            self.slots[name] = {k: np.asarray(v, dtype=float)
                                for k, v in slot.items()}


@dataclass
class EpochRecord:
    epoch: int
    mse: float
    l_proj: float
    l_recons: float
    total: float
    val_mse: float
    wall_ms: float
    capped: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainReport:
    epochs: list[EpochRecord]
    final_val_mse: float
    capped_events: int

    def to_dict(self) -> dict:
        return {
            "epochs": [e.to_dict() for e in self.epochs],
            "final_val_mse": self.final_val_mse,
            "capped_events": self.capped_events,
        }


def _val_split(train_idx: list[int], seed: int) -> tuple[list[int], list[int]]:
    """Deterministically carve 20% of the training indices for validation."""
    rng = np.random.default_rng([seed & 0x7FFFFFFF, 0x5A11])
    perm = rng.permutation(len(train_idx))
    n_val = max(1, len(train_idx) // 5) if len(train_idx) >= 5 else 0
    val = [train_idx[i] for i in perm[:n_val]]
    fit = [train_idx[i] for i in perm[n_val:]]
    return fit, val


def eval_mse(model: ProjectedModel, inputs, targets, dt: float) -> float:
    if len(inputs) == 0:
        return float("nan")
    loss, capped, _ = loss_mse(model, (inputs, targets), dt)
    return float(ad.value_of(loss)) if not capped else CAPPED_LOSS


def train(model: ProjectedModel, dataset: Dataset, loss_cfg: LossConfig,
          opt_cfg: OptimizerConfig, optimizer: Optimizer | None = None,
          start_epoch: int = 0, log_every: int = 0) -> TrainReport:
    """Gradient-descent loop; returns the per-epoch loss trace.

    Diverged rollouts contribute the capped loss with no gradient and are
    counted in the report rather than aborting the run.
    """
    train_idx = dataset.splits.get("train", [])
    if not train_idx:
        raise ConfigError("dataset has an empty train split")
    fit_idx, val_idx = _val_split(train_idx, loss_cfg.rng_seed)
    if not fit_idx:
        fit_idx = train_idx
    nets = model.networks()
    if optimizer is None:
        optimizer = Optimizer(opt_cfg, nets)
    records: list[EpochRecord] = []
    capped_total = 0
    use_recons = model.eta is not None and loss_cfg.lambda2 > 0
    for epoch in range(start_epoch, opt_cfg.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([loss_cfg.rng_seed & 0x7FFFFFFF, epoch, 0xB41C])
        order = rng.permutation(len(fit_idx))
        sums = {"mse": 0.0, "proj": 0.0, "recons": 0.0, "total": 0.0}
        n_batches = 0
        capped_epoch = 0
        for lo in range(0, len(order), opt_cfg.batch_size):
            sel = [fit_idx[i] for i in order[lo:lo + opt_cfg.batch_size]]
            tape = ad.Tape()
            mse, capped, states = loss_mse(
                model, (dataset.inputs[sel], dataset.targets[sel]),
                dataset.dt, tape)
            n_batches += 1
            if capped:
                capped_epoch += 1
                sums["mse"] += CAPPED_LOSS
                sums["total"] += CAPPED_LOSS
                continue
            total = mse
            l_proj_v = 0.0
            if loss_cfg.lambda1 > 0:
                lp = loss_proj(model, loss_cfg, epoch, tape)
                total = ad.add(total, ad.multiply(lp, loss_cfg.lambda1))
                l_proj_v = float(ad.value_of(lp))
            l_rec_v = 0.0
            if use_recons:
                stacked = ad.concat(states, axis=0)
                lr = loss_recons(model, stacked, tape)
                total = ad.add(total, ad.multiply(lr, loss_cfg.lambda2))
                l_rec_v = float(ad.value_of(lr))
            leaves = {name: tape.param(id(net), net.params)
                      for name, net in nets.items()}
            gs = tape.grads(total, 1.0, list(leaves.values()))
            optimizer.step({name: g for name, g in zip(leaves, gs)})
            sums["mse"] += float(ad.value_of(mse))
            sums["proj"] += l_proj_v
            sums["recons"] += l_rec_v
            sums["total"] += float(ad.value_of(total))
        capped_total += capped_epoch
        val_mse = eval_mse(model, dataset.inputs[val_idx],
                           dataset.targets[val_idx], dataset.dt)
        rec = EpochRecord(
            epoch=epoch,
            mse=sums["mse"] / n_batches,
            l_proj=sums["proj"] / n_batches,
            l_recons=sums["recons"] / n_batches,
            total=sums["total"] / n_batches,
            val_mse=val_mse,
            wall_ms=(time.perf_counter() - t0) * 1e3,
            capped=capped_epoch,
        )
        records.append(rec)
        if log_every and (epoch % log_every == 0 or epoch == opt_cfg.epochs - 1):
            print(f"epoch {epoch:4d}  mse {rec.mse:.6f}  proj {rec.l_proj:.6f} "
                  f" recons {rec.l_recons:.6f}  val {rec.val_mse:.6f}")
    final_val = records[-1].val_mse if records else float("nan")
    return TrainReport(records, final_val, capped_total)


def rmse_t(preds: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """RMSE at each grid point: sqrt of the mean over trajectories and output
    dims of the squared error."""
    preds = np.asarray(preds, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if preds.ndim == 2:
        preds = preds[None]
    if targets.ndim == 2:
        targets = targets[None]
    if preds.shape != targets.shape:
        raise DimensionMismatch(
            f"prediction shape {preds.shape} != target shape {targets.shape}")
    sq = (preds - targets) ** 2
    return np.sqrt(sq.mean(axis=(0, 2)))


def rmse(preds: np.ndarray, targets: np.ndarray) -> float:
    """Time-mean of RMSE(t)."""
    return float(rmse_t(preds, targets).mean())


def predict_outputs(model: ProjectedModel, inputs: np.ndarray, dt: float) -> np.ndarray:
    """Batched rollout predictions (N, horizon + 1, l) from x0 = 0."""
    inputs = np.asarray(inputs, dtype=float)
    x0 = np.zeros(model.n_dim)
    _, outputs = rollout(model, inputs, x0, dt)
    return np.stack([ad.value_of(y) for y in outputs], axis=1)


def save_checkpoint(path, model: ProjectedModel, optimizer: Optimizer | None = None,
                    epoch: int = 0, extra: dict | None = None) -> None:
    """Self-describing JSON checkpoint; floats round-trip exactly."""
    from dissipnet.projection import model_to_dict

    payload = {
        "model": model_to_dict(model),
        "epoch": epoch,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> dict:
    """Returns ``{"model": ProjectedModel, "epoch": int, "optimizer": dict|None,
    "extra": dict}``."""
    from dissipnet.projection import model_from_dict

    with open(path) as fh:
        payload = json.load(fh)
    payload["model"] = model_from_dict(payload["model"])
    return payload
