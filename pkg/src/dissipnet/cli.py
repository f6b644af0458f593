"""Command-line front end: generate, train, eval, verify.

Every command is driven by one JSON config and is deterministic given the
seeds it contains.  Exit codes: 0 success, 1 config error, 2 verification
failure, 3 runtime/IO error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from dissipnet import config as cfgmod
from dissipnet import training as tr
from dissipnet import verify as vf
from dissipnet.benchmarks import (
    SignalSpec,
    gen_signal,
    load_dataset,
    load_external,
    make_dataset,
    simulate_msd,
    simulate_pendulum,
    MsdParams,
    PendulumParams,
)
from dissipnet.errors import (ConfigError, DissipnetError, InvalidPreset,
                              NonFiniteState)
from dissipnet.simulate import SimConfig, simulate, write_trajectory
from dissipnet.supply import StorageFunction

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_VERIFY = 2
EXIT_RUNTIME = 3


def _signal_spec(cfg: cfgmod.ExperimentConfig, kind=None, horizon=None,
                 seed=0) -> SignalSpec:
    return SignalSpec(
        kind=kind or cfg.signal.kind,
        horizon=horizon or cfg.sim.horizon,
        dt=cfg.sim.dt,
        amplitude=cfg.signal.amplitude,
        rng_seed=seed,
        variance=cfg.signal.variance,
        min_segment=cfg.signal.min_segment,
        max_segment=cfg.signal.max_segment,
    )


def _load_dataset_dir(path) -> tuple[tr.Dataset, dict | None]:
    path = Path(path)
    if (path / "manifest.json").exists():
        with open(path / "manifest.json") as fh:
            manifest = json.load(fh)
        return load_dataset(path), manifest
    files = sorted(path.glob("*.csv"))
    return load_external(files), None


def cmd_generate(args) -> int:
    cfg = cfgmod.load_config(args.config)
    if args.seed is not None:
        cfg.dataset.seed = args.seed
    if cfg.system == "external":
        raise ConfigError("generate is for the analytic systems; external "
                          "datasets are ingested, not generated")
    out = Path(args.out)
    spec = _signal_spec(cfg)
    manifest = make_dataset(cfg.system, cfg.system_params, spec,
                            cfg.dataset.n_trajectories, out,
                            seed=cfg.dataset.seed,
                            substeps=cfg.dataset.substeps,
                            extra={"config_digest": cfg.digest()})
    cfgmod.save_config(out / "config.json", cfg)
    print(f"wrote {manifest['n_traj']} trajectories to {out} "
          f"({len(manifest['splits']['train'])} train / "
          f"{len(manifest['splits']['test'])} test)")
    return EXIT_OK


def _ground_truth(manifest: dict, u: np.ndarray, cfg_sim: SimConfig,
                  substeps: int):
    system = manifest["system"]
    params = manifest.get("params", {})
    if system == "msd":
        return simulate_msd(MsdParams(**params), u, cfg_sim, substeps)
    if system == "pendulum":
        return simulate_pendulum(PendulumParams(**params), u, cfg_sim, substeps)
    raise ConfigError(f"no ground-truth generator for system {system!r}")


def _write_rmse_t(path, times, series) -> None:
    with open(path, "w") as fh:
        fh.write("t,rmse\n")
        for t, r in zip(times, series):
            fh.write(f"{t:.17g},{r:.17g}\n")


def cmd_train(args) -> int:
    cfg = cfgmod.load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    dataset, manifest = _load_dataset_dir(args.dataset)
    if abs(dataset.dt - cfg.sim.dt) > 1e-12 and cfg.system != "external":
        raise ConfigError(
            f"dataset dt {dataset.dt} does not match config dt {cfg.sim.dt}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    loss_cfg = cfgmod.loss_config(cfg)
    opt_cfg = cfgmod.optimizer_config(cfg)
    start_epoch = 0
    if args.checkpoint:
        payload = tr.load_checkpoint(args.checkpoint)
        model = payload["model"]
        start_epoch = int(payload["epoch"])
        optimizer = tr.Optimizer(opt_cfg, model.networks())
        if payload.get("optimizer"):
            optimizer.load_state_dict(payload["optimizer"])
    else:
        model = cfgmod.build_model(cfg, dataset.m_dim, dataset.l_dim)
        optimizer = tr.Optimizer(opt_cfg, model.networks())
    report = tr.train(model, dataset, loss_cfg, opt_cfg, optimizer=optimizer,
                      start_epoch=start_epoch,
                      log_every=max(1, opt_cfg.epochs // 10))
    tr.save_checkpoint(out / "checkpoint.json", model, optimizer,
                       epoch=opt_cfg.epochs,
                       extra={"config_digest": cfg.digest(),
                              "projection_kind": cfg.projection.kind})
    test_u, test_y = dataset.subset("test")
    metrics = {"test_rmse": None}
    if len(test_u):
        preds = tr.predict_outputs(model, test_u, dataset.dt)
        series = tr.rmse_t(preds, test_y)
        metrics["test_rmse"] = tr.rmse(preds, test_y)
        _write_rmse_t(out / "rmse_t.csv",
                      np.arange(series.size) * dataset.dt, series)
    with open(out / "report.json", "w") as fh:
        json.dump({"config": cfg.to_dict(), "metrics": metrics,
                   **report.to_dict()}, fh, indent=1)
    if metrics["test_rmse"] is not None:
        print(f"final val mse {report.final_val_mse:.6f}  "
              f"test rmse {metrics['test_rmse']:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    payload = tr.load_checkpoint(args.checkpoint)
    model = payload["model"]
    dataset, manifest = _load_dataset_dir(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics: dict = {}
    if args.signal is None:
        test_u, test_y = dataset.subset("test")
        if not len(test_u):
            raise ConfigError("dataset has no test split; pass --signal")
        preds = tr.predict_outputs(model, test_u, dataset.dt)
        series = tr.rmse_t(preds, test_y)
        metrics["test"] = {"rmse": tr.rmse(preds, test_y)}
        _write_rmse_t(out / "rmse_t_test.csv",
                      np.arange(series.size) * dataset.dt, series)
    else:
        if manifest is None:
            raise ConfigError("--signal needs a generated dataset (manifest "
                              "provides the ground-truth system)")
        horizon = args.horizon or manifest["horizon"]
        dt = manifest["dt"]
        cfg_sim = SimConfig(dt=dt, horizon=horizon)
        n_eval = args.n_eval
        seeds = [int(s.generate_state(1)[0])
                 for s in np.random.SeedSequence(args.seed or 0).spawn(n_eval)]
        sig = manifest.get("signal", {})
        preds, targets = [], []
        finite = True
        for i, seed in enumerate(seeds):
            spec = SignalSpec(kind=args.signal, horizon=horizon, dt=dt,
                              amplitude=sig.get("amplitude", 1.0),
                              rng_seed=seed,
                              variance=sig.get("variance", 0.005),
                              min_segment=sig.get("min_segment"),
                              max_segment=sig.get("max_segment"))
            u = gen_signal(spec)
            truth = _ground_truth(manifest, u, cfg_sim,
                                  manifest.get("substeps", 100))
            try:
                pred_traj = simulate(model, u, cfg_sim)
            except NonFiniteState as exc:
                finite = False
                metrics.setdefault("diverged", []).append(
                    {"signal": i, "step": exc.step})
                continue
            preds.append(pred_traj.outputs)
            targets.append(truth.outputs)
            if i < 3:
                write_trajectory(out / f"eval_{args.signal}_{i:03d}.csv",
                                 pred_traj)
        if preds:
            preds = np.stack(preds)
            targets = np.stack(targets)
            series = tr.rmse_t(preds, targets)
            metrics[args.signal] = {"rmse": tr.rmse(preds, targets),
                                    "all_finite": finite}
            _write_rmse_t(out / f"rmse_t_{args.signal}.csv",
                          np.arange(series.size) * dt, series)
    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=1)
    print(json.dumps(metrics, indent=1))
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = cfgmod.load_config(args.config) if args.config else None
    payload = tr.load_checkpoint(args.checkpoint)
    model = payload["model"]
    rng = np.random.default_rng(args.seed or 0)
    xs = rng.standard_normal((args.n_states, model.n_dim))
    kind = model.spec.kind
    hard: list[vf.VerifyReport] = []
    soft: list[vf.VerifyReport] = []
    if kind in ("passive_beta", "passive_alpha"):
        hard.append(vf.lure_check(model, xs))
    elif kind == "stable":
        hard.append(vf.stability_check(model, xs))
    else:
        hard.append(vf.kyp_check(model, xs))
    hard.append(vf.idempotence_audit(model, xs[:500]))
    dt = cfg.sim.dt if cfg else 0.1
    horizon = cfg.sim.horizon if cfg else 100
    n_roll = 5
    signals = []
    for i in range(n_roll):
        spec = SignalSpec(kind="rectangle", horizon=horizon, dt=dt,
                          rng_seed=int(rng.integers(2**31)),
                          channels=model.m_dim)
        signals.append(gen_signal(spec))
    mode = "equality" if kind == "conservative" else "inequality"
    passive = kind in ("passive_beta", "passive_alpha")
    sink = soft if passive else hard
    for i, u in enumerate(signals):
        if kind == "stable":
            # the stable projection certifies the autonomous system only
            u = np.zeros_like(u)
        storage = model.spec.V
        if passive:
            # the Lur'e convention certifies dissipation of half the storage
            storage = StorageFunction(0.5 * storage.P, storage.epsilon_guard)
        try:
            traj = simulate(model, u, SimConfig(dt=dt, horizon=horizon))
            rep = vf.dissipativity_check(traj, storage, model.spec.supply,
                                         mode=mode)
            rep.name = f"{rep.name}#{i}"
            sink.append(rep)
        except NonFiniteState as exc:
            sink.append(vf.VerifyReport(
                name=f"dissipativity[{mode}]#{i}", samples=0,
                max_residual=float("inf"), threshold=0.0, passed=False,
                note=f"diverged at step {exc.step}"))
    if kind == "io_stable" and model.spec.gamma2:
        gamma = float(np.sqrt(model.spec.gamma2))
        hard.append(vf.hj_check(model, xs, gamma))
        soft.append(vf.gain_check(model, signals, gamma, dt))
    if kind in ("passive_beta", "passive_alpha"):
        soft.append(vf.passivity_check(model, signals, dt))
    for rep in hard + soft:
        print(rep)
    all_pass = all(r.passed for r in hard)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "verify_report.json", "w") as fh:
            json.dump({"hard": [r.to_dict() for r in hard],
                       "soft": [r.to_dict() for r in soft],
                       "all_hard_passed": all_pass}, fh, indent=1)
    return EXIT_OK if all_pass else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dissipnet",
        description="learn and certify dissipative input-output dynamics")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="generate a benchmark dataset")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.set_defaults(func=cmd_generate)

    p_train = sub.add_parser("train", help="train a projected model")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--dataset", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--checkpoint", default=None,
                         help="resume from this checkpoint")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--signal", default=None,
                        choices=["rectangle", "step", "random_walk"])
    p_eval.add_argument("--horizon", type=int, default=None)
    p_eval.add_argument("--n-eval", type=int, default=10)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_verify = sub.add_parser("verify", help="audit a checkpoint's certificates")
    p_verify.add_argument("--checkpoint", required=True)
    p_verify.add_argument("--config", default=None)
    p_verify.add_argument("--out", default=None)
    p_verify.add_argument("--seed", type=int, default=None)
    p_verify.add_argument("--n-states", type=int, default=1000)
    p_verify.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidPreset) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DissipnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
