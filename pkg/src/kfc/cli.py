"""``kfc`` command line: collect, train-koopman, symmetries, eval-sym, train-agent, cartpole-check.

Settings come from flags, then an optional ``--config`` JSON file, then
defaults. Exit codes: 0 success, 2 usage, 3 data or validation error,
4 internal error.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from . import envs, koopman
from . import fileformat as ff
from . import offline_rl as rl
from . import symmetry as sy
from .data import Dataset
from .reference import cartpole_check

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4
AUG_MODES = ("none", "gaussian", "vae_noise", "kfc", "kfcpp", "kfcpp_prediction", "fwd_prediction")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _existing(path, what) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {path}")
    return p


def _load_dataset(path) -> Dataset:
    return Dataset.load(_existing(path, "dataset"))


def _load_model(path) -> koopman.KoopmanForwardModel:
    return koopman.KoopmanForwardModel.load(_existing(path, "model"))


def _synthetic_env(args):
    return envs.SyntheticBilinearEnv.random(args.state_dim, args.action_dim, seed=args.system_seed)


def _make_env(args, dataset: Dataset | None = None):
    name = args.env
    if name == "cartpole":
        return envs.CartpoleEnv()
    if name == "synthetic":
        if dataset is not None and "system" in dataset.meta:
            sysm = dataset.meta["system"]
            return envs.SyntheticBilinearEnv.random(sysm["state_dim"], sysm["action_dim"], seed=sysm["seed"])
        return _synthetic_env(args)
    raise UsageError(f"unknown env {name!r}")


# -- commands ----------------------------------------------------------------

def cmd_collect(args) -> int:
    if args.episodes < 0 or args.steps < 0:
        raise UsageError("--episodes and --steps must be non-negative")
    if args.env == "cartpole":
        ds = envs.collect(envs.CartpoleEnv(), episodes=args.episodes, steps=args.steps, seed=args.seed)
        survival = ds.meta.get("mean_survival", 0.0)
    else:
        env = _synthetic_env(args)
        ds = env.collect(args.episodes * args.steps, seed=args.seed)
        ds.meta["system"] = {"state_dim": args.state_dim, "action_dim": args.action_dim, "seed": args.system_seed}
        ds.meta["config"] = {"episodes": args.episodes, "steps": args.steps}
        survival = float(args.steps)
    ds.meta["creator_version"] = __version__
    ds.save(args.out)
    print(f"wrote {args.out}: {len(ds)} transitions, mean episode survival {survival:.1f} steps")
    return EXIT_OK


def cmd_train_koopman(args) -> int:
    ds = _load_dataset(args.dataset)
    cfg = koopman.KoopmanTrainConfig(
        latent_dim=args.latent_dim, hidden_dims=tuple(args.hidden), epochs=args.epochs,
        batch_size=args.batch_size, lr=args.lr, codec=args.codec, seed=args.seed)
    if args.codec == "identity":
        if args.latent_dim not in (None, ds.state_dim) and args.latent_dim_given:
            warnings.warn("identity codec: --latent-dim ignored, latent dim equals state dim")
        model = koopman.fit_linear(ds)
        model.config = {"codec": "identity", "seed": args.seed}
        pred = model.predict_next(ds.states, ds.actions) if len(ds) else np.zeros((0, ds.state_dim))
        err = float(np.mean((pred - ds.next_states) ** 2)) if len(ds) else 0.0
        report = {"codec": "identity", "train_mse": err, "n_train": len(ds)}
    else:
        model, rep = koopman.train(ds, cfg)
        report = rep.to_dict()
    report["config"] = model.config
    model.save(args.out)
    report_path = args.report or str(args.out) + ".report.json"
    _dump_json(report, report_path)
    print(json.dumps({k: v for k, v in report.items() if not isinstance(v, list)}, sort_keys=True))
    return EXIT_OK


def _aug_config(args, mode) -> sy.AugmentConfig:
    return sy.AugmentConfig(mode=mode, p_koopman=args.p_koopman, seed=args.aug_seed)


def cmd_symmetries(args) -> int:
    model = _load_model(args.model)
    ds = _load_dataset(args.dataset)
    if model.state_dim != ds.state_dim:
        raise DataError(f"model state dim {model.state_dim} != dataset state dim {ds.state_dim}")
    cfg = _aug_config(args, args.mode)
    info = sy.precompute_sidecar(model, ds, cfg, args.out, chunk_size=args.chunk_size,
                                 workers=args.workers, resume=not args.no_resume)
    print(json.dumps({"records": info.count, "fallbacks": info.fallbacks, "resumed_from": info.resumed_from,
                      "residual_percentiles": info.residual_percentiles()}, sort_keys=True))
    return EXIT_OK


def cmd_eval_sym(args) -> int:
    model = _load_model(args.model)
    ds = _load_dataset(args.dataset)
    if model.state_dim != ds.state_dim:
        raise DataError(f"model state dim {model.state_dim} != dataset state dim {ds.state_dim}")
    env = _make_env(args, ds)
    samples = args.samples
    if samples is not None and samples > len(ds):
        warnings.warn(f"--samples {samples} exceeds dataset size {len(ds)}; clamped")
        samples = len(ds)
    cfg = _aug_config(args, args.mode)
    rep = envs.fidelity_eval(env, model, ds, cfg, samples=samples, seed=args.seed,
                             match_baseline=args.mode != "none")
    rep.write_csv(args.out)
    summary = rep.summary()
    summary["config"] = {"mode": args.mode, "samples": samples, "seed": args.seed, "augment": cfg.to_dict()}
    _dump_json(summary, args.summary or str(args.out) + ".summary.json")
    print(json.dumps({k: v for k, v in summary.items() if k != "config"}, sort_keys=True))
    return EXIT_OK


def cmd_train_agent(args) -> int:
    ds = _load_dataset(args.dataset)
    if ds.action_set is None:
        raise DataError("train-agent needs a dataset with a discrete action set")
    model = _load_model(args.model) if args.model else None
    if args.aug not in ("none", "gaussian") and model is None:
        raise UsageError(f"--aug {args.aug} needs --model")
    sidecar = sy.load_sidecar(_existing(args.sidecar, "sidecar")) if args.sidecar else None
    aug = _aug_config(args, args.aug)
    cql = rl.CqlConfig(train_steps=args.steps, seed=args.seed, batch_size=args.batch_size,
                       bc_warmup_steps=args.bc_warmup, hidden=tuple(args.hidden))
    try:
        learner, log = rl.train_agent(ds, model, aug, cql, sidecar=sidecar)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    config = {"augment": aug.to_dict(), "cql": cql.to_dict(), "dataset": str(args.dataset),
              "model": args.model, "sidecar": args.sidecar}
    rl.save_policy(learner, args.out, ds.action_set, config)
    log_path = args.log or str(args.out) + ".log.jsonl"
    Path(log_path).write_text(json.dumps({"config": config}, sort_keys=True) + "\n" + log.to_jsonl())
    env = envs.CartpoleEnv()
    if ds.state_dim == env.state_dim and args.eval_episodes > 0:
        mean, std, _ = rl.evaluate_policy(env, learner.act, args.eval_episodes, seed=args.seed)
        print(f"evaluation return over {args.eval_episodes} episodes: {mean:.1f} +- {std:.1f} "
              f"(fallbacks {log.fallbacks})")
    return EXIT_OK


def cmd_cartpole_check(args) -> int:
    items = cartpole_check(args.tolerance)
    for it in items:
        print(it.line())
    return EXIT_OK if all(it.passed for it in items) else EXIT_DATA


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kfc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"kfc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON file with settings for this command (flags win)")
        sp.set_defaults(func=fn)
        return sp

    def synthetic_flags(sp):
        sp.add_argument("--state-dim", type=int, default=4)
        sp.add_argument("--action-dim", type=int, default=1)
        sp.add_argument("--system-seed", type=int, default=0)

    def aug_flags(sp):
        sp.add_argument("--p-koopman", type=float, default=0.8)
        sp.add_argument("--aug-seed", type=int, default=0)

    sp = add("collect", cmd_collect, "roll out the expert policy and write a KFD1 dataset")
    sp.add_argument("--env", choices=("cartpole", "synthetic"), default="cartpole")
    sp.add_argument("--episodes", type=int, default=100)
    sp.add_argument("--steps", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    synthetic_flags(sp)

    sp = add("train-koopman", cmd_train_koopman, "fit a bilinear Koopman forward model")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--latent-dim", type=int, default=32)
    sp.add_argument("--hidden", type=int, nargs="+", default=[128, 128])
    sp.add_argument("--epochs", type=int, default=75)
    sp.add_argument("--batch-size", type=int, default=256)
    sp.add_argument("--lr", type=float, default=3e-4)
    sp.add_argument("--codec", choices=("identity", "mlp"), default="mlp")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--report")
    sp.add_argument("--out", required=True)

    sp = add("symmetries", cmd_symmetries, "precompute per-tuple generators into a KFS1 sidecar")
    sp.add_argument("--model", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--mode", choices=("kfc", "kfcpp"), default="kfcpp")
    sp.add_argument("--chunk-size", type=int, default=1024)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--no-resume", action="store_true")
    sp.add_argument("--out", required=True)
    aug_flags(sp)

    sp = add("eval-sym", cmd_eval_sym, "shift magnitude and dynamics error of augmented pairs")
    sp.add_argument("--model", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--env", choices=("cartpole", "synthetic"), default="cartpole")
    sp.add_argument("--mode", choices=AUG_MODES, default="kfcpp")
    sp.add_argument("--samples", type=int, default=5000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--summary")
    sp.add_argument("--out", required=True)
    aug_flags(sp)
    synthetic_flags(sp)

    sp = add("train-agent", cmd_train_agent, "offline CQL on augmented transitions")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--model")
    sp.add_argument("--sidecar")
    sp.add_argument("--aug", choices=AUG_MODES, default="none")
    sp.add_argument("--steps", type=int, default=10000)
    sp.add_argument("--batch-size", type=int, default=256)
    sp.add_argument("--bc-warmup", type=int, default=2000)
    sp.add_argument("--hidden", type=int, nargs="+", default=[64, 64])
    sp.add_argument("--eval-episodes", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--log")
    sp.add_argument("--out", required=True)
    aug_flags(sp)

    sp = add("cartpole-check", cmd_cartpole_check, "self-consistency check of the reference cartpole matrices")
    sp.add_argument("--tolerance", type=float, default=1e-9)
    return p


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            conf = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read --config {args.config}: {exc}")
        if not isinstance(conf, dict):
            parser.error("--config must hold a JSON object")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(k.replace("-", "_") for k in conf) - known)
        if unknown:
            parser.error(f"unknown keys in --config: {', '.join(unknown)}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in conf.items()})
        args = parser.parse_args(argv)
    args.latent_dim_given = argv is not None and any(a.startswith("--latent-dim") for a in argv)
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"kfc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ff.FormatError, koopman.DimensionMismatch, sy.EmptyCommutant, ValueError) as exc:
        print(f"kfc: {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"kfc: {args.command}: internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
