"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 invalid config or data, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .agents import (PPOTrader, RandomPolicy, SellOnlyPolicy, episode_rng, evaluate, load_trader,
                     run_episode, save_trader)
from .config import load_config
from .data import split_chronological, write_dataset_csv
from .env import TradingEnv
from .exceptions import ConfigurationError, ValidationError
from .experiment import ExperimentError, emit_report, load_data, run_experiment
from .forecast import BestDayTrader, load_forecaster, save_forecaster, train_moe

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", help="sectioned key=value config file")
    p.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    p.add_argument("--out", help="output directory (overrides run.out)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config key; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="solartrade", description="Solar energy trading with PPO and forecasting baselines")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset.csv and prices.csv")
    _common(p)

    p = sub.add_parser("train-ppo", help="train a PPO trader on the chronological train split")
    _common(p)
    p.add_argument("--epochs", type=int, help="training epochs (default: ppo.long_epochs)")

    p = sub.add_parser("train-moe", help="train the price forecaster on its own random split")
    _common(p)
    p.add_argument("--epochs", type=int, help="forecaster epochs (overrides moe.epochs)")

    p = sub.add_parser("evaluate", help="evaluate an agent on the test window")
    _common(p)
    p.add_argument("--agent", required=True, choices=["ppo", "moe", "sell-only", "random"])
    p.add_argument("--model", help="trained model directory (ppo) or forecaster file (moe)")
    p.add_argument("--episodes", type=int, help="number of evaluation episodes")
    p.add_argument("--trajectory", help="write the first episode's step log to this CSV")

    p = sub.add_parser("experiment", help="run the full comparison pipeline")
    _common(p)
    p.add_argument("--epochs", type=int, help="override ppo.long_epochs")
    p.add_argument("--episodes", type=int, help="override episodes.ppo and episodes.moe")
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference check of every network")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _config(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.out is not None:
        overrides.append(f"run.out={args.out}")
    cfg = load_config(args.config, overrides)
    return cfg.validate()


def _cmd_synth(args):
    cfg = _config(args)
    if args.seed is not None:
        cfg.data.seed = args.seed
    cfg.data.source = "synthetic"
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_data(cfg)
    write_dataset_csv(dataset, out / "dataset.csv")
    with (out / "prices.csv").open("w", encoding="utf-8") as fh:
        fh.write("day,price\n")
        for r in dataset.records:
            fh.write(f"{r.day},{r.price!r}\n")
    print(f"wrote {len(dataset)} days to {out / 'dataset.csv'}")


def _cmd_train_ppo(args):
    cfg = _config(args)
    train, _ = split_chronological(load_data(cfg), cfg.split.test_fraction)
    epochs = cfg.ppo.long_epochs if args.epochs is None else args.epochs
    trader = PPOTrader(**cfg.ppo.trader_params(epochs, cfg.run.seed)).fit(train)
    out = Path(cfg.run.out)
    save_trader(out, trader)
    with (out / "training_curve.csv").open("w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={cfg.hash()}\n# seed={cfg.run.seed}\nepoch,mean_total\n")
        for i, v in enumerate(trader.training_curve_, start=1):
            fh.write(f"{i},{v!r}\n")
    print(f"trained {epochs} epochs; checkpoint in {out}")


def _cmd_train_moe(args):
    cfg = _config(args)
    if args.epochs is not None:
        cfg.moe.epochs = args.epochs
    res = train_moe(load_data(cfg), cfg.split.moe_test_fraction, cfg.run.seed, "random", **cfg.moe.model_params())
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    save_forecaster(out / "moe.spnn", res.model)
    with (out / "forecast.csv").open("w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={cfg.hash()}\n# train_mse={res.train_mse!r}\n# test_rmse={res.test_rmse!r}\n")
        fh.write("day,actual_price,predicted_price\n")
        for d, a, p in zip(res.test_days, res.test_actual, res.test_predicted):
            fh.write(f"{d},{float(a)!r},{float(p)!r}\n")
    print(f"train MSE {res.train_mse:.4f}  test RMSE {res.test_rmse:.4f}")


def _cmd_evaluate(args):
    cfg = _config(args)
    _, test = split_chronological(load_data(cfg), cfg.split.test_fraction)
    scaler = None
    if args.agent == "ppo":
        if not args.model:
            raise ConfigurationError("--model <directory> is required for the ppo agent")
        policy = load_trader(args.model)
        scaler = policy.scaler_
        episodes = args.episodes or cfg.episodes.ppo
    elif args.agent == "moe":
        if not args.model:
            raise ConfigurationError("--model <file> is required for the moe agent")
        policy = BestDayTrader(load_forecaster(args.model))
        episodes = args.episodes or cfg.episodes.moe
    elif args.agent == "random":
        policy, episodes = RandomPolicy(), args.episodes or cfg.episodes.random
    else:
        policy, episodes = SellOnlyPolicy(), args.episodes or cfg.episodes.sell_only
    if scaler is None:
        train, _ = split_chronological(load_data(cfg), cfg.split.test_fraction)
        scaler = TradingEnv(train).scaler
    env = TradingEnv(test, scaler, cfg.ppo.reward_balance_timing, record=bool(args.trajectory))
    result = evaluate(policy, env, episodes, cfg.run.seed)
    if args.trajectory:
        env.record = True
        run_episode(policy, env, episode_rng(cfg.run.seed, 0))
        env.write_trajectory(args.trajectory)
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / f"evaluation_{args.agent}.csv").open("w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={cfg.hash()}\n# seed={cfg.run.seed}\nepisode,total\n")
        for i, t in enumerate(result.totals):
            fh.write(f"{i},{t!r}\n")
    print(f"{args.agent}: mean total {result.mean:.4f} over {episodes} episode(s)")


def _cmd_experiment(args):
    if args.epochs is not None:
        args.set.append(f"ppo.long_epochs={args.epochs}")
    if args.episodes is not None:
        args.set += [f"episodes.ppo={args.episodes}", f"episodes.moe={args.episodes}"]
    cfg = _config(args)
    out = Path(cfg.run.out)
    results = run_experiment(cfg, out_dir=out)
    emit_report(results, out, plots=not args.no_plots)
    for agent, mean in results.means.items():
        print(f"{agent:>9s}  mean total {mean:12.4f}  ({len(results.totals[agent])} episodes)")
    print(f"reports written to {out}")


def _cmd_gradcheck(args):
    from .gradcheck import TOLERANCE, run_all

    t0 = time.perf_counter()
    errors = run_all(args.seed)
    ok = True
    for name, err in errors.items():
        passed = err < TOLERANCE
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name:20s} max rel error {err:.3e}")
    print(f"{len(errors)} networks checked in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if ok else EXIT_RUNTIME


COMMANDS = {
    "synth": _cmd_synth,
    "train-ppo": _cmd_train_ppo,
    "train-moe": _cmd_train_moe,
    "evaluate": _cmd_evaluate,
    "experiment": _cmd_experiment,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="warn")
    try:
        return COMMANDS[args.command](args) or EXIT_OK
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        invalid = isinstance(exc.__cause__, (ConfigurationError, ValidationError, FileNotFoundError))
        return EXIT_INVALID if invalid else EXIT_RUNTIME
    except (ConfigurationError, ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
