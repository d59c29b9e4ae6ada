"""Command line: ``metatrade <subcommand> ...``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import harness, ingest, synth
from .agent import LSTMPolicy
from .config import ConfigError, load_config
from .env import ExitRule
from .ingest import DataError
from .miner import PatternMiner, load_patterns, materialize, save_patterns
from .patterns import HandcraftedPatterns
from .ranker import PatternRanker, build_dataset, write_importance_report
from .trainer import RecurrentPPOAgent, evaluate

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

PRESETS = {
    "regime-flip": synth.regime_flip_spec,
    "planted-signal": synth.planted_signal_spec,
}

log = logging.getLogger("metatrade")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _resolve(cfg, path):
    """Relative paths that do not exist are looked up in the data directory."""
    p = Path(path)
    if p.is_absolute() or p.exists():
        return p
    return Path(cfg.data_dir()) / p


def load_episodes(cfg, path):
    """Prepared episodes from a bar CSV or an ``ingest`` cache (.npz)."""
    p = ingest.check_path(_resolve(cfg, path))
    if p.suffix == ".npz":
        return ingest.load_cache(p)
    return [ingest.prepare(ep) for ep in ingest.load_csv(p)]


def _select_dates(episodes, dates):
    if not dates:
        return episodes
    wanted = set(dates)
    out = [ep for ep in episodes if ep.date in wanted]
    if not out:
        raise DataError(f"no episodes on {sorted(wanted)}")
    return out


def _with_features(episodes, feature_set, patterns_path):
    if feature_set in ("handcrafted", "both"):
        episodes = HandcraftedPatterns().fit_transform(episodes)
    if feature_set in ("learned", "both"):
        if not patterns_path:
            raise ConfigError(f"feature set {feature_set!r} needs --patterns")
        pats = load_patterns(patterns_path)
        names = [m.pattern.name for m in pats]
        episodes = [ep.with_columns(names, materialize(pats, ep)) for ep in episodes]
    return episodes


# ---------------------------------------------------------------- commands


def cmd_ingest(args, cfg):
    episodes = load_episodes(cfg, args.csv)
    ingest.save_cache(args.out, episodes)
    print(f"{len(episodes)} episodes -> {args.out}")


def cmd_synth(args, cfg):
    spec = PRESETS[args.preset](n_symbols=args.symbols, n_days=args.days,
                                bars_per_day=args.bars, seed=args.seed)
    ds = synth.generate_synthetic(spec)
    ds.to_csv(args.out)
    print(f"{len(ds.episodes)} symbol-days -> {args.out}")


def cmd_mine(args, cfg):
    episodes = _select_dates(load_episodes(cfg, args.data), args.dates)
    miner = PatternMiner(random_state=args.seed, **vars(cfg.miner)).fit(episodes)
    save_patterns(args.out, miner.mined_)
    print(f"{len(miner.mined_)} patterns -> {args.out}")


def cmd_rank(args, cfg):
    episodes = _select_dates(load_episodes(cfg, args.data), args.dates)
    mined = load_patterns(args.patterns)
    if not mined:
        raise DataError(f"{args.patterns}: no patterns to rank")
    X, y = build_dataset(episodes, mined, ExitRule(**vars(cfg.exit)))
    kw = dict(vars(cfg.ranker))
    ranker = PatternRanker(random_state=args.seed, **kw).fit(X, y)
    write_importance_report(args.out, [m.pattern.name for m in mined], ranker.feature_importances_)
    if args.select_out:
        save_patterns(args.select_out, [mined[i] for i in ranker.selected()])
    print(f"ranked {len(mined)} patterns -> {args.out}")


def _agent_kwargs(cfg):
    ppo = {k: v for k, v in vars(cfg.ppo).items() if k != "checkpoint_every"}
    return {**vars(cfg.agent), **ppo, **vars(cfg.exit)}


def cmd_train(args, cfg):
    episodes = _select_dates(load_episodes(cfg, args.data), args.dates)
    episodes = _with_features(episodes, args.feature_set, args.patterns)
    agent = RecurrentPPOAgent(mode=args.mode, feature_set=args.feature_set,
                              random_state=args.seed, **_agent_kwargs(cfg))
    ckpt_dir = str(Path(args.out).with_suffix("")) + "_ckpt" if cfg.ppo.checkpoint_every else None
    agent.fit(episodes, log_path=args.log, checkpoint_every=cfg.ppo.checkpoint_every,
              checkpoint_dir=ckpt_dir)
    agent.policy_.save(args.out)
    print(f"policy -> {args.out}")


def cmd_evaluate(args, cfg):
    policy = LSTMPolicy.load(args.policy)
    episodes = _select_dates(load_episodes(cfg, args.data), args.dates)
    episodes = _with_features(episodes, policy.config.feature_set, args.patterns)
    if episodes[0].features.shape[1] != policy.config.obs_dim:
        raise ConfigError(f"policy expects {policy.config.obs_dim} features, data has "
                          f"{episodes[0].features.shape[1]}")
    rule = ExitRule(**vars(cfg.exit))
    total = []
    for ep in episodes:
        ret, env = evaluate(policy, ep, rule)
        total.append(ret)
        print(f"{ep.symbol} {ep.date} return_pct={100 * ret:.4f} trades={len(env.orders)}")
        if args.trace_dir:
            os.makedirs(args.trace_dir, exist_ok=True)
            env.write_trace(Path(args.trace_dir) / f"{ep.symbol}_{ep.date}.csv")
    print(f"mean return_pct={100 * float(np.mean(total)):.4f}")


def cmd_report(args, cfg):
    table = harness.read_report(args.results)
    text = harness.render_text(table)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")


def cmd_run_grid(args, cfg):
    episodes = load_episodes(cfg, args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(exp, cell):
        log.info("%s %s m=%d n=%d mean=%.4f", exp.mode, exp.feature_set, exp.m_days, exp.n_symbols, cell.mean)

    table = harness.run_grid(cfg, episodes, n_jobs=args.jobs, progress=progress)
    harness.report(table, out / "report.csv", out / "report.txt")
    (out / "config.yaml").write_text(cfg.to_yaml())
    print((out / "report.txt").read_text(), end="")


# ---------------------------------------------------------------- parser


def build_parser():
    p = _Parser(prog="metatrade", description="Meta-RL intraday trading pipeline.")
    p.add_argument("--config", help="YAML config file (defaults otherwise)")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="validate a bar CSV, compute indicators, write a cache")
    s.add_argument("csv")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("synth", help="write a synthetic bar CSV")
    s.add_argument("--preset", choices=sorted(PRESETS), default="regime-flip")
    s.add_argument("--symbols", type=int, default=3)
    s.add_argument("--days", type=int, default=6)
    s.add_argument("--bars", type=int, default=390)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    def data_args(s):
        s.add_argument("--data", required=True, help="bar CSV or ingest cache")
        s.add_argument("--dates", nargs="*", help="restrict to these dates (YYYY-MM-DD)")
        s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("mine", help="mine frequent run patterns")
    data_args(s)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_mine)

    s = sub.add_parser("rank", help="rank mined patterns with a random forest")
    data_args(s)
    s.add_argument("--patterns", required=True)
    s.add_argument("--out", required=True, help="importance report CSV")
    s.add_argument("--select-out", help="write the top-k patterns here")
    s.set_defaults(fn=cmd_rank)

    s = sub.add_parser("train", help="train an agent with PPO")
    data_args(s)
    s.add_argument("--mode", choices=("vanilla", "rl2"), default="rl2")
    s.add_argument("--feature-set", choices=("base", "handcrafted", "learned", "both"), default="base")
    s.add_argument("--patterns", help="pattern CSV for learned features")
    s.add_argument("--log", help="training log CSV")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("evaluate", help="greedy evaluation of a saved policy")
    data_args(s)
    s.add_argument("--policy", required=True)
    s.add_argument("--patterns")
    s.add_argument("--trace-dir")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("report", help="render a grid report CSV as text tables")
    s.add_argument("results")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("run-grid", help="whole pipeline over the configured grid")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(fn=cmd_run_grid)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config)
        args.fn(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - every other failure maps to one code
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
