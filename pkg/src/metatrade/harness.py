"""Grid experiments: train on n symbols x m days, score greedily on day m+1.

Each grid cell averages over non-overlapping (symbol group, day window)
subsets.  Mining, ranking, scaling and training only ever see the training
days of a subset; the test day's learned columns come from the frozen
patterns.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .env import ExitRule
from .ingest import DataError, group_by_day
from .miner import PatternMiner, materialize
from .patterns import HandcraftedPatterns
from .ranker import PatternRanker, build_dataset
from .trainer import PpoHyper, RecurrentPPOAgent

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1


def splitmix64(x):
    """One step of the SplitMix64 mixer on a 64-bit integer."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(master, *parts):
    h = splitmix64(int(master) & MASK64)
    for p in parts:
        h = splitmix64(h ^ (int(p) & MASK64))
    return h


class LookaheadError(ValueError):
    pass


@dataclass(frozen=True)
class Subset:
    symbols: tuple
    train_dates: tuple
    test_date: str

    def __post_init__(self):
        if not self.train_dates:
            raise ValueError("subset needs at least one training day")
        if self.test_date <= max(self.train_dates):
            raise LookaheadError(
                f"test day {self.test_date} is not after the training days (last {max(self.train_dates)})")

    def cells(self):
        days = self.train_dates + (self.test_date,)
        return {(s, d) for s in self.symbols for d in days}


@dataclass(frozen=True)
class ExperimentConfig:
    n_symbols: int
    m_days: int
    feature_set: str = "base"
    mode: str = "rl2"
    exit_rule: ExitRule = field(default_factory=ExitRule)
    miner: dict = field(default_factory=dict)
    ranker: dict = field(default_factory=dict)
    agent: dict = field(default_factory=dict)
    ppo: PpoHyper = field(default_factory=PpoHyper)
    seed: int = 0
    subsets: int = 4

    @classmethod
    def from_config(cls, cfg, n_symbols, m_days, feature_set, mode):
        ppo = {k: v for k, v in vars(cfg.ppo).items() if k != "checkpoint_every"}
        return cls(
            n_symbols=int(n_symbols), m_days=int(m_days), feature_set=feature_set, mode=mode,
            exit_rule=ExitRule(**vars(cfg.exit)),
            miner=dict(vars(cfg.miner)), ranker=dict(vars(cfg.ranker)),
            agent=dict(vars(cfg.agent)), ppo=PpoHyper(**ppo),
            seed=cfg.grid.seed, subsets=cfg.grid.subsets,
        )

    @property
    def block(self):
        return (self.mode, self.feature_set)


def expand_subsets(episodes, n_symbols, m_days, count):
    """``count`` pairwise disjoint subsets of n symbols x (m+1) consecutive days.

    Symbols are split into consecutive groups of n (sorted order) and the
    trading days into consecutive windows of m+1; subset k takes group
    ``k % G`` and window ``k // G``.  Raises DataError with the shortfall
    when fewer than ``count`` complete subsets exist.
    """
    table, dates, symbols = group_by_day(episodes)
    G, W = len(symbols) // n_symbols, len(dates) // (m_days + 1)
    if G * W < count:
        raise DataError(
            f"need {count} subsets of {n_symbols} symbols x {m_days + 1} days; data has "
            f"{len(symbols)} symbols and {len(dates)} days, enough for {G} symbol group(s) x "
            f"{W} day window(s) = {G * W}")
    out = []
    for k in range(count):
        g, w = k % G, k // G
        syms = tuple(symbols[g * n_symbols:(g + 1) * n_symbols])
        days = dates[w * (m_days + 1):(w + 1) * (m_days + 1)]
        missing = [(s, d) for s in syms for d in days if s not in table[d]]
        if missing:
            raise DataError(f"subset {k}: missing symbol-days {missing[:5]}")
        out.append(Subset(syms, tuple(days[:-1]), days[-1]))
    return out


def _lookup(episodes):
    return {ep.key: ep for ep in episodes}


@dataclass
class FittedSubset:
    subset: Subset
    agent: RecurrentPPOAgent
    patterns: list
    ranker: PatternRanker | None
    test_episodes: list

    def fingerprint(self):
        """Hash of every fitted artifact (patterns, importances, agent weights)."""
        h = hashlib.sha256()
        for p in self.patterns:
            h.update(p.name.encode())
        if self.ranker is not None:
            h.update(self.ranker.feature_importances_.tobytes())
        for name, arr in sorted(self.agent.policy_.state_arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def add_features(feature_set, train, test, exp, seed):
    """Append hand-crafted and/or learned columns; returns (train, test, patterns, ranker)."""
    patterns, ranker = [], None
    if feature_set in ("handcrafted", "both"):
        hc = HandcraftedPatterns().fit(train)
        train, test = hc.transform(train), hc.transform(test)
    if feature_set in ("learned", "both"):
        miner_kw = dict(exp.miner)
        miner = PatternMiner(random_state=seed % (1 << 32), **miner_kw).fit(train)
        mined = miner.patterns_
        if mined:
            ranker_kw = dict(exp.ranker)
            k = ranker_kw.pop("k", 10)
            X, y = build_dataset(train, mined, exp.exit_rule)
            ranker = PatternRanker(random_state=(seed >> 32) % (1 << 32), k=k, **ranker_kw).fit(X, y)
            patterns = [mined[i] for i in ranker.selected(min(k, len(mined)))]
        else:
            log.warning("miner found no patterns; learned feature set adds no columns")
        names = [p.name for p in patterns]
        train = [ep.with_columns(names, materialize(patterns, ep)) for ep in train]
        test = [ep.with_columns(names, materialize(patterns, ep)) for ep in test]
    return train, test, patterns, ranker


def fit_subset(exp, subset, episodes, subset_index=0):
    """Everything that is fitted for one subset, using its training days only."""
    by_key = _lookup(episodes)
    train = [by_key[(s, d)] for d in subset.train_dates for s in subset.symbols]
    test = [by_key[(s, subset.test_date)] for s in subset.symbols]
    seed = derive_seed(exp.seed, exp.n_symbols, exp.m_days, subset_index)
    train, test, patterns, ranker = add_features(exp.feature_set, train, test, exp, seed)
    ppo = vars(exp.ppo)
    agent = RecurrentPPOAgent(
        mode=exp.mode, feature_set=exp.feature_set,
        stop_loss_frac=exp.exit_rule.stop_loss_frac, target_frac=exp.exit_rule.target_frac,
        cost=exp.exit_rule.cost, random_state=seed % (1 << 63), **exp.agent, **ppo,
    ).fit(train)
    return FittedSubset(subset, agent, patterns, ranker, test)


def score_subset(fitted):
    """Test-day return in percent: per symbol the sum of trade returns, averaged over symbols."""
    per_symbol = [fitted.agent.score_day(ep) for ep in fitted.test_episodes]
    return 100.0 * float(np.mean(per_symbol))


def _run_one(job):
    exp, subset, episodes, k = job
    return score_subset(fit_subset(exp, subset, episodes, k))


@dataclass
class CellResult:
    returns: list

    @property
    def runs(self):
        return len(self.returns)

    @property
    def mean(self):
        return float(np.mean(self.returns))

    @property
    def se(self):
        if self.runs < 2:
            return math.nan
        return float(np.std(self.returns, ddof=1) / math.sqrt(self.runs))


def run_experiment(exp, episodes, n_jobs=1):
    """Mean test-day % return of one grid cell over its subsets."""
    subsets = expand_subsets(episodes, exp.n_symbols, exp.m_days, exp.subsets)
    jobs = [(exp, s, episodes, k) for k, s in enumerate(subsets)]
    return CellResult(_map(_run_one, jobs, n_jobs))


def _map(fn, jobs, n_jobs):
    if n_jobs and n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


class ResultTable:
    """Cells keyed by (mode, feature_set) block, then (m_days, n_symbols)."""

    def __init__(self):
        self.cells = {}

    def add(self, exp, result):
        self.cells[(exp.block, exp.m_days, exp.n_symbols)] = result

    def blocks(self):
        return sorted({k[0] for k in self.cells}, key=_block_order)

    def block_axes(self, block):
        keys = [k for k in self.cells if k[0] == block]
        return sorted({k[1] for k in keys}), sorted({k[2] for k in keys})

    def get(self, block, m, n):
        return self.cells.get((block, m, n))

    def __len__(self):
        return len(self.cells)


def _block_order(block):
    from .agent import FEATURE_SETS, MODES
    return (MODES.index(block[0]), FEATURE_SETS.index(block[1]))


def run_grid(cfg, episodes, n_jobs=1, progress=None):
    """Every (mode, feature set, m, n) cell of ``cfg.grid`` on ``episodes``."""
    exps = [
        ExperimentConfig.from_config(cfg, n, m, fs, mode)
        for mode in cfg.grid.modes for fs in cfg.grid.feature_sets
        for m in cfg.grid.m_days for n in cfg.grid.n_symbols
    ]
    jobs, owners = [], []
    for exp in exps:
        for k, s in enumerate(expand_subsets(episodes, exp.n_symbols, exp.m_days, exp.subsets)):
            jobs.append((exp, s, episodes, k))
            owners.append(exp)
    scores = _map(_run_one, jobs, n_jobs)
    table = ResultTable()
    for exp in exps:
        rets = [sc for sc, o in zip(scores, owners) if o is exp]
        table.add(exp, CellResult(rets))
        if progress is not None:
            progress(exp, table.get(exp.block, exp.m_days, exp.n_symbols))
    return table


# ---------------------------------------------------------------- report

REPORT_FIELDS = ("mode", "feature_set", "m_days", "n_symbols", "runs", "mean_pct", "se_pct")


def _fmt(x, digits=2):
    return "-" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.{digits}f}"


def render_text(table, digits=2):
    """Aligned text: one days x symbols block per (mode, feature set)."""
    lines = []
    for block in table.blocks():
        days, syms = table.block_axes(block)
        lines.append(f"mode={block[0]} features={block[1]}  (avg % return on test day, mean +/- se)")
        head = ["days \\ symbols"] + [str(n) for n in syms]
        rows = [head]
        for m in days:
            row = [str(m)]
            for n in syms:
                c = table.get(block, m, n)
                row.append("" if c is None else f"{_fmt(c.mean, digits)} +/- {_fmt(c.se, digits)} (n={c.runs})")
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        for r in rows:
            lines.append("  ".join(v.rjust(w) for v, w in zip(r, widths)).rstrip())
        lines.append("")
    return "\n".join(lines)


def report(table, csv_path, text_path=None):
    """Write the CSV (one line per cell) and, optionally, the text tables."""
    if len(table) == 0:
        raise ValueError("report needs at least one completed cell")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for block in table.blocks():
            days, syms = table.block_axes(block)
            for m in days:
                for n in syms:
                    c = table.get(block, m, n)
                    if c is not None:
                        w.writerow([block[0], block[1], m, n, c.runs, repr(c.mean), repr(c.se)])
    if text_path is not None:
        with open(text_path, "w") as fh:
            fh.write(render_text(table))


def read_report(csv_path):
    """Inverse of the CSV half of :func:`report`."""
    table = ResultTable()
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        exp = ExperimentConfig(int(r["n_symbols"]), int(r["m_days"]), r["feature_set"], r["mode"])
        # only mean/se/runs survive the round trip; store a stand-in
        table.add(exp, _StoredCell(int(r["runs"]), float(r["mean_pct"]), float(r["se_pct"])))
    return table


@dataclass
class _StoredCell:
    runs: int
    mean: float
    se: float
