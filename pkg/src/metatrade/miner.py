"""Mining frequent "run" patterns over primary and pairwise-difference features.

Facts are the feature values of each (episode, bar).  The only meta-rule is
a run: a descriptor whose values are strictly increasing (or decreasing)
over the last ``length`` bars.  Search starts from randomly drawn seed
instances, enumerates every instantiation of the meta-rule that holds at the
seed, and keeps the ones whose support over the whole corpus reaches the
threshold.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .patterns import run_lengths

UP, DOWN = "up", "down"
DIRECTIONS = (UP, DOWN)
_SIGN = {UP: 1, DOWN: -1}


@dataclass(frozen=True, order=True)
class FeatureDescriptor:
    a: str
    b: str | None = None

    def __post_init__(self):
        if self.b is not None and self.a == self.b:
            raise ValueError(f"difference of a column with itself: {self.a}")

    @property
    def name(self):
        return self.a if self.b is None else f"{self.a}-{self.b}"

    @property
    def columns(self):
        return (self.a,) if self.b is None else (self.a, self.b)

    @classmethod
    def parse(cls, text):
        a, sep, b = text.partition("-")
        return cls(a, b if sep else None)

    def values(self, features, names):
        try:
            col = features[:, names.index(self.a)]
            if self.b is not None:
                col = col - features[:, names.index(self.b)]
        except ValueError:
            raise KeyError(f"descriptor {self.name!r} references a missing column") from None
        return col


@dataclass(frozen=True)
class Pattern:
    direction: str
    descriptor: FeatureDescriptor
    length: int

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be 'up' or 'down', got {self.direction!r}")
        if self.length < 2:
            raise ValueError("run length must be at least 2")

    @property
    def name(self):
        return f"{self.direction}:{self.descriptor.name}:{self.length}"


@dataclass(frozen=True)
class MinedPattern:
    pattern: Pattern
    support_count: int
    support_frac: float


class FactBase:
    """Column store over a corpus of episodes sharing one feature layout."""

    def __init__(self, episodes):
        self.episodes = list(episodes)
        if self.episodes:
            self.names = tuple(self.episodes[0].feature_names)
            for ep in self.episodes:
                if tuple(ep.feature_names) != self.names:
                    raise ValueError(f"episode {ep.key} has a different feature layout")
        else:
            self.names = ()
        self.lengths = np.array([ep.n_rows for ep in self.episodes], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.lengths)]).astype(np.int64)

    @property
    def n_total(self):
        return int(self.offsets[-1])

    @cached_property
    def descriptors(self):
        prim = [FeatureDescriptor(n) for n in self.names]
        diffs = [FeatureDescriptor(a, b) for a in self.names for b in self.names if a != b]
        return prim + diffs

    def value(self, descriptor, episode, t):
        ep = self.episodes[episode]
        return float(descriptor.values(ep.features[t:t + 1], self.names)[0])

    @cached_property
    def _values(self):
        """(n_total, D) matrix of every descriptor, built on first use."""
        if not self.episodes:
            return np.zeros((0, 0))
        X = np.vstack([ep.features for ep in self.episodes])
        F = X.shape[1]
        pairs = [(i, j) for i in range(F) for j in range(F) if i != j]
        a, b = np.array(pairs, dtype=np.int64).reshape(-1, 2).T
        return np.hstack([X, X[:, a] - X[:, b]])

    def runs(self, direction):
        return self._runs[direction]

    @cached_property
    def _runs(self):
        out = {}
        for d in DIRECTIONS:
            parts = [
                run_lengths(self._values[s:e], _SIGN[d]).astype(np.int32)
                for s, e in zip(self.offsets[:-1], self.offsets[1:])
            ]
            out[d] = np.vstack(parts) if parts else np.zeros((0, 0), dtype=np.int32)
        return out

    def eligible(self, length):
        """Number of (episode, t) with t >= length - 1."""
        return int(np.clip(self.lengths - length + 1, 0, None).sum())

    def eligible_episodes(self, length):
        return int((self.lengths >= length).sum())

    def episode_index(self, flat):
        return int(np.searchsorted(self.offsets, flat, side="right") - 1)


def holds(pattern, episode, t):
    """Whether ``pattern`` is satisfied at feature row ``t`` of ``episode``."""
    L = pattern.length
    if t < L - 1 or t >= episode.n_rows:
        return False
    v = pattern.descriptor.values(episode.features[t - L + 1:t + 1], tuple(episode.feature_names))
    d = np.diff(v)
    return bool(np.all(d > 0) if pattern.direction == UP else np.all(d < 0))


def _support(fb, direction, d, length, unit):
    """(bar occurrence count, support fraction in ``unit``)."""
    hit = fb.runs(direction)[:, d] >= length
    count = int(np.count_nonzero(hit))
    if unit == "episode":
        n = sum(bool(hit[s:e].any()) for s, e in zip(fb.offsets[:-1], fb.offsets[1:]))
        denom = fb.eligible_episodes(length)
    else:
        n, denom = count, fb.eligible(length)
    return count, (n / denom if denom else 0.0)


def mine(fact_base, support, max_patterns, min_length=3, max_length=6,
         random_state=None, budget=10_000, unit="bar"):
    """Randomized seed-instance search for frequent run patterns.

    Seeds are drawn without replacement, so ``budget >= fact_base.n_total``
    visits every instance and the result is the complete frequent set
    (truncated at ``max_patterns``).
    """
    if not 0 < support <= 1:
        raise ValueError("support must be in (0, 1]")
    if max_patterns < 1:
        raise ValueError("max_patterns must be >= 1")
    if not 2 <= min_length <= max_length:
        raise ValueError("need 2 <= min_length <= max_length")
    fb = fact_base
    if fb.n_total == 0:
        return []
    rng = np.random.default_rng(random_state)
    seeds = rng.permutation(fb.n_total)[:budget]
    descriptors = fb.descriptors
    lengths = range(min_length, max_length + 1)
    open_ = {(dr, L): np.ones(len(descriptors), dtype=bool) for dr in DIRECTIONS for L in lengths}
    kept = []
    for seed in seeds:
        for direction in DIRECTIONS:
            r = fb.runs(direction)[seed]
            for L in lengths:
                todo = open_[direction, L]
                for d in np.flatnonzero((r >= L) & todo):
                    todo[d] = False
                    count, frac = _support(fb, direction, d, L, unit)
                    if frac >= support:
                        kept.append(MinedPattern(Pattern(direction, descriptors[d], L), count, frac))
                        if len(kept) >= max_patterns:
                            return _sorted(kept)
                    elif unit == "bar":
                        # count(L') <= count(L), so this bound is a sound prune
                        for L2 in range(L + 1, max_length + 1):
                            if count < support * fb.eligible(L2):
                                open_[direction, L2][d] = False
    return _sorted(kept)


def _sorted(mined):
    return sorted(
        mined,
        key=lambda m: (-m.support_frac, m.pattern.descriptor.name, m.pattern.direction, m.pattern.length),
    )


def materialize(patterns, episode):
    """(T, P) 0/1 matrix, column p = holds(patterns[p], episode, t)."""
    names = tuple(episode.feature_names)
    out = np.zeros((episode.n_rows, len(patterns)))
    cache = {}
    for j, p in enumerate(patterns):
        p = getattr(p, "pattern", p)
        key = (p.descriptor, p.direction)
        if key not in cache:
            cache[key] = run_lengths(p.descriptor.values(episode.features, names), _SIGN[p.direction])
        out[:, j] = cache[key] >= p.length
    return out


def save_patterns(path, mined):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["direction", "descriptor", "length", "support_count", "support_frac"])
        for m in mined:
            p = m.pattern
            w.writerow([p.direction, p.descriptor.name, p.length, m.support_count, repr(m.support_frac)])


def load_patterns(path):
    with open(path, newline="") as fh:
        return [
            MinedPattern(
                Pattern(row["direction"], FeatureDescriptor.parse(row["descriptor"]), int(row["length"])),
                int(row["support_count"]), float(row["support_frac"]),
            )
            for row in csv.DictReader(fh)
        ]


class PatternMiner(TransformerMixin, BaseEstimator):
    """Fit mines frequent run patterns; transform appends their 0/1 columns.

    Parameters
    ----------
    support : float
        Minimum fraction of eligible bars on which a pattern must hold.
    max_patterns : int
        Search stops once this many patterns qualify.
    min_length, max_length : int
        Range of run lengths considered.
    budget : int
        Maximum number of seed instances drawn.
    unit : {"bar", "episode"}
        Support denominator.
    """

    def __init__(self, support=0.01, max_patterns=200, min_length=3, max_length=6,
                 budget=10_000, unit="bar", random_state=None):
        self.support = support
        self.max_patterns = max_patterns
        self.min_length = min_length
        self.max_length = max_length
        self.budget = budget
        self.unit = unit
        self.random_state = random_state

    def fit(self, episodes, y=None):
        self.fact_base_ = FactBase(episodes)
        self.mined_ = mine(
            self.fact_base_, self.support, self.max_patterns, self.min_length,
            self.max_length, self.random_state, self.budget, self.unit,
        )
        self.patterns_ = [m.pattern for m in self.mined_]
        return self

    def get_feature_names_out(self, input_features=None):
        return np.array([p.name for p in self.patterns_], dtype=object)

    def transform(self, episodes):
        single = not isinstance(episodes, (list, tuple))
        eps = [episodes] if single else episodes
        names = [p.name for p in self.patterns_]
        out = [ep.with_columns(names, materialize(self.patterns_, ep)) for ep in eps]
        return out[0] if single else out
