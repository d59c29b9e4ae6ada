"""Hand-crafted candlestick flags: three crows and four horsemen."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

HANDCRAFTED_NAMES = ("three_crows", "four_horsemen")


def run_lengths(x, direction):
    """Length of the strictly monotone run ending at each index.

    ``direction`` is +1 (increasing) or -1 (decreasing).  A lone value is a
    run of length 1; ties break the run.  Works column-wise on 2-D input.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.ones(x.shape, dtype=np.int64)
    if len(x) < 2:
        return out
    step = (x[1:] > x[:-1]) if direction > 0 else (x[1:] < x[:-1])
    for t in range(1, len(x)):
        out[t] = np.where(step[t - 1], out[t - 1] + 1, 1)
    return out


def _both_runs(episode, length, direction):
    opens, closes = episode.bars[:, 0], episode.bars[:, 3]
    ok = (run_lengths(opens, direction) >= length) & (run_lengths(closes, direction) >= length)
    return ok[episode.warmup:]


def detect_three_crows(episode):
    """True at bar t when opens and closes both fell strictly over t-2..t."""
    return _both_runs(episode, 3, -1)


def detect_four_horsemen(episode):
    """True at bar t when opens and closes both rose strictly over t-3..t."""
    return _both_runs(episode, 4, +1)


def pattern_flags(episode):
    """(T, 2) float matrix: [three_crows, four_horsemen] per feature row."""
    return np.column_stack([detect_three_crows(episode), detect_four_horsemen(episode)]).astype(np.float64)


class HandcraftedPatterns(TransformerMixin, BaseEstimator):
    """Appends the two hand-crafted Boolean columns to each episode.

    Stateless; ``fit`` only exists for pipeline compatibility.
    """

    def fit(self, episodes, y=None):
        self.feature_names_out_ = HANDCRAFTED_NAMES
        return self

    def transform(self, episodes):
        single = not isinstance(episodes, (list, tuple))
        eps = [episodes] if single else episodes
        out = [ep.with_columns(HANDCRAFTED_NAMES, pattern_flags(ep)) for ep in eps]
        return out[0] if single else out
