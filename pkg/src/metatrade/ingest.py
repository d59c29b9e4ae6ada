"""Minute-bar loading, per-episode normalization and technical indicators."""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PRIMARY_COLUMNS = ("open", "high", "low", "close", "volume")
INDICATOR_COLUMNS = (
    "sma5", "sma10", "sma20", "ema5", "ema20", "rsi14", "macd", "macd_signal",
    "bb_upper", "bb_lower", "std10", "roc10", "stoch_k", "stoch_d", "obv",
)
CSV_HEADER = ("timestamp", "symbol", "open", "high", "low", "close", "volume")


class DataError(ValueError):
    """Malformed or insufficient market data."""


@dataclass(frozen=True, eq=False)
class Episode:
    """One symbol-day.

    ``bars`` holds the raw OHLCV values (N x 5) and never changes.  ``features``
    is the T x F matrix served to models; its row 0 corresponds to bar
    ``warmup``.
    """

    symbol: str
    date: str
    timestamps: np.ndarray
    bars: np.ndarray
    features: np.ndarray = None
    feature_names: tuple = ()
    warmup: int = 0
    normalized: bool = False

    def __post_init__(self):
        if self.features is None:
            object.__setattr__(self, "features", self.bars.copy())
            object.__setattr__(self, "feature_names", PRIMARY_COLUMNS)
        if len(set(self.feature_names)) != len(self.feature_names):
            raise ValueError(f"duplicate feature names: {self.feature_names}")
        if self.features.shape[1] != len(self.feature_names):
            raise ValueError("feature matrix width does not match feature names")

    @property
    def key(self):
        return (self.symbol, self.date)

    @property
    def n_bars(self):
        return len(self.bars)

    @property
    def n_rows(self):
        return len(self.features)

    @property
    def raw_close(self):
        """Raw closes aligned with feature rows."""
        return self.bars[self.warmup:, 3]

    def column(self, name):
        try:
            return self.features[:, self.feature_names.index(name)]
        except ValueError:
            raise KeyError(f"episode {self.key} has no column {name!r}") from None

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def with_columns(self, names, values):
        """Append columns (T x k) to the feature matrix."""
        values = np.asarray(values, dtype=np.float64).reshape(self.n_rows, len(names))
        return self.replace(
            features=np.hstack([self.features, values]),
            feature_names=tuple(self.feature_names) + tuple(names),
        )

    def truncated(self, n_bars):
        """Prefix of the first ``n_bars`` raw bars, feature rows cut to match."""
        keep_rows = max(0, n_bars - self.warmup)
        return self.replace(
            timestamps=self.timestamps[:n_bars],
            bars=self.bars[:n_bars],
            features=self.features[:keep_rows],
        )


def _parse_float(text, column, lineno):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise DataError(f"row {lineno}: cannot parse {column}={text!r}") from None
    if not np.isfinite(value):
        raise DataError(f"row {lineno}: non-finite {column}={text!r}")
    return value


def load_csv(path):
    """Read ``timestamp,symbol,open,high,low,close,volume`` rows into episodes.

    Returns un-normalized episodes sorted by (symbol, date).  Row numbers in
    error messages count the header as row 1.
    """
    groups = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        header = [h.strip() for h in header]
        missing = [c for c in CSV_HEADER if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        idx = {c: header.index(c) for c in CSV_HEADER}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise DataError(f"row {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                ts = datetime.fromisoformat(row[idx["timestamp"]].strip())
            except ValueError:
                raise DataError(f"row {lineno}: bad timestamp {row[idx['timestamp']]!r}") from None
            symbol = row[idx["symbol"]].strip()
            o, h, l, c, v = (_parse_float(row[idx[k]], k, lineno) for k in PRIMARY_COLUMNS)
            if h < l:
                raise DataError(f"row {lineno}: high {h} < low {l}")
            if l > min(o, c) or h < max(o, c):
                raise DataError(f"row {lineno}: open/close outside [low, high]")
            if v < 0:
                raise DataError(f"row {lineno}: negative volume {v}")
            day = groups.setdefault((symbol, ts.date().isoformat()), [])
            if day and ts <= day[-1][0]:
                raise DataError(f"row {lineno}: timestamp {ts.isoformat()} not after previous bar for {symbol}")
            day.append((ts, o, h, l, c, v))
    episodes = []
    for (symbol, date), rows in sorted(groups.items()):
        episodes.append(Episode(
            symbol=symbol,
            date=date,
            timestamps=np.array([r[0] for r in rows], dtype="datetime64[m]"),
            bars=np.array([r[1:] for r in rows], dtype=np.float64),
        ))
    return episodes


def write_csv(path, episodes):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for ep in episodes:
            for ts, bar in zip(ep.timestamps, ep.bars):
                w.writerow([str(ts.astype("datetime64[m]")), ep.symbol, *(repr(float(x)) for x in bar)])


def normalize(episode):
    """Scale prices by the first close and volume by the first non-zero volume."""
    bars = episode.bars
    if len(bars) == 0:
        raise DataError(f"{episode.key}: empty episode")
    first_close = bars[0, 3]
    if first_close <= 0:
        raise DataError(f"{episode.key}: first close {first_close} is not positive")
    nonzero = np.flatnonzero(bars[:, 4] > 0)
    if len(nonzero) == 0:
        raise DataError(f"{episode.key}: all volumes are zero")
    feats = np.empty_like(bars)
    feats[:, :4] = bars[:, :4] / first_close
    feats[:, 4] = bars[:, 4] / bars[nonzero[0], 4]
    return episode.replace(features=feats, feature_names=PRIMARY_COLUMNS, warmup=0, normalized=True)


# ---------------------------------------------------------------- indicators
# Every function returns an array the length of its input with NaN where the
# indicator is not yet defined; all are trailing-window (causal).


def sma(x, n):
    out = np.full(len(x), np.nan)
    if len(x) >= n:
        out[n - 1:] = sliding_window_view(x, n).mean(axis=1)
    return out


def rolling_std(x, n):
    out = np.full(len(x), np.nan)
    if len(x) >= n:
        out[n - 1:] = sliding_window_view(x, n).std(axis=1)
    return out


def ema(x, n):
    """EMA with alpha 2/(n+1), seeded by the SMA of the first n defined values."""
    out = np.full(len(x), np.nan)
    defined = np.flatnonzero(~np.isnan(x))
    if len(defined) < n:
        return out
    start = defined[0] + n - 1
    alpha = 2.0 / (n + 1)
    prev = x[defined[0]:start + 1].mean()
    out[start] = prev
    for t in range(start + 1, len(x)):
        prev = alpha * x[t] + (1.0 - alpha) * prev
        out[t] = prev
    return out


def rsi(close, n=14):
    """Wilder RSI; 100 when there are no down moves, 50 on a flat window."""
    out = np.full(len(close), np.nan)
    if len(close) <= n:
        return out
    delta = np.diff(close)
    gain = np.clip(delta, 0, None)
    loss = np.clip(-delta, 0, None)
    avg_g, avg_l = gain[:n].mean(), loss[:n].mean()

    def value(g, l):
        if l == 0:
            return 50.0 if g == 0 else 100.0
        return 100.0 - 100.0 / (1.0 + g / l)

    out[n] = value(avg_g, avg_l)
    for t in range(n + 1, len(close)):
        avg_g = (avg_g * (n - 1) + gain[t - 1]) / n
        avg_l = (avg_l * (n - 1) + loss[t - 1]) / n
        out[t] = value(avg_g, avg_l)
    return out


def macd(close, fast=12, slow=26, signal=9):
    line = ema(close, fast) - ema(close, slow)
    return line, ema(line, signal)


def roc(close, n=10):
    out = np.full(len(close), np.nan)
    out[n:] = close[n:] / close[:-n] - 1.0
    return out


def stochastic(high, low, close, n=14, smooth=3):
    k = np.full(len(close), np.nan)
    if len(close) >= n:
        hh = sliding_window_view(high, n).max(axis=1)
        ll = sliding_window_view(low, n).min(axis=1)
        span = hh - ll
        c = close[n - 1:]
        with np.errstate(invalid="ignore", divide="ignore"):
            k[n - 1:] = np.where(span > 0, 100.0 * (c - ll) / np.where(span > 0, span, 1.0), 50.0)
    d = np.full(len(close), np.nan)
    if len(close) >= n + smooth - 1:
        d[n + smooth - 2:] = sliding_window_view(k[n - 1:], smooth).mean(axis=1)
    return k, d


def obv(close, volume):
    out = np.zeros(len(close))
    out[1:] = np.cumsum(np.sign(np.diff(close)) * volume[1:])
    return out


def indicator_matrix(ohlcv):
    """The 15 indicator columns (N x 15) for a normalized OHLCV matrix."""
    o, h, l, c, v = ohlcv.T
    macd_line, macd_sig = macd(c)
    mid, sd20 = sma(c, 20), rolling_std(c, 20)
    k, d = stochastic(h, l, c)
    cols = [
        sma(c, 5), sma(c, 10), mid, ema(c, 5), ema(c, 20), rsi(c, 14), macd_line, macd_sig,
        mid + 2.0 * sd20, mid - 2.0 * sd20, rolling_std(c, 10), roc(c, 10), k, d, obv(c, v),
    ]
    return np.column_stack(cols)


# MACD signal is the last to become defined: EMA(26) at index 25, then EMA(9) of it.
WARMUP = 26 + 9 - 2


def compute_indicators(episode):
    """Append the indicator columns and drop warm-up rows."""
    if not episode.normalized:
        raise DataError(f"{episode.key}: normalize before computing indicators")
    if episode.warmup != 0:
        raise DataError(f"{episode.key}: indicators already computed")
    if episode.n_bars <= WARMUP:
        raise DataError(f"{episode.key}: {episode.n_bars} bars, need more than {WARMUP} for indicators")
    ind = indicator_matrix(episode.features[:, :5])
    full = np.hstack([episode.features, ind])
    defined = np.flatnonzero(np.isfinite(full).all(axis=1))
    start = int(defined[0])
    assert start == WARMUP, start
    return episode.replace(
        features=full[start:].copy(),
        feature_names=PRIMARY_COLUMNS + INDICATOR_COLUMNS,
        warmup=start,
    )


def prepare(episode):
    """normalize + compute_indicators."""
    return compute_indicators(normalize(episode))


# ---------------------------------------------------------------- cache


def save_cache(path, episodes):
    """Store prepared episodes in one ``.npz`` keyed by symbol/date."""
    arrays = {}
    index = []
    for i, ep in enumerate(episodes):
        index.append([ep.symbol, ep.date, ep.warmup, int(ep.normalized), list(ep.feature_names)])
        arrays[f"ts{i}"] = ep.timestamps.astype("datetime64[m]").astype(np.int64)
        arrays[f"bars{i}"] = ep.bars
        arrays[f"feat{i}"] = ep.features
    arrays["index"] = np.frombuffer(json.dumps(index).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_cache(path):
    with np.load(path) as z:
        index = json.loads(bytes(z["index"]).decode())
        out = []
        for i, (symbol, date, warmup, norm, names) in enumerate(index):
            out.append(Episode(
                symbol=symbol, date=date,
                timestamps=z[f"ts{i}"].astype("datetime64[m]"),
                bars=z[f"bars{i}"], features=z[f"feat{i}"],
                feature_names=tuple(names), warmup=warmup, normalized=bool(norm),
            ))
    return out


def group_by_day(episodes):
    """{date: {symbol: episode}} plus the sorted date and symbol lists."""
    table = {}
    for ep in episodes:
        table.setdefault(ep.date, {})[ep.symbol] = ep
    dates = sorted(table)
    symbols = sorted({ep.symbol for ep in episodes})
    return table, dates, symbols


def check_path(path):
    p = Path(path)
    if not p.exists():
        raise DataError(f"{p}: no such file")
    return p
