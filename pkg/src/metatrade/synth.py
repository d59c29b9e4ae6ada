"""Synthetic minute bars with regimes and planted, genuinely predictive runs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ingest import Episode, write_csv

REGIMES = ("calm", "trend", "revert", "volatile")


@dataclass(frozen=True)
class PlantedPattern:
    """A strict close run of ``length`` values followed by a one-bar jump.

    ``rate`` is the per-bar probability of starting an event.  ``effect`` is
    the fractional size of the jump; with ``sign_regime`` it is multiplied
    by the day's hidden sign.  ``retrace_after`` > 0 undoes the jump that
    many bars later.  With ``decoys`` an equally frequent jump of the
    opposite sign occurs with no run before it, so jumps alone say nothing
    about the direction of the next one.  ``pause`` small bars against the
    run separate it from the jump, so a jump never extends the run.
    """

    direction: str = "down"
    length: int = 3
    effect: float = 0.012
    rate: float = 0.02
    step: float = 0.001
    sign_regime: bool = False
    retrace_after: int = 0
    decoys: bool = False
    pause: int = 0


@dataclass(frozen=True)
class SynthSpec:
    n_symbols: int = 3
    n_days: int = 6
    bars_per_day: int = 390
    start_date: str = "2024-01-02"
    open_time: str = "09:30"
    base_price: float = 100.0
    noise: float = 0.001
    drift: float = 0.0
    background: str = "random_walk"  # or "zigzag": alternating signs, no natural runs
    regimes: tuple = ("calm",)
    planted: tuple = field(default_factory=tuple)
    sign_persistence: float = 1.0  # chance the hidden sign survives each signal event
    seed: int = 0

    def __post_init__(self):
        if self.background not in ("random_walk", "zigzag"):
            raise ValueError(f"unknown background {self.background!r}")
        for r in self.regimes:
            if r not in REGIMES:
                raise ValueError(f"unknown regime {r!r}; choose from {REGIMES}")
        if self.bars_per_day < 2 or self.n_symbols < 1 or self.n_days < 1:
            raise ValueError("need at least 1 symbol, 1 day and 2 bars per day")


@dataclass
class SyntheticDataset:
    episodes: list
    events: dict  # (symbol, date) -> list of (pattern index, terminal bar index, jump sign)
    day_signs: dict  # (symbol, date) -> +1/-1

    def to_csv(self, path):
        write_csv(path, self.episodes)


def _trading_days(start, n):
    first = np.busday_offset(np.datetime64(start, "D"), 0, roll="forward")
    return [np.busday_offset(first, i) for i in range(n)]


def _day(spec, rng, start_price, regime, sign):
    """Close path for one day plus the planted events."""
    N = spec.bars_per_day
    noise = spec.noise * (2.0 if regime == "volatile" else 1.0)
    drift = spec.drift + (sign * spec.noise * 0.2 if regime == "trend" else 0.0)
    closes = np.empty(N)
    closes[0] = start_price * (1.0 + rng.normal(0.0, noise))
    last_sign = 1.0 if rng.random() < 0.5 else -1.0
    prev_ret = 0.0
    events = []
    retraces = {}
    kinds = [(i, False) for i in range(len(spec.planted))]
    kinds += [(i, True) for i, p in enumerate(spec.planted) if p.decoys]
    cum = np.cumsum([spec.planted[i].rate for i, _ in kinds])
    t = 1

    def push(ret):
        nonlocal t, last_sign, prev_ret
        closes[t] = closes[t - 1] * (1.0 + ret)
        if ret != 0:
            last_sign = np.sign(ret)
        prev_ret = ret
        t += 1

    while t < N:
        if t in retraces:
            push(retraces.pop(t))
            continue
        fired = None
        if len(kinds):
            hit = np.flatnonzero(rng.random() < cum)
            if len(hit):
                fired = kinds[int(hit[0])]
        if fired is not None:
            i, decoy = fired
            p = spec.planted[i]
            d = 1.0 if p.direction == "up" else -1.0
            jump_sign = (sign if p.sign_regime else 1.0) * np.sign(p.effect) * (-1.0 if decoy else 1.0)
            if decoy:
                # no run may lead into a decoy: step against the jump first if needed
                need = 2 + max(p.retrace_after, 0)
                lead = jump_sign
            else:
                need = p.length + 1 + p.pause + max(p.retrace_after, 0)
                lead = d
            busy = any(t <= k < t + need for k in retraces)
            if t + need <= N and not busy:
                if last_sign == lead:
                    push(-lead * (abs(rng.normal(0.0, noise)) + 1e-6))
                if not decoy:
                    for _ in range(p.length - 1):
                        push(d * (p.step + abs(rng.normal(0.0, noise))))
                    events.append((i, t - 1, int(jump_sign)))
                    for _ in range(p.pause):
                        push(-d * abs(rng.normal(0.0, noise * 0.25)) - d * 1e-6)
                jump = abs(p.effect) * jump_sign
                push(jump)
                if not decoy and p.sign_regime and rng.random() >= spec.sign_persistence:
                    sign = -sign
                if p.retrace_after > 0:
                    retraces[t - 1 + p.retrace_after] = 1.0 / (1.0 + jump) - 1.0
                continue
        if spec.background == "zigzag":
            ret = -last_sign * abs(rng.normal(0.0, noise)) + drift
        else:
            ret = drift + rng.normal(0.0, noise)
            if regime == "revert":
                ret -= 0.3 * prev_ret
        push(ret)
    return closes, events


def generate_synthetic(spec):
    """Generate ``spec.n_symbols`` x ``spec.n_days`` episodes of raw bars."""
    rng = np.random.default_rng(spec.seed)
    days = _trading_days(spec.start_date, spec.n_days)
    hh, mm = (int(x) for x in spec.open_time.split(":"))
    episodes, events, signs = [], {}, {}
    for s in range(spec.n_symbols):
        symbol = f"SYM{s:02d}"
        price = spec.base_price * float(np.exp(rng.normal(0.0, 0.2)))
        for day in days:
            regime = spec.regimes[rng.integers(len(spec.regimes))]
            sign = 1 if rng.random() < 0.5 else -1
            closes, ev = _day(spec, rng, price, regime, sign)
            N = len(closes)
            opens = np.empty(N)
            opens[0] = price
            opens[1:] = closes[:-1]
            wick = spec.noise * 0.5
            highs = np.maximum(opens, closes) * (1.0 + np.abs(rng.normal(0.0, wick, N)))
            lows = np.minimum(opens, closes) * (1.0 - np.abs(rng.normal(0.0, wick, N)))
            volume = np.maximum(1.0, np.round(rng.lognormal(np.log(1000.0), 0.5, N)))
            start = np.datetime64(f"{day}T{hh:02d}:{mm:02d}", "m")
            ts = start + np.arange(N).astype("timedelta64[m]")
            ep = Episode(symbol=symbol, date=str(day), timestamps=ts,
                         bars=np.column_stack([opens, highs, lows, closes, volume]))
            episodes.append(ep)
            events[ep.key] = ev
            signs[ep.key] = sign
            price = closes[-1]
    episodes.sort(key=lambda e: e.key)
    return SyntheticDataset(episodes, events, signs)


def regime_flip_spec(n_symbols=6, n_days=16, bars_per_day=200, seed=0):
    """Days whose hidden sign decides which way every planted jump goes.

    The planted close run has length 4 so that, with opens equal to the
    previous close, its terminal bar is exactly a three-crows bar.
    """
    return SynthSpec(
        n_symbols=n_symbols, n_days=n_days, bars_per_day=bars_per_day, noise=0.0008,
        background="zigzag", seed=seed,
        planted=(PlantedPattern("down", 4, 0.012, rate=0.05, step=0.0008,
                                sign_regime=True, decoys=True, pause=1),),
    )


def planted_signal_spec(n_symbols=6, n_days=16, bars_per_day=200, seed=0):
    """A down-run precedes an up-jump; unsignaled down-jumps balance the level."""
    return SynthSpec(
        n_symbols=n_symbols, n_days=n_days, bars_per_day=bars_per_day, noise=0.0008,
        background="zigzag", seed=seed,
        planted=(PlantedPattern("down", 3, 0.012, rate=0.05, step=0.0008, decoys=True, pause=1),),
    )
