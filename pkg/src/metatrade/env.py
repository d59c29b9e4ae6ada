"""Intraday environment: act only when flat, get paid when the position exits."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

BUY, SELL, HOLD = 1, -1, 0
ACTIONS = (BUY, SELL, HOLD)


@dataclass(frozen=True)
class ExitRule:
    stop_loss_frac: float = 0.01
    target_frac: float = 0.01
    cost: float = 0.0

    def __post_init__(self):
        if not (self.stop_loss_frac > 0 and self.target_frac > 0):
            raise ValueError("stop_loss_frac and target_frac must be positive")
        if self.cost < 0:
            raise ValueError("cost must be non-negative")


@dataclass(frozen=True)
class Transition:
    observation: np.ndarray
    action: int
    reward: float
    prev_action: int
    prev_reward: float
    t: int
    done: bool


@dataclass(frozen=True)
class Order:
    t: int
    action: int
    entry_price: float
    exit_t: int
    exit_price: float
    reward: float


def exit_scan(close, t, direction, rule):
    """Walk forward from entry bar ``t`` until stop/target or the last bar.

    Returns ``(exit_index, reward)``.  Only closes trigger exits.
    """
    entry = close[t]
    last = len(close) - 1
    if direction == BUY:
        up, down = rule.target_frac, rule.stop_loss_frac
    else:
        up, down = rule.stop_loss_frac, rule.target_frac
    for k in range(t + 1, last + 1):
        move = (close[k] - entry) / entry
        if move >= up or move <= -down:
            return k, direction * move - rule.cost
    move = (close[last] - entry) / entry
    return last, direction * move - rule.cost


class TradingEnv:
    """One symbol-day at a time.

    Observations are rows of ``episode.features``; P&L uses
    ``episode.raw_close``.  After an order the clock jumps to the exit bar,
    whose row is returned together with the order's reward.
    """

    def __init__(self, episode=None, exit_rule=None):
        self.exit_rule = exit_rule or ExitRule()
        self.episode = None
        self.orders = []
        self.done = True
        if episode is not None:
            self.reset(episode)

    def reset(self, episode=None, exit_rule=None):
        if episode is not None:
            self.episode = episode
        if exit_rule is not None:
            self.exit_rule = exit_rule
        if self.episode is None:
            raise ValueError("reset: no episode")
        feats = self.episode.features
        if len(feats) < 2:
            raise ValueError(f"reset: episode {self.episode.key} has {len(feats)} rows, need at least 2")
        self.obs = feats
        self.close = self.episode.raw_close
        if len(self.close) != len(feats):
            raise ValueError("reset: feature rows and raw closes are misaligned")
        self.t = 0
        self.last = len(feats) - 1
        self.done = False
        self.prev_action = HOLD
        self.prev_reward = 0.0
        self.orders = []
        return self.obs[0]

    @property
    def observation(self):
        return self.obs[self.t]

    def step(self, action):
        if self.done:
            raise RuntimeError("step called after episode end")
        if action not in ACTIONS:
            raise ValueError(f"invalid action {action!r}")
        if action == HOLD:
            self.t += 1
            reward = 0.0
        else:
            exit_t, reward = exit_scan(self.close, self.t, action, self.exit_rule)
            self.orders.append(Order(self.t, action, float(self.close[self.t]), exit_t,
                                     float(self.close[exit_t]), reward))
            self.t = exit_t
        self.done = self.t >= self.last
        self.prev_action, self.prev_reward = action, reward
        return self.obs[self.t], reward, self.done

    def run(self, actions):
        """Replay a fixed action sequence; returns the transitions."""
        self.reset()
        out = []
        for a in actions:
            if self.done:
                break
            prev_a, prev_r, t = self.prev_action, self.prev_reward, self.t
            obs = self.observation
            _, r, done = self.step(a)
            out.append(Transition(obs, a, r, prev_a, prev_r, t, done))
        return out

    def write_trace(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "action", "entry_price", "exit_t", "exit_price", "reward"])
            for o in self.orders:
                w.writerow([o.t, o.action, repr(o.entry_price), o.exit_t, repr(o.exit_price), repr(o.reward)])
