"""LSTM actor-critic with optional RL^2 feedback inputs."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import numcore as nc
from .env import BUY, HOLD, SELL

# Policy output order; HOLD last so greedy ties can prefer it explicitly.
ACTION_ORDER = (BUY, SELL, HOLD)
ACTION_INDEX = {a: i for i, a in enumerate(ACTION_ORDER)}
HOLD_INDEX = ACTION_INDEX[HOLD]
N_ACTIONS = 3
FEEDBACK_DIM = N_ACTIONS + 1

MODES = ("vanilla", "rl2")
FEATURE_SETS = ("base", "handcrafted", "learned", "both")


@dataclass(frozen=True)
class AgentConfig:
    mode: str = "rl2"
    obs_dim: int = 20
    hidden_dim: int = 64
    feature_set: str = "base"
    reward_scale: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.feature_set not in FEATURE_SETS:
            raise ValueError(f"feature_set must be one of {FEATURE_SETS}, got {self.feature_set!r}")

    @property
    def input_dim(self):
        return self.obs_dim + (FEEDBACK_DIM if self.mode == "rl2" else 0)


class PolicyOutput(NamedTuple):
    probs: np.ndarray
    value: np.ndarray


class Hidden(NamedTuple):
    h: np.ndarray
    c: np.ndarray


class LSTMPolicy:
    """Single-layer LSTM trunk shared by a softmax policy head and a value head.

    All methods take batches: observations are (B, obs_dim).
    """

    def __init__(self, config, random_state=None, head_scale=0.01):
        self.config = config
        rng = np.random.default_rng(random_state)
        H = config.hidden_dim
        self.params = nc.init_lstm_params(config.input_dim, H, rng)
        self.params["pi_w"] = nc.parameter(rng.normal(0.0, head_scale, size=(H, N_ACTIONS)))
        self.params["pi_b"] = nc.parameter(np.zeros(N_ACTIONS))
        self.params["v_w"] = nc.parameter(rng.normal(0.0, head_scale, size=(H, 1)))
        self.params["v_b"] = nc.parameter(np.zeros(1))
        self.obs_mean = np.zeros(config.obs_dim)
        self.obs_std = np.ones(config.obs_dim)

    def fit_scaler(self, rows):
        """Standardize observations with statistics of ``rows`` (N, obs_dim)."""
        rows = np.asarray(rows, dtype=np.float64)
        self.obs_mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        self.obs_std = np.where(std > 1e-12, std, 1.0)

    def initial_hidden(self, batch=1):
        H = self.config.hidden_dim
        return Hidden(np.zeros((batch, H)), np.zeros((batch, H)))

    def encode(self, obs, prev_action, prev_reward):
        """Network input rows.  ``prev_action`` holds env actions (+1/-1/0)."""
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        if obs.shape[1] != self.config.obs_dim:
            raise nc.ShapeError(f"observation width {obs.shape[1]} != obs_dim {self.config.obs_dim}")
        x = (obs - self.obs_mean) / self.obs_std
        if self.config.mode == "vanilla":
            return x
        fb = np.zeros((len(x), FEEDBACK_DIM))
        idx = [ACTION_INDEX[int(a)] for a in np.atleast_1d(prev_action)]
        fb[np.arange(len(x)), idx] = 1.0
        fb[:, N_ACTIONS] = np.atleast_1d(prev_reward) * self.config.reward_scale
        return np.hstack([x, fb])

    def cell(self, x, h, c):
        return nc.lstm_cell(x, h, c, self.params)

    def heads(self, h):
        p = self.params
        probs = nc.softmax(nc.add(nc.matmul(h, p["pi_w"]), p["pi_b"]), axis=-1)
        value = nc.add(nc.matmul(h, p["v_w"]), p["v_b"])
        return probs, value

    def act(self, obs, prev_action, prev_reward, hidden):
        """One recurrent step; returns (PolicyOutput, new Hidden)."""
        x = self.encode(obs, prev_action, prev_reward)
        return self.step_encoded(x, hidden)

    def step_encoded(self, x, hidden):
        with nc.no_grad():
            h, c = self.cell(x, hidden.h, hidden.c)
            probs, value = self.heads(h)
        return PolicyOutput(probs.data, value.data[:, 0]), Hidden(h.data, c.data)

    def unroll(self, inputs, resets):
        """Differentiable replay of (T, B, D) inputs from a zero state.

        ``resets[t, b] == 1`` zeroes the state of row b before step t.
        Returns probability (T*B, 3) and value (T*B,) tensors.
        """
        T, B, _ = inputs.shape
        hidden = self.initial_hidden(B)
        h, c = nc.Tensor(hidden.h), nc.Tensor(hidden.c)
        hs = []
        for t in range(T):
            if resets[t].any():
                keep = np.repeat((1.0 - resets[t])[:, None], self.config.hidden_dim, axis=1)
                h, c = nc.mul(h, keep), nc.mul(c, keep)
            h, c = self.cell(inputs[t], h, c)
            hs.append(h)
        flat = nc.reshape(nc.stack(hs, axis=0), (T * B, self.config.hidden_dim))
        probs, value = self.heads(flat)
        return probs, nc.reshape(value, (T * B,))

    # ---------------------------------------------------------------- io

    def state_arrays(self):
        out = {k: v.data for k, v in self.params.items()}
        out["obs_mean"] = self.obs_mean
        out["obs_std"] = self.obs_std
        return out

    def save(self, path):
        nc.save_params(path, self.state_arrays(), meta={"agent_config": dataclasses.asdict(self.config)})

    @classmethod
    def load(cls, path):
        arrays, meta = nc.load_params(path)
        policy = cls(AgentConfig(**meta["agent_config"]))
        for k in policy.params:
            policy.params[k].data = arrays[k]
        policy.obs_mean, policy.obs_std = arrays["obs_mean"], arrays["obs_std"]
        return policy

    def config_json(self):
        return json.dumps(dataclasses.asdict(self.config), sort_keys=True)


def greedy_action(probs):
    """Argmax action index per row; exact ties go to HOLD."""
    probs = np.atleast_2d(probs)
    best = probs.max(axis=1)
    idx = probs.argmax(axis=1)
    return np.where(probs[:, HOLD_INDEX] == best, HOLD_INDEX, idx)


def sample_action(probs, rng):
    """Categorical draw per row (inverse-CDF with one uniform per row)."""
    probs = np.atleast_2d(probs)
    u = rng.random(len(probs))
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((u[:, None] > cdf).sum(axis=1), N_ACTIONS - 1)
