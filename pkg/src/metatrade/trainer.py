"""Recurrent PPO over trials of trading days.

A trial is a short sequence of tasks (episodes) played by one agent.  In
``rl2`` mode the LSTM state carries over between the tasks of a trial and
the previous action/reward are part of the input; in ``vanilla`` mode the
state is reset at every task and there is no feedback input.  Everything
else, including the update, is the same code path.
"""

from __future__ import annotations

import copy
import csv
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import numcore as nc
from .agent import (
    ACTION_INDEX, ACTION_ORDER, HOLD_INDEX, N_ACTIONS, AgentConfig, Hidden, LSTMPolicy,
    greedy_action, sample_action,
)
from .env import ExitRule, TradingEnv

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PpoHyper:
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    epochs: int = 4
    lr: float = 3e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    iterations: int = 100
    trials_per_iteration: int = 16
    tasks_per_trial: int = 2
    max_grad_norm: float | None = None

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip must be in (0, 1)")
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ValueError("gamma and lam must be in [0, 1]")


class TrainingError(RuntimeError):
    pass


@dataclass
class RolloutBuffer:
    """Padded (T, B) arrays; column b is trial b, ``valid`` marks real steps.

    ``resets[t, b]`` is 1 where the recurrent state was zeroed before step t
    (task starts in vanilla mode).  Every trial starts from the zero state,
    which is the stored hidden checkpoint for full-sequence replay.
    """

    inputs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    resets: np.ndarray
    valid: np.ndarray
    prev_actions: np.ndarray
    prev_rewards: np.ndarray

    @property
    def n_steps(self):
        return int(self.valid.sum())

    def trial_returns(self):
        return (self.rewards * self.valid).sum(axis=0)


def gae(rewards, values, dones, gamma, lam):
    """Generalized advantage estimates and returns for one flat sequence.

    The value after a done step (and after the final step) is taken as 0.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    n = len(rewards)
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        next_value = values[t + 1] if t + 1 < n else 0.0
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
    return adv, adv + values


def _trial_gae(buf, gamma, lam):
    adv = np.zeros_like(buf.rewards)
    ret = np.zeros_like(buf.rewards)
    for b in range(buf.rewards.shape[1]):
        n = int(buf.valid[:, b].sum())
        a, r = gae(buf.rewards[:n, b], buf.values[:n, b], buf.dones[:n, b], gamma, lam)
        adv[:n, b], ret[:n, b] = a, r
    return adv, ret


def collect(policy, trials, exit_rule=None, rng=None, greedy=False, envs=None):
    """Play every trial in lockstep as one batch and record the steps.

    ``trials`` is a list of task lists.  Tasks are either episodes (played
    in a :class:`TradingEnv` with ``exit_rule``) or objects with
    ``reset()``/``step(action)`` that behave like one.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    rl2 = policy.config.mode == "rl2"
    B = len(trials)
    D = policy.config.input_dim
    envs = []
    for trial in trials:
        envs.append(_make_env(trial[0], exit_rule, envs))
    task_pos = [0] * B
    obs = [e.reset() for e in envs]
    prev_a = [0] * B
    prev_r = [0.0] * B
    active = np.ones(B, dtype=bool)
    starting = np.ones(B, dtype=bool)
    h, c = policy.initial_hidden(B)
    cols = {k: [] for k in ("inputs", "actions", "logp", "values", "rewards", "dones",
                            "resets", "valid", "prev_actions", "prev_rewards")}
    zero_obs = np.zeros(policy.config.obs_dim)
    while active.any():
        obs_rows = np.array([obs[b] if active[b] else zero_obs for b in range(B)])
        x = policy.encode(obs_rows, prev_a, prev_r)
        x[~active] = 0.0
        resets = (starting & active).astype(np.float64) if not rl2 else np.zeros(B)
        if resets.any():
            keep = np.repeat((1.0 - resets)[:, None], h.shape[1], axis=1)
            with nc.no_grad():
                h = nc.mul(nc.Tensor(h), keep).data
                c = nc.mul(nc.Tensor(c), keep).data
        out, (h, c) = policy.step_encoded(x, Hidden(h, c))
        idx = greedy_action(out.probs) if greedy else sample_action(out.probs, rng)
        idx = np.where(active, idx, HOLD_INDEX)
        logp = np.log(out.probs[np.arange(B), idx])
        rewards = np.zeros(B)
        dones = np.zeros(B)
        starting[:] = False
        cols["prev_actions"].append(np.array(prev_a))
        cols["prev_rewards"].append(np.array(prev_r))
        for b in np.flatnonzero(active):
            action = ACTION_ORDER[idx[b]]
            ob, r, done = envs[b].step(action)
            rewards[b] = r
            prev_a[b], prev_r[b] = action, r
            obs[b] = ob
            if done:
                dones[b] = 1.0
                task_pos[b] += 1
                if task_pos[b] < len(trials[b]):
                    envs[b] = _make_env(trials[b][task_pos[b]], exit_rule, envs)
                    obs[b] = envs[b].reset()
                    prev_a[b], prev_r[b] = 0, 0.0
                    starting[b] = True
        cols["inputs"].append(x)
        cols["actions"].append(idx)
        cols["logp"].append(np.where(active, logp, 0.0))
        cols["values"].append(np.where(active, out.value, 0.0))
        cols["rewards"].append(rewards)
        cols["dones"].append(dones)
        cols["resets"].append(resets)
        cols["valid"].append(active.astype(np.float64))
        active = active & ~((dones == 1.0) & np.array([task_pos[b] >= len(trials[b]) for b in range(B)]))
    return RolloutBuffer(**{k: np.array(v) for k, v in cols.items()})


def _make_env(task, exit_rule, in_use=()):
    if hasattr(task, "step") and hasattr(task, "reset"):
        # the same env object may be drawn by several trials of one batch
        return copy.copy(task) if any(task is e for e in in_use) else task
    return TradingEnv(task, exit_rule)


def ppo_loss(policy, buf, advantages, returns, hyper):
    """Build the clipped-surrogate loss on a fresh tape.

    Returns ``(tape, loss, stats)``.
    """
    T, B = buf.actions.shape
    valid = buf.valid.reshape(-1)
    n = valid.sum()
    onehot = np.zeros((T * B, N_ACTIONS))
    onehot[np.arange(T * B), buf.actions.reshape(-1)] = 1.0
    adv = advantages.reshape(-1)
    old_logp = buf.logp.reshape(-1)
    with nc.Tape() as tape:
        probs, values = policy.unroll(buf.inputs, buf.resets)
        logp = nc.log(nc.sum_(nc.mul(probs, onehot), axis=1))
        ratio = nc.exp(nc.sub(logp, old_logp))
        r = ratio.data
        clipped = np.clip(r, 1.0 - hyper.clip, 1.0 + hyper.clip)
        use_raw = r * adv <= clipped * adv
        # min(r*A, clip(r)*A): gradient flows only through the unclipped branch
        surr = nc.add(nc.mul(ratio, adv * use_raw * valid), clipped * adv * ~use_raw * valid)
        policy_loss = nc.mul(nc.sum_(surr), -1.0 / n)
        err = nc.sub(values, returns.reshape(-1))
        value_loss = nc.mul(nc.sum_(nc.mul(nc.mul(err, err), valid)), 1.0 / n)
        ent_rows = nc.mul(nc.sum_(nc.mul(probs, nc.log(probs)), axis=1), -1.0)
        entropy = nc.mul(nc.sum_(nc.mul(ent_rows, valid)), 1.0 / n)
        loss = nc.sub(
            nc.add(policy_loss, nc.mul(value_loss, hyper.value_coef)),
            nc.mul(entropy, hyper.entropy_coef),
        )
    stats = {
        "policy_loss": float(policy_loss.data),
        "value_loss": float(value_loss.data),
        "entropy": float(entropy.data),
        "clip_fraction": float(((np.abs(r - 1.0) > hyper.clip) * valid).sum() / n),
        "loss": float(loss.data),
    }
    return tape, loss, stats


def normalize_advantages(adv, valid):
    v = valid.astype(bool)
    mu = adv[v].mean()
    sd = adv[v].std()
    out = (adv - mu) / (sd if sd >= 1e-8 else 1.0)
    return np.where(v, out, 0.0)


def ppo_update(policy, optimizer, buf, hyper):
    """Full-batch PPO epochs on one buffer; returns the last epoch's stats."""
    if buf.n_steps == 0:
        raise TrainingError("empty rollout buffer")
    adv, ret = _trial_gae(buf, hyper.gamma, hyper.lam)
    adv = normalize_advantages(adv, buf.valid)
    stats = {}
    for _ in range(hyper.epochs):
        tape, loss, stats = ppo_loss(policy, buf, adv, ret, hyper)
        if not np.isfinite(stats["loss"]):
            log.warning("non-finite PPO loss, skipping update: %s", stats)
            stats["aborted"] = True
            return stats
        grads = tape.backward(loss)
        named = {k: grads.get(p, np.zeros_like(p.data)) for k, p in policy.params.items()}
        for p in policy.params.values():
            p.grad = None
        if hyper.max_grad_norm:
            norm = np.sqrt(sum(float((g * g).sum()) for g in named.values()))
            if norm > hyper.max_grad_norm:
                named = {k: g * (hyper.max_grad_norm / norm) for k, g in named.items()}
        optimizer.step(named)
    return stats


def sample_trials(pool, hyper, rng):
    """``trials_per_iteration`` trials of ``tasks_per_trial`` random tasks."""
    idx = rng.integers(len(pool), size=(hyper.trials_per_iteration, hyper.tasks_per_trial))
    return [[pool[i] for i in row] for row in idx]


def train(policy, pool, hyper, exit_rule=None, random_state=None, log_path=None, callback=None,
          checkpoint_every=0, checkpoint_dir=None):
    """Run PPO iterations on tasks drawn from ``pool``; returns per-iteration stats.

    With ``checkpoint_every`` > 0 the policy is saved to
    ``checkpoint_dir/policy_<iteration>.bin`` after every that many iterations.
    """
    if not pool:
        raise TrainingError("empty training pool")
    rng = np.random.default_rng(random_state)
    opt = nc.Adam(policy.params, lr=hyper.lr)
    history = []
    for it in range(hyper.iterations):
        trials = sample_trials(pool, hyper, rng)
        buf = collect(policy, trials, exit_rule, rng)
        stats = ppo_update(policy, opt, buf, hyper)
        stats = {"iteration": it, "mean_trial_return": float(buf.trial_returns().mean()), **stats}
        history.append(stats)
        if callback is not None:
            callback(stats)
        if checkpoint_every and checkpoint_dir is not None and (it + 1) % checkpoint_every == 0:
            os.makedirs(checkpoint_dir, exist_ok=True)
            policy.save(os.path.join(checkpoint_dir, f"policy_{it + 1:06d}.bin"))
    if log_path is not None:
        write_training_log(log_path, history)
    return history


LOG_FIELDS = ("iteration", "mean_trial_return", "policy_loss", "value_loss", "entropy", "clip_fraction")


def write_training_log(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for row in history:
            w.writerow([row.get(k, "") for k in LOG_FIELDS])


def evaluate(policy, episode, exit_rule=None):
    """Greedy pass over one day from a fresh state; returns (total reward, env)."""
    env = TradingEnv(episode, exit_rule)
    collect(policy, [[env]], greedy=True)
    return float(sum(o.reward for o in env.orders)), env


class RecurrentPPOAgent(BaseEstimator):
    """Estimator wrapper: ``fit`` trains on a list of episodes, ``score_day``
    plays one day greedily.

    ``mode="vanilla"`` drops the feedback inputs and resets state per task.
    """

    def __init__(self, mode="rl2", hidden_dim=64, clip=0.2, gamma=0.99, lam=0.95, epochs=4,
                 lr=3e-4, value_coef=0.5, entropy_coef=0.01, iterations=100,
                 trials_per_iteration=16, tasks_per_trial=2, max_grad_norm=None,
                 reward_scale=1.0, stop_loss_frac=0.01, target_frac=0.01, cost=0.0,
                 feature_set="base", random_state=None):
        self.mode = mode
        self.hidden_dim = hidden_dim
        self.clip = clip
        self.gamma = gamma
        self.lam = lam
        self.epochs = epochs
        self.lr = lr
        self.value_coef = value_coef
        self.entropy_coef = entropy_coef
        self.iterations = iterations
        self.trials_per_iteration = trials_per_iteration
        self.tasks_per_trial = tasks_per_trial
        self.max_grad_norm = max_grad_norm
        self.reward_scale = reward_scale
        self.stop_loss_frac = stop_loss_frac
        self.target_frac = target_frac
        self.cost = cost
        self.feature_set = feature_set
        self.random_state = random_state

    @property
    def hyper(self):
        return PpoHyper(
            clip=self.clip, gamma=self.gamma, lam=self.lam, epochs=self.epochs, lr=self.lr,
            value_coef=self.value_coef, entropy_coef=self.entropy_coef,
            iterations=self.iterations, trials_per_iteration=self.trials_per_iteration,
            tasks_per_trial=self.tasks_per_trial, max_grad_norm=self.max_grad_norm,
        )

    @property
    def exit_rule(self):
        return ExitRule(self.stop_loss_frac, self.target_frac, self.cost)

    def fit(self, episodes, y=None, log_path=None, checkpoint_every=0, checkpoint_dir=None):
        episodes = list(episodes)
        if not episodes:
            raise TrainingError("no training episodes")
        seeds = np.random.SeedSequence(self.random_state).spawn(2)
        config = AgentConfig(
            mode=self.mode, obs_dim=episodes[0].features.shape[1], hidden_dim=self.hidden_dim,
            feature_set=self.feature_set, reward_scale=self.reward_scale,
        )
        self.policy_ = LSTMPolicy(config, random_state=seeds[0])
        self.policy_.fit_scaler(np.vstack([ep.features for ep in episodes]))
        self.history_ = train(self.policy_, episodes, self.hyper, self.exit_rule,
                              random_state=seeds[1], log_path=log_path,
                              checkpoint_every=checkpoint_every, checkpoint_dir=checkpoint_dir)
        return self

    def score_day(self, episode):
        return evaluate(self.policy_, episode, self.exit_rule)[0]

    def predict(self, episode):
        """Greedy orders placed on ``episode`` as (t, action) pairs."""
        _, env = evaluate(self.policy_, episode, self.exit_rule)
        return [(o.t, o.action) for o in env.orders]

    def hyper_dict(self):
        return asdict(self.hyper)


__all__ = [
    "PpoHyper", "RolloutBuffer", "gae", "collect", "ppo_loss", "ppo_update", "train",
    "evaluate", "RecurrentPPOAgent", "ACTION_INDEX", "TrainingError",
]
