import csv

import numpy as np
import pytest
from oracles import gae_double_loop

from metatrade import numcore as nc
from metatrade.agent import ACTION_INDEX, AgentConfig, LSTMPolicy, greedy_action
from metatrade.env import BUY, HOLD, SELL
from metatrade.trainer import (
    LOG_FIELDS, PpoHyper, RecurrentPPOAgent, _trial_gae, collect, gae, normalize_advantages,
    ppo_loss, ppo_update, train,
)


class Countdown:
    """Env-like task: ``n`` steps, reward ``pay[action]``, observation = step index."""

    def __init__(self, n, pay=None, obs_dim=2):
        self.n, self.obs_dim = n, obs_dim
        self.pay = pay or {BUY: 0.01, SELL: -0.01, HOLD: 0.0}

    def reset(self):
        self.t = 0
        return self._obs()

    def _obs(self):
        return np.full(self.obs_dim, float(self.t))

    def step(self, action):
        self.t += 1
        return self._obs(), self.pay[action], self.t >= self.n


def _policy(mode="vanilla", obs_dim=2, hidden=6, seed=0, head_scale=0.3):
    return LSTMPolicy(AgentConfig(mode=mode, obs_dim=obs_dim, hidden_dim=hidden), random_state=seed,
                      head_scale=head_scale)


# ---------------------------------------------------------------- GAE


def test_gae_telescoping_identity():
    r = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    d = np.array([0, 0, 1, 0, 1.0])
    adv, ret = gae(r, np.zeros(5), d, 1.0, 1.0)
    np.testing.assert_allclose(adv, [6, 5, 3, 9, 5])
    np.testing.assert_allclose(ret, adv)


def test_gae_single_terminal_step():
    adv, ret = gae([0.3], [0.1], [1], 0.99, 0.95)
    assert adv[0] == pytest.approx(0.2) and ret[0] == pytest.approx(0.3)


@pytest.mark.parametrize("seed", range(25))
def test_gae_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(10, 51))
    r, v = rng.normal(size=n), rng.normal(size=n)
    d = (rng.random(n) < 0.15).astype(float)
    d[-1] = 1.0
    gamma, lam = rng.uniform(0.8, 1.0), rng.uniform(0.5, 1.0)
    adv, ret = gae(r, v, d, gamma, lam)
    ref_adv, ref_ret = gae_double_loop(r, v, d, gamma, lam)
    assert np.max(np.abs(adv - ref_adv)) < 1e-12
    assert np.max(np.abs(ret - ref_ret)) < 1e-12


def test_normalize_advantages_guards_zero_std():
    out = normalize_advantages(np.full((3, 2), 5.0), np.ones((3, 2)))
    np.testing.assert_array_equal(out, 0.0)
    out = normalize_advantages(np.array([[1.0], [3.0], [99.0]]), np.array([[1.0], [1.0], [0.0]]))
    np.testing.assert_allclose(out[:, 0], [-1, 1, 0])


# ---------------------------------------------------------------- collect


def test_two_task_trial_bookkeeping():
    pol = _policy()
    buf = collect(pol, [[Countdown(3), Countdown(4)]], rng=np.random.default_rng(0))
    assert buf.n_steps == 7
    np.testing.assert_array_equal(buf.dones[:, 0], [0, 0, 1, 0, 0, 0, 1])
    np.testing.assert_array_equal(buf.resets[:, 0], [1, 0, 0, 1, 0, 0, 0])


def test_rl2_keeps_state_across_tasks():
    pol = _policy(mode="rl2")
    buf = collect(pol, [[Countdown(3), Countdown(4)]], rng=np.random.default_rng(0))
    assert buf.resets.sum() == 0
    # feedback inputs are reset at the task boundary
    np.testing.assert_array_equal(buf.prev_actions[3], [HOLD])


def test_padding_for_uneven_trials():
    pol = _policy()
    buf = collect(pol, [[Countdown(2)], [Countdown(5)]], rng=np.random.default_rng(0))
    np.testing.assert_array_equal(buf.valid.sum(axis=0), [2, 5])
    assert buf.rewards[2:, 0].sum() == 0


def test_all_hold_gives_zero_rewards_and_advantages():
    pol = _policy()
    pol.params["pi_b"].data = np.array([-50.0, -50.0, 50.0])
    pol.params["v_w"].data[:] = 0.0
    pol.params["v_b"].data[:] = 0.0
    buf = collect(pol, [[Countdown(4)], [Countdown(3)]], rng=np.random.default_rng(0))
    assert (buf.actions[buf.valid == 1] == ACTION_INDEX[HOLD]).all()
    adv, _ = _trial_gae(buf, 0.99, 0.95)
    np.testing.assert_array_equal(buf.rewards, 0.0)
    np.testing.assert_array_equal(adv, 0.0)


def test_collection_is_deterministic(prepared):
    pol = _policy(obs_dim=20)
    a = collect(pol, [[prepared[0], prepared[1]], [prepared[2]]], rng=np.random.default_rng(7))
    b = collect(pol, [[prepared[0], prepared[1]], [prepared[2]]], rng=np.random.default_rng(7))
    for field in ("inputs", "actions", "logp", "rewards", "dones"):
        assert getattr(a, field).tobytes() == getattr(b, field).tobytes()


def test_same_task_twice_in_one_batch():
    task = Countdown(3)
    buf = collect(_policy(), [[task], [task]], rng=np.random.default_rng(0))
    np.testing.assert_array_equal(buf.valid.sum(axis=0), [3, 3])


# ---------------------------------------------------------------- loss


def _buffer_and_targets(seed=0):
    pol = _policy(seed=seed)
    buf = collect(pol, [[Countdown(4)], [Countdown(3), Countdown(2)]], rng=np.random.default_rng(seed))
    adv, ret = _trial_gae(buf, 0.99, 0.95)
    adv = normalize_advantages(adv, buf.valid) + 0.0
    return pol, buf, adv, ret


def test_ratio_one_surrogate_is_mean_advantage():
    pol, buf, adv, ret = _buffer_and_targets()
    _, _, stats = ppo_loss(pol, buf, adv, ret, PpoHyper())
    n = buf.valid.sum()
    assert stats["policy_loss"] == pytest.approx(-(adv * buf.valid).sum() / n, abs=1e-12)
    assert stats["clip_fraction"] == 0.0


def test_ratio_two_is_clipped_for_positive_advantages():
    pol, buf, _, ret = _buffer_and_targets()
    adv = buf.valid * 1.0
    buf.logp = buf.logp - np.log(2.0)
    _, _, stats = ppo_loss(pol, buf, adv, ret, PpoHyper(clip=0.2))
    assert stats["policy_loss"] == pytest.approx(-1.2, abs=1e-12)
    assert stats["clip_fraction"] == 1.0


def test_unclipped_gradient_equals_policy_gradient():
    pol, buf, adv, ret = _buffer_and_targets(seed=3)
    hyper = PpoHyper(clip=0.999, value_coef=0.0, entropy_coef=0.0)
    tape, loss, _ = ppo_loss(pol, buf, adv, ret, hyper)
    grads = tape.backward(loss)
    n = buf.valid.sum()
    T, B = buf.actions.shape

    def pg_objective():
        with nc.no_grad():
            probs, _ = pol.unroll(buf.inputs, buf.resets)
        p = probs.data[np.arange(T * B), buf.actions.reshape(-1)]
        return -(adv.reshape(-1) * np.log(p) * buf.valid.reshape(-1)).sum() / n

    w = pol.params["lstm_w"]
    g = grads[w]
    h = 1e-6
    for idx in [(0, 0), (1, 3), (4, 7), (6, 20)]:
        orig = w.data[idx]
        w.data[idx] = orig + h
        up = pg_objective()
        w.data[idx] = orig - h
        down = pg_objective()
        w.data[idx] = orig
        assert g[idx] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-10)


def test_no_leak_across_task_boundary_in_vanilla():
    pol = _policy(seed=4)
    buf = collect(pol, [[Countdown(3), Countdown(3)]], rng=np.random.default_rng(4))
    adv1, _ = _trial_gae(buf, 0.99, 0.95)
    buf.rewards[3:] = 0.0
    adv2, _ = _trial_gae(buf, 0.99, 0.95)
    np.testing.assert_array_equal(adv1[:3], adv2[:3])
    # task-2 outputs do not depend on task-1 inputs
    p1, _ = pol.unroll(buf.inputs, buf.resets)
    noisy = buf.inputs.copy()
    noisy[:3] += 5.0
    p2, _ = pol.unroll(noisy, buf.resets)
    np.testing.assert_array_equal(p1.data[3:], p2.data[3:])


def test_non_finite_loss_aborts():
    pol, buf, _, _ = _buffer_and_targets()
    pol.params["pi_w"].data[:] = np.nan
    before = pol.params["lstm_w"].data.copy()
    stats = ppo_update(pol, nc.Adam(pol.params), buf, PpoHyper())
    assert stats["aborted"]
    np.testing.assert_array_equal(pol.params["lstm_w"].data, before)


def test_hyper_validation():
    with pytest.raises(ValueError):
        PpoHyper(clip=1.5)
    with pytest.raises(ValueError):
        PpoHyper(gamma=1.1)


# ---------------------------------------------------------------- training


def test_two_armed_bandit_converges():
    hyper = PpoHyper(iterations=200)
    wins = 0
    for seed in range(20):
        pol = LSTMPolicy(AgentConfig(mode="vanilla", obs_dim=1, hidden_dim=16), random_state=seed)
        pool = [Countdown(1, obs_dim=1)]
        train(pol, pool, hyper, random_state=seed)
        out, _ = pol.act(np.zeros((1, 1)), [HOLD], [0.0], pol.initial_hidden(1))
        wins += int(greedy_action(out.probs)[0] == ACTION_INDEX[BUY])
    assert wins >= 19


def test_training_log_and_checkpoints(tmp_path, prepared):
    pol = _policy(obs_dim=20)
    log_path = tmp_path / "log.csv"
    hist = train(pol, prepared, PpoHyper(iterations=4, trials_per_iteration=2), random_state=0,
                 log_path=log_path, checkpoint_every=2, checkpoint_dir=tmp_path / "ck")
    assert len(hist) == 4
    with open(log_path) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == LOG_FIELDS and len(rows) == 5
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["policy_000002.bin", "policy_000004.bin"]


def test_agent_estimator_is_deterministic(prepared):
    kw = dict(mode="rl2", hidden_dim=8, iterations=3, trials_per_iteration=2, random_state=5)
    a = RecurrentPPOAgent(**kw).fit(prepared)
    b = RecurrentPPOAgent(**kw).fit(prepared)
    for k, v in a.policy_.state_arrays().items():
        assert v.tobytes() == b.policy_.state_arrays()[k].tobytes()
    assert a.predict(prepared[0]) == b.predict(prepared[0])
    assert isinstance(a.score_day(prepared[0]), float)
    assert RecurrentPPOAgent(lr=0.1).get_params()["lr"] == 0.1
