import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import episode_rewards

from metatrade.env import BUY, HOLD, SELL, ExitRule, TradingEnv, exit_scan
from metatrade.ingest import Episode


def _episode(closes):
    closes = np.asarray(closes, dtype=float)
    n = len(closes)
    bars = np.column_stack([closes, closes * 1.001, closes * 0.999, closes, np.full(n, 10.0)])
    ts = np.datetime64("2024-01-02T09:30") + np.arange(n).astype("timedelta64[m]")
    return Episode("X", "2024-01-02", ts, bars)


def test_reset_observation_and_flags():
    env = TradingEnv(_episode([100, 101, 102]))
    first = env.reset()
    np.testing.assert_array_equal(first, env.episode.features[0])
    assert not env.done and env.prev_action == HOLD and env.prev_reward == 0.0
    again = env.reset()
    np.testing.assert_array_equal(first, again)


def test_one_row_episode_rejected():
    with pytest.raises(ValueError, match="at least 2"):
        TradingEnv(_episode([100]))


def test_buy_example():
    env = TradingEnv(_episode([100.0, 100.2, 99.8, 101.1, 101.5]))
    _, r, done = env.step(BUY)
    assert env.t == 3 and not done
    assert r == pytest.approx(0.011, abs=1e-12)


def test_sell_example():
    env = TradingEnv(_episode([100.0, 100.4, 101.0, 100.0]))
    _, r, _ = env.step(SELL)
    assert env.t == 2
    assert r == pytest.approx(-0.010, abs=1e-12)


def test_day_end_exit():
    env = TradingEnv(_episode([100.0, 99.0, 100.1, 100.2, 100.3]))
    env.step(HOLD)
    env.step(HOLD)
    _, r, done = env.step(BUY)  # entry at t=2, close 100.1
    assert done and env.t == 4
    assert r == pytest.approx((100.3 - 100.1) / 100.1)


def test_day_end_drift_example():
    closes = [100.0] * 5 + [100.1, 100.2, 100.3]
    env = TradingEnv(_episode(closes))
    for _ in range(4):
        env.step(HOLD)
    _, r, done = env.step(BUY)
    assert done and r == pytest.approx(0.003, abs=1e-12)


def test_do_nothing_ends_with_zero():
    env = TradingEnv(_episode(np.linspace(100, 103, 10)))
    total, steps = 0.0, 0
    while not env.done:
        _, r, _ = env.step(HOLD)
        total += r
        steps += 1
    assert total == 0.0 and steps == 9


def test_step_after_done_raises():
    env = TradingEnv(_episode([100, 100.5]))
    env.step(HOLD)
    with pytest.raises(RuntimeError):
        env.step(HOLD)


def test_invalid_action():
    env = TradingEnv(_episode([100, 100.5, 101]))
    with pytest.raises(ValueError):
        env.step(2)


def test_cost_is_subtracted():
    rule = ExitRule(0.01, 0.01, cost=0.001)
    assert exit_scan(np.array([100.0, 102.0]), 0, BUY, rule)[1] == pytest.approx(0.019)


def test_asymmetric_thresholds():
    rule = ExitRule(stop_loss_frac=0.005, target_frac=0.02)
    close = np.array([100.0, 101.0, 99.4, 103.0])
    assert exit_scan(close, 0, BUY, rule)[0] == 2  # stop hit first
    assert exit_scan(close, 0, SELL, rule)[0] == 1  # +1% is beyond a short's 0.5% stop


def test_exit_rule_validation():
    with pytest.raises(ValueError):
        ExitRule(stop_loss_frac=0.0)


def test_orders_and_trace(tmp_path):
    env = TradingEnv(_episode([100, 102, 101, 99, 100]))
    env.step(BUY)
    env.step(SELL)
    assert [(o.t, o.action, o.exit_t) for o in env.orders] == [(0, BUY, 1), (1, SELL, 3)]
    path = tmp_path / "trace.csv"
    env.write_trace(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,action,entry_price,exit_t,exit_price,reward" and len(lines) == 3


def test_run_records_feedback():
    env = TradingEnv(_episode([100, 102, 101, 99, 100]))
    trans = env.run([BUY, HOLD, SELL, HOLD])
    assert trans[1].prev_action == BUY and trans[1].prev_reward == pytest.approx(0.02)
    assert trans[-1].done


@settings(max_examples=200, deadline=None)
@given(
    steps=st.lists(st.floats(-0.015, 0.015, allow_nan=False), min_size=1, max_size=40),
    actions=st.lists(st.sampled_from([BUY, SELL, HOLD]), min_size=1, max_size=60),
    stop=st.sampled_from([0.005, 0.01, 0.02]),
    target=st.sampled_from([0.005, 0.01, 0.02]),
)
def test_env_matches_oracle(steps, actions, stop, target):
    closes = 100.0 * np.cumprod(1.0 + np.array([0.0] + steps))
    env = TradingEnv(_episode(closes), ExitRule(stop, target))
    got = []
    for a in actions:
        if env.done:
            break
        got.append(env.step(a)[1])
    assert got == episode_rewards(closes, actions, stop, target)
