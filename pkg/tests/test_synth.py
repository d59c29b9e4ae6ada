import numpy as np

from metatrade import ingest, synth
from metatrade.miner import FactBase, mine


def test_pure_drift_is_monotone_and_fully_supported():
    spec = synth.SynthSpec(n_symbols=1, n_days=1, bars_per_day=80, noise=0.0, drift=0.001, seed=0)
    ds = synth.generate_synthetic(spec)
    closes = ds.episodes[0].raw_close
    assert np.all(np.diff(closes) > 0)
    ep = ingest.prepare(ds.episodes[0])
    fb = FactBase([ep])
    got = {m.pattern.name: m for m in mine(fb, 0.5, 1000, 3, 3, random_state=0, budget=fb.n_total)}
    assert got["up:close:3"].support_frac == 1.0


def test_seeds_differ_but_schema_matches():
    a = synth.generate_synthetic(synth.regime_flip_spec(n_symbols=2, n_days=2, seed=0))
    b = synth.generate_synthetic(synth.regime_flip_spec(n_symbols=2, n_days=2, seed=1))
    assert [e.key for e in a.episodes] == [e.key for e in b.episodes]
    assert all(x.bars.shape == y.bars.shape for x, y in zip(a.episodes, b.episodes))
    assert not np.array_equal(a.episodes[0].bars, b.episodes[0].bars)
    again = synth.generate_synthetic(synth.regime_flip_spec(n_symbols=2, n_days=2, seed=0))
    assert a.episodes[0].bars.tobytes() == again.episodes[0].bars.tobytes()


def test_bar_invariants_and_csv_round_trip(tmp_path):
    ds = synth.generate_synthetic(synth.SynthSpec(n_symbols=2, n_days=3, bars_per_day=60,
                                                  regimes=synth.REGIMES, seed=3))
    for ep in ds.episodes:
        o, h, l, c, v = ep.bars.T
        assert np.all(h >= np.maximum(o, c)) and np.all(l <= np.minimum(o, c)) and np.all(v >= 1)
        assert np.all(np.diff(ep.timestamps).astype(int) > 0)
    path = tmp_path / "bars.csv"
    ds.to_csv(path)
    back = ingest.load_csv(path)
    assert [e.key for e in back] == [e.key for e in ds.episodes]
    np.testing.assert_allclose(back[0].bars, ds.episodes[0].bars, rtol=1e-12)


def test_planted_jump_follows_its_run():
    spec = synth.regime_flip_spec(n_symbols=1, n_days=3, seed=4)
    ds = synth.generate_synthetic(spec)
    seen = 0
    for ep in ds.episodes:
        c = ep.raw_close
        sign = ds.day_signs[ep.key]
        for _, t, jump in ds.events[ep.key]:
            assert jump == sign
            run = c[t - 3:t + 1]
            assert np.all(np.diff(run) < 0)
            # one pause bar against the run, then the jump
            if t + 2 < len(c):
                assert c[t + 1] > c[t]
                assert np.sign(c[t + 2] - c[t + 1]) == jump
                seen += 1
    assert seen > 10
