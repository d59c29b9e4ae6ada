import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from metatrade import ingest, synth  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset():
    spec = synth.SynthSpec(n_symbols=2, n_days=3, bars_per_day=80, seed=7)
    return synth.generate_synthetic(spec)


@pytest.fixture(scope="session")
def prepared(small_dataset):
    return [ingest.prepare(e) for e in small_dataset.episodes]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
