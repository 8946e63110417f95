import time

import pytest

from cadapter.data import SynthConfig, synthesize
from cadapter.train import TrainConfig, tune

# pass/fail lines of the acceptance gate, echoed in the terminal summary
ACCEPTANCE_LINES = []

BENCH_SEEDS = range(10)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


class Benchmark:
    """Synthetic overconfident benchmark, tuned once per surrogate temperature."""

    def __init__(self):
        self.data = {s: synthesize(SynthConfig(seed=s)) for s in BENCH_SEEDS}
        self._runs = {}

    def tuned(self, T=1e-4):
        if T not in self._runs:
            t0 = time.perf_counter()
            runs = {}
            for s in BENCH_SEEDS:
                d = self.data[s]
                runs[s] = tune(d["tune"], TrainConfig(seed=s, surrogate_T=T), d["val"])
            self._runs[T] = (runs, time.perf_counter() - t0)
        return self._runs[T]


@pytest.fixture(scope="session")
def synthetic_bench():
    return Benchmark()
