import numpy as np
import pytest

from longipred.cohort import Cohort, Observation, Subject


def make_cohort(rng, N=6, S=4, Q=2, P=2, M=1, followups=(1.0, 2.5), jitter_ages=True):
    """Random valid cohort; follow-up offsets are the given years after baseline."""
    subjects, obs = [], []
    for i in range(N):
        xb = 60.0 + 20.0 * rng.random()
        yb = 100.0 + 10.0 * rng.standard_normal(M)
        subjects.append(Subject(f"s{i:02d}", xb, rng.integers(0, 3, S), rng.standard_normal(Q),
                                rng.standard_normal(P), yb))
        for t in followups:
            t = t + (0.3 * rng.random() if jitter_ages else 0.0)
            obs.append(Observation(f"s{i:02d}", xb + t, yb + 2.0 * t + rng.standard_normal(M)))
    return Cohort(subjects, obs)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
