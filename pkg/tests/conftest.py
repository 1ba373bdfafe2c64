import numpy as np
import pytest

from cartl.trial_data import TrialDataset


def random_trial(rng, n=60, p=3, K=2, A=2, min_per_cell=2):
    """Random trial in which every (stratum, arm) cell has at least ``min_per_cell`` units."""
    base = np.array([(k, a) for k in range(1, K + 1) for a in range(A + 1)] * min_per_cell)
    extra = n - base.shape[0]
    assert extra >= 0
    more = np.column_stack([rng.integers(1, K + 1, extra), rng.integers(0, A + 1, extra)])
    lab = np.vstack([base, more])
    lab = lab[rng.permutation(n)]
    x = rng.normal(size=(n, p))
    y = x @ rng.normal(size=p) + lab[:, 1] + rng.normal(size=n)
    return TrialDataset(y, lab[:, 1], lab[:, 0], x, n_arms=A, n_strata=K)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


@pytest.fixture
def record_criterion(capsys):
    """Log one PASS/FAIL line for an acceptance criterion, immediately and in the summary."""
    def record(label, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
