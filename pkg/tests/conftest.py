import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ctphase.features import FeatureTable  # noqa: E402
from ctphase.labels import ORGANS  # noqa: E402

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def random_table(n=120, seed=0, missing=0.1, shift=1.0):
    """Four classes shifted apart on every feature, with NaNs sprinkled in."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 4
    X = rng.normal(size=(n, len(ORGANS))) + shift * y[:, None]
    X[rng.random(X.shape) < missing] = np.nan
    return FeatureTable(
        [f"s{i:04d}" for i in range(n)],
        [f"p{i // 2:04d}" for i in range(n)],
        y,
        X,
    )


@pytest.fixture
def small_table():
    return random_table()


COHORT_COUNTS = (200, 230, 231, 193)  # per-class scan counts of the multi-phase liver cohort


def cohort_like_table(seed=0):
    """233 patients, 854 scans; each class is drawn from distinct patients."""
    rng = np.random.default_rng(seed)
    n_patients = 233
    while True:
        owners = [rng.choice(n_patients, size=c, replace=False) for c in COHORT_COUNTS]
        if len(set(np.concatenate(owners))) == n_patients:
            break
    scan_ids, patient_ids, phases = [], [], []
    for phase, pats in enumerate(owners):
        for p in pats:
            scan_ids.append(f"s{len(scan_ids):04d}")
            patient_ids.append(f"P{p:03d}")
            phases.append(phase)
    X = np.zeros((len(scan_ids), 16))
    return FeatureTable(scan_ids, patient_ids, phases, X)
