from __future__ import annotations

import numpy as np
import pytest

from lesiongraph.cohort import Cohort, PatientRecord


def random_patient(rng, pid="P0", n_lesions=3, d_features=5, d_clin=4, label=None) -> PatientRecord:
    return PatientRecord(
        pid,
        int(rng.integers(2)) if label is None else label,
        rng.normal(size=d_clin),
        rng.uniform(0, 300, size=(n_lesions, 3)),
        rng.normal(size=(n_lesions, d_features)),
    )


def random_cohort(rng, n=12, max_lesions=5, d_features=5, d_clin=4) -> Cohort:
    labels = np.array([1] * max(2, n // 4) + [0] * (n - max(2, n // 4)))
    return Cohort(
        tuple(
            random_patient(rng, f"P{i:03d}", int(rng.integers(1, max_lesions + 1)), d_features, d_clin, int(labels[i]))
            for i in range(n)
        )
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report one line each, printed after the run
ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
