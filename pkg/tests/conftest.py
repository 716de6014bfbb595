import os

os.environ.setdefault("OMP_NUM_THREADS", "1")

import pytest  # noqa: E402

CRITERIA_LINES: list = []


def record(number, name, ok, measured):
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {measured}"
    CRITERIA_LINES.append(line)
    print(line, flush=True)
    return ok


@pytest.fixture
def criterion():
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def bump_reconstruction():
    """Default end-to-end run on the bump pair against zero coefficients, shared by the slow tests."""
    import time

    from magtomo import fields as F
    from magtomo import geometry as G
    from magtomo import inverse_pipeline as P

    m = G.EuclideanMetric()
    grid = F.Grid(128)
    pair = P.bump_pair(m, grid)
    t0 = time.perf_counter()
    rec = P.reconstruct(m, pair, P.CoefficientPair(None, None), N=128, n_sources=16,
                        lambda_schedule=(8.0, 16.0, 32.0), field_grid=grid)
    return rec, time.perf_counter() - t0, pair
