"""Top-level acceptance gate: every numbered criterion as one test.

Each criterion maps to a verify suite run at its stated tolerance; the
test id carries the criterion number and the printed line its outcome.
Suites share one trained draft via the verify module's cache, so running
this file in order trains once.
"""

import time

import pytest

from specdec import verify

IDS = [f"{num:02d}-{name}" for num, name in verify.CRITERIA]

# wall-clock budget per criterion (seconds); only losslessness has one
BUDGETS = {1: 120.0}


@pytest.mark.parametrize("num,name", verify.CRITERIA, ids=IDS)
def test_criterion(num, name):
    t0 = time.time()
    results = verify.run_suite(name)
    elapsed = time.time() - t0
    passed = all(r.passed for r in results)
    status = "PASS" if passed else "FAIL"
    print(f"criterion {num:2d} [{name}]: {status} ({elapsed:.1f}s)")
    for r in results:
        print(f"    {'ok ' if r.passed else 'BAD'} {r.name}: {r.detail}")
    if num in BUDGETS:
        assert elapsed < BUDGETS[num], (
            f"criterion {num} took {elapsed:.1f}s, budget {BUDGETS[num]:.0f}s")
    failed = [r.name for r in results if not r.passed]
    assert passed, f"criterion {num} [{name}] failed: {failed}"


def test_all_criteria_covered():
    nums = [num for num, _ in verify.CRITERIA]
    assert nums == list(range(1, 11))
    assert set(name for _, name in verify.CRITERIA) == set(verify.SUITES)
