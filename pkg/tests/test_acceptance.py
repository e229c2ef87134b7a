"""Acceptance criteria 1-10, each at its stated tolerance and time limit.

Every test prints one ``[PASS]``/``[FAIL]`` line; the lines are repeated in
the terminal summary.
"""

import pytest

from mpssm.checks import CHECKS

ACCEPTANCE_LINES: list[str] = []


SLOW = {8, 9}
CASES = [pytest.param(c, id=f"criterion_{c}", marks=[pytest.mark.slow] if c in SLOW else [])
         for c in sorted(CHECKS)]


@pytest.mark.parametrize("criterion", CASES)
def test_criterion(criterion, capsys):
    result = CHECKS[criterion]()
    line = result.line()
    ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert result.ok, f"{line}\n{result.to_json()['details']}"
