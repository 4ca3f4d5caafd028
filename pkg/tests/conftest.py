"""Per-criterion verdict lines for the acceptance suite.

Tests named ``test_criterion_NN_*`` in test_acceptance.py are grouped by
number; after the run each criterion gets one PASS/FAIL line.  A criterion
passes only if every one of its tests passed outright; expected failures
(xfail) are counted and reported, they do not silently pass.
"""

import re
from collections import Counter

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")

_LABELS = {
    1: "parameter accounting vs published sizes",
    2: "sparse-vs-dense flops ratio",
    3: "energy and emissions arithmetic",
    4: "full-model gradient check",
    5: "dense-reduction equivalence",
    6: "auxiliary-loss load balancing",
    7: "expert-count scaling trend",
    8: "quality-filtered training wins",
    9: "pareto keep rates",
    10: "mixture weights",
    11: "eval scoring and decoding fixtures",
    12: "contamination oracle agreement",
    13: "shard planner properties",
    14: "training stability machinery",
}

# nodeid -> outcome, folded across setup/call/teardown phases
_outcomes: dict[str, str] = {}


def _fold(previous, outcome):
    order = {"passed": 0, "skipped": 1, "xfailed": 2, "failed": 3}
    if previous is None:
        return outcome
    return previous if order[previous] >= order[outcome] else outcome


def pytest_runtest_logreport(report):
    if _CRITERION.search(report.nodeid) is None:
        return
    if report.failed:
        outcome = "failed"
    elif report.skipped:
        outcome = "xfailed" if hasattr(report, "wasxfail") else "skipped"
    elif report.when == "call" and hasattr(report, "wasxfail"):
        outcome = "failed"  # strict xpass or unexpected pass
    else:
        outcome = "passed"
    _outcomes[report.nodeid] = _fold(_outcomes.get(report.nodeid), outcome)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _outcomes:
        return
    by_criterion: dict[int, Counter] = {}
    for nodeid, outcome in _outcomes.items():
        number = int(_CRITERION.search(nodeid).group(1))
        by_criterion.setdefault(number, Counter())[outcome] += 1

    terminalreporter.section("acceptance criteria")
    for number in sorted(by_criterion):
        counts = by_criterion[number]
        label = _LABELS.get(number, "")
        if set(counts) == {"passed"}:
            verdict = "PASS"
        else:
            parts = ", ".join(f"{n} {kind}" for kind, n in sorted(counts.items()))
            verdict = f"FAIL ({parts})"
        terminalreporter.write_line(f"criterion {number:2d} ({label}): {verdict}")
    missing = sorted(set(_LABELS) - set(by_criterion))
    if missing:
        joined = ", ".join(str(n) for n in missing)
        terminalreporter.write_line(f"not exercised in this run: {joined}")
