import os
import sys
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

# every property test runs at least this many generated cases
PROPERTY_CASES = 150
settings.register_profile("tip", max_examples=PROPERTY_CASES, deadline=None, derandomize=True)
settings.load_profile("tip")

_LINES = []
_GROUPS = defaultdict(lambda: [0, 0])  # criterion -> [passed, total]


def record(criterion, title, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {title}"
    if detail:
        line += f" ({detail})"
    _LINES.append((criterion, line))
    print(line)


def auc_pair_oracle(scores, labels):
    """P(s+ > s-) + P(tie)/2 by brute force over all pairs."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, bool)
    pos, neg = s[y], s[~y]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): counts toward an aggregated acceptance line")


_GROUP_TITLES = {
    2: "utility unit suite (tasks/losses/metrics examples)",
    9: "invariant property suites",
}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        n = marker.args[0]
        _GROUPS[n][1] += 1
        _GROUPS[n][0] += rep.outcome == "passed"


def pytest_terminal_summary(terminalreporter):
    lines = [(n, f"[{'PASS' if p == t else 'FAIL'}] criterion {n}: {_GROUP_TITLES.get(n, '')} ({p}/{t} tests)")
             for n, (p, t) in _GROUPS.items()]
    lines += _LINES
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines, key=lambda x: x[0]):
        terminalreporter.write_line(line)
