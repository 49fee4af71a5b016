import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def logo(rng):
    from slbr.synth import procedural_watermark

    return procedural_watermark(rng, size=16)


CRITERIA = {
    1: "blend inversion oracle",
    2: "loss oracles",
    3: "gradient audit",
    4: "shape and range suite",
    5: "module micro-properties",
    6: "toy overfit benefit",
    7: "self-calibration benefit",
    8: "metric oracles",
    9: "determinism",
}
_outcomes: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    n = marker.args[0]
    details = [v for k, v in item.user_properties if k == "detail"]
    _outcomes.setdefault(n, []).append((item.name, report.passed, details))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in CRITERIA.items():
        runs = _outcomes.get(n)
        if not runs:
            tr.write_line(f"criterion {n} ({title}): NOT RUN")
            continue
        ok = all(passed for _, passed, _ in runs)
        tr.write_line(f"criterion {n} ({title}): {'PASS' if ok else 'FAIL'}")
        for name, passed, details in runs:
            note = "; ".join(details)
            tr.write_line(f"    {'ok  ' if passed else 'FAIL'} {name}{': ' + note if note else ''}")
