import pytest

CRITERIA = {
    1: "core invertibility over 100 seeds x 9 configs",
    2: "zero-init identity",
    3: "autodiff vs finite differences",
    4: "DFT oracle and energy identity",
    5: "quantization and PNG carrier exactness",
    6: "channel squeeze",
    7: "toy training smoke",
    8: "ablation runs",
    9: "bit-reproducible training",
}

_outcomes: dict[int, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _outcomes.setdefault(mark.args[0], []).append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, label in CRITERIA.items():
        if n not in _outcomes:
            continue
        status = "PASS" if all(_outcomes[n]) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {label}")
