"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

_results = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        _results[props["criterion"]] = (report.passed, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")

    def order(key):
        head = key.rstrip("abcdefghijklmnopqrstuvwxyz")
        return int(head), key

    for key in sorted(_results, key=order):
        passed, detail = _results[key]
        terminalreporter.write_line(f"criterion {key:<4} {'PASS' if passed else 'FAIL'}  {detail}")
