import re

_CRITERION = re.compile(r"test_criterion_(\d+)_")
_results = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m or (report.when != "call" and report.passed):
        return
    entry = _results.setdefault(int(m.group(1)), {"ok": True, "notes": []})
    entry["ok"] &= report.passed
    if report.when == "call":
        entry["notes"] += [str(v) for k, v in report.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        r = _results[n]
        line = f"criterion {n:2d}: {'PASS' if r['ok'] else 'FAIL'}"
        if r["notes"]:
            line += "  (" + "; ".join(r["notes"]) + ")"
        terminalreporter.write_line(line)
