"""Prints one pass/fail line per acceptance criterion at the end of the run.

Acceptance tests attach a ``("acceptance", text)`` user property through the
``record_property`` fixture; the outcome of the test decides the label.
"""
from __future__ import annotations


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "xfailed", "xpassed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if getattr(rep, "when", "call") != "call" and outcome != "xfailed":
                continue
            for key, text in getattr(rep, "user_properties", []):
                if key == "acceptance":
                    label = {"passed": "PASS", "failed": "FAIL", "xfailed": "FAIL (expected)", "xpassed": "PASS (unexpected)"}
                    lines.append((rep.nodeid, f"{label[outcome]:<16} {text}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
