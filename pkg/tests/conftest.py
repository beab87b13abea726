def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion at the end of every run."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py" in rep.nodeid and rep.when == "call":
                name = rep.nodeid.split("::")[-1].removeprefix("test_")
                lines.append((name, "PASS" if outcome == "passed" else "FAIL"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, state in sorted(lines):
            terminalreporter.write_line(f"{name}: {state}")
