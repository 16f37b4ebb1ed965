def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines at the end of the run."""
    module = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get(
        "tests.test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
