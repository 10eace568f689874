import sys


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance criteria verdicts, one line each, after any run that included them."""
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
