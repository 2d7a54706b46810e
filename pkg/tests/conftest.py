from hypothesis import settings

# property tests draw from a fixed seed so the suite is reproducible run to run
settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")

# acceptance lines ("AC-n PASS|FAIL ...") collected by test_acceptance.py
AC_LINES = []


def pytest_terminal_summary(terminalreporter):
    if AC_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(AC_LINES, key=lambda s: int(s.split()[0].split("-")[1])):
            terminalreporter.write_line(line)
