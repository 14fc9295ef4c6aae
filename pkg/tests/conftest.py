import os

# acceptance runs must not depend on whatever thread count the host offers
os.environ.setdefault("OMP_NUM_THREADS", "1")

RESULTS = []


def report(name, ok, detail):
    """Record one acceptance line; printed in the terminal summary."""
    RESULTS.append(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
