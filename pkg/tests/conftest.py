def pytest_configure(config):
    config.addinivalue_line("markers", "slow: longer experiment-style acceptance runs")


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if not test_acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(test_acceptance.RESULTS):
        terminalreporter.write_line(test_acceptance.RESULTS[name])
