from hypothesis import settings

import builders

settings.register_profile("default", deadline=None)
settings.load_profile("default")


def pytest_terminal_summary(terminalreporter):
    results = builders.ACCEPTANCE
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        title, ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d} {title}: {'PASS' if ok else 'FAIL'} ({detail})")
