import sys


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.write_sep("=", f"acceptance criteria ({module.TIER} tier)")
    for name, ok, detail in results:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    passed = sum(ok for _, ok, _ in results)
    terminalreporter.write_line(f"{passed}/{len(results)} criteria passed")
