import _oracles

CRITERIA = {
    1: "GD recursion vs closed form",
    2: "KC vs brute-force enumeration",
    3: "Nystrom full-landmark exactness",
    4: "gradient soundness",
    5: "mask semantics",
    6: "FLOPs model and lambda grid",
    7: "end-to-end directional experiment",
    8: "upper bound vs validation loss correlation",
    9: "determinism",
    10: "bound identity",
}


def pytest_terminal_summary(terminalreporter):
    seen = _oracles.ACCEPTANCE
    if not seen:
        return
    failed = [rep.nodeid for key in ("failed", "error") for rep in terminalreporter.stats.get(key, [])]
    terminalreporter.section("acceptance criteria")
    for k, name in CRITERIA.items():
        if k in seen:
            ok, detail = seen[k]
            terminalreporter.write_line(f"criterion {k:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
        elif any(f"test_criterion_{k:02d}_" in nodeid for nodeid in failed):
            terminalreporter.write_line(f"criterion {k:2d} FAIL  {name}: errored before a verdict")
        else:
            terminalreporter.write_line(f"criterion {k:2d} ----  {name}: not run")
