import pytest

# criterion number -> (title, passed, detail); filled by the acceptance module
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}
ACCEPTANCE_TITLES = {
    1: "gradient-check suite",
    2: "analytic loss values",
    3: "tiny overfit",
    4: "format round trips",
    5: "pipeline determinism",
    6: "training-protocol arithmetic",
    7: "preprocessing contract",
    8: "conv3d throughput (reported)",
}


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE[number] = (ACCEPTANCE_TITLES[number], bool(passed), detail)
        assert passed, f"criterion {number} ({ACCEPTANCE_TITLES[number]}): {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title in ACCEPTANCE_TITLES.items():
        if number in ACCEPTANCE:
            _, passed, detail = ACCEPTANCE[number]
            status = "PASS" if passed else "FAIL"
        else:
            status, detail = "FAIL", "did not run to completion"
        terminalreporter.write_line(f"criterion {number} [{status}] {title}: {detail}")
