import pytest

from refeed.synth import SynthSpec, generate

SMALL_SPEC = SynthSpec(
    seed=7, dim=16, n_passages=600, n_queries=12, positives_per_query=3, clusters=6,
    recall_band=None, band_depth=20,
)


@pytest.fixture(scope="session")
def small_bench():
    return generate(SMALL_SPEC)


@pytest.fixture(scope="session")
def default_bench():
    return generate(SynthSpec())


_acceptance_lines = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion, then assert."""
    def check(label: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
        _acceptance_lines.append(line)
        print(line)
        assert ok, line
    return check


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
