import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: dict[str, tuple[str, str]] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line: call ``criterion(label, passed, detail)``."""

    def record(label: str, passed: bool, detail: str = "") -> None:
        verdict = "PASS" if passed else "FAIL"
        _ACCEPTANCE[label] = (verdict, detail)
        print(f"\n{label}: {verdict} {detail}".rstrip())

    return record


def record_skip(label: str, reason: str) -> None:
    _ACCEPTANCE[label] = ("SKIP", reason)
    print(f"\n{label}: SKIP {reason}")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_ACCEPTANCE, key=lambda s: (int(s.split()[1].rstrip("ab")), s)):
        verdict, detail = _ACCEPTANCE[label]
        terminalreporter.write_line(f"{label}: {verdict} {detail}".rstrip())
