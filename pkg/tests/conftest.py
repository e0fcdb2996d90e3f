import pytest

from multisplat.oracle import make_synthetic_scene


@pytest.fixture(scope="session")
def tiny_dataset():
    """16x16 spheres-room with 3 training and 1 test view."""
    ds, scene = make_synthetic_scene(size=16, n_train=3, n_test=1, spacing=0.3)
    return ds


_ACCEPTANCE = []


@pytest.fixture
def verdict():
    """Record one pass/fail line for an acceptance criterion."""
    def record(name, passed, detail):
        line = f"{name} {'PASS' if passed else 'FAIL'}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
