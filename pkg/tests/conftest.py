import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from aub.numeric import make_rng

settings.register_profile(
    "repo",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return make_rng(12345)


def pytest_collection_modifyitems(config, items):
    # optional UCI checks skip unless the fetch script has populated data/uci
    from pathlib import Path

    have_power = (Path(__file__).resolve().parent.parent / "data" / "uci" / "power.npy").exists()
    for item in items:
        if "uci" in item.keywords and not have_power:
            item.add_marker(pytest.mark.skip(reason="UCI POWER data not fetched (scripts/fetch_uci.py)"))


def random_batch(rng, n, dim):
    return rng.standard_normal((n, dim))


def assert_allclose(a, b, atol=0.0, rtol=0.0):
    np.testing.assert_allclose(a, b, atol=atol, rtol=rtol)


def pytest_terminal_summary(terminalreporter):
    lines = [value for rep in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", [])
             for key, value in getattr(rep, "user_properties", []) if key == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: s.split(":")[0]):
            terminalreporter.write_line(line)
