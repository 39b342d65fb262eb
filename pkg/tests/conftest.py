from __future__ import annotations

import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings, strategies as st

from loop_perturb.experiment import InstanceParams, generate_random_instance

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

seeds = st.integers(min_value=0, max_value=2**31 - 1)


def instance(seed: int, **params):
    params.setdefault("n", [1, 8])
    return generate_random_instance(InstanceParams(**params), seed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
