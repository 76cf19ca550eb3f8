import os

import numpy as np
import pytest
from hypothesis import settings

from elrdd.localfit import Sample

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# acceptance results, printed once at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_sample(rng, n=400, slope=(1.0, 1.0), jump=0.3, noise=0.5, cutoff=0.0):
    x = rng.uniform(-1, 1, n) + cutoff
    d = x - cutoff
    y = np.where(d >= 0, jump + slope[0] * d, slope[1] * d) + noise * rng.standard_normal(n)
    return Sample(x, {"y": y}, cutoff)


@pytest.fixture
def uniform_sample(rng):
    return make_sample(rng)
