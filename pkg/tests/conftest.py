import os
from datetime import timedelta

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=timedelta(seconds=10),
    suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("fast", max_examples=25)
settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
