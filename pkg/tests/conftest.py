from __future__ import annotations

import pytest

from flowd import create_profile
from flowd.clock import SimClock
from flowd.runner import Runner


@pytest.fixture
def profile(tmp_path):
    return create_profile(str(tmp_path / "profile"))


@pytest.fixture
def make_profile(tmp_path):
    counter = {"n": 0}

    def _make(**settings):
        counter["n"] += 1
        return create_profile(str(tmp_path / f"profile{counter['n']}"), **settings)

    return _make


@pytest.fixture
def runner(profile):
    return Runner(profile, clock=SimClock())


@pytest.fixture
def make_runner(make_profile):
    def _make(**settings):
        return Runner(make_profile(**settings), clock=SimClock())

    return _make
