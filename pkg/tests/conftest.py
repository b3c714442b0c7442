import numpy as np
import pytest
import torch

from geofake.fixtures import FixtureSpec, build_fixture

torch.set_num_threads(max(1, torch.get_num_threads()))


@pytest.fixture(scope="session")
def small_fixture(tmp_path_factory):
    """32 + 32 tiles on disk with manifest and masks."""
    root = tmp_path_factory.mktemp("fixture")
    manifest = build_fixture(FixtureSpec(n_per_class=32, seed=3), root)
    return root, manifest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Recorder for acceptance criteria; results are echoed in the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE_KEY, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 13):
        if n in results:
            terminalreporter.write_line(results[n])
        else:
            terminalreporter.write_line(f"[{n:2d}] FAIL  not run")
