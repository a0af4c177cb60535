import contextlib

import numpy as np
import pytest

from uneq.losses import LossArrangement
from uneq.networks import NetworkConfig
from uneq.training import TrainConfig

SMALL_NET = NetworkConfig(latent_dim=16, embed_dim=16, channels=(8, 8, 4))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    """Fast config for trajectory tests: tiny nets, one stage transition at step 6."""
    return TrainConfig(
        seed=7, batch_size=4, steps=20, network=SMALL_NET, max_stage=1,
        steps_per_stage=6, fade_fraction=0.5, diag_window=5, checkpoint_every=5,
        arrangement=LossArrangement("diametric", "embedding_proximity", "l2", "cosine"),
    )


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    @contextlib.contextmanager
    def run(number, title):
        info = {"detail": ""}
        try:
            yield info
        except BaseException:
            lines.append(f"FAIL  criterion {number}: {title} {info['detail']}".rstrip())
            raise
        lines.append(f"PASS  criterion {number}: {title} {info['detail']}".rstrip())

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
