import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from anyshot.config import ExperimentConfig  # noqa: E402
from anyshot.synthdata import SplitSpec, WorldSpec  # noqa: E402
from anyshot.trainer import TrainConfig  # noqa: E402

SMALL_WORLD = WorldSpec(S=4, F=1, U=1, n=12, d=10, v=16, grid=4, clusters=2)
SMALL_SPLIT = SplitSpec(n_train=24, n_test=12, max_objects=3)


@pytest.fixture
def small_cfg(tmp_path):
    """A world small enough for end-to-end tests to run in about a second."""
    return ExperimentConfig(
        world=SMALL_WORLD,
        split=SMALL_SPLIT,
        shots=2,
        train=TrainConfig(epochs_base=3, epochs_ft=2),
        out_dir=str(tmp_path / "out"),
        seeds=(3,),
    )


SMALL_CONFIG_TEXT = """\
# tiny world for command-line tests
S = 4
F = 1
U = 1
n = 12
d = 10
v = 16
grid = 4
clusters = 2
n_train = 24
n_test = 12
max_objects = 3
shots = 2
epochs_base = 3
epochs_ft = 2
seeds = 3
"""


@pytest.fixture
def config_file(tmp_path):
    def make(**overrides):
        lines = [l for l in SMALL_CONFIG_TEXT.splitlines() if l.split("=")[0].strip() not in overrides]
        text = "\n".join(lines) + "\n" + "".join(f"{k} = {v}\n" for k, v in overrides.items())
        path = tmp_path / f"cfg{len(list(tmp_path.glob('cfg*.ini')))}.ini"
        path.write_text(text)
        return str(path)

    return make
