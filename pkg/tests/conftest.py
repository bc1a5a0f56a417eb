import os
import sys
from pathlib import Path

import numpy as np
import pytest

# Ensure we can import the packages when running from the repo root
repo_root = Path(__file__).resolve().parents[1]
if str(repo_root) not in sys.path:
    sys.path.insert(0, str(repo_root))

# Runs must land in the test's tmp directories, never in a user-configured one
os.environ.pop("TEDK_OUT", None)

from data.splits import split_dataset  # noqa: E402
from data.synthetic import generate_splits  # noqa: E402
from ml.autodiff.ops import ActivationKind  # noqa: E402
from ml.autodiff.tensor import precision  # noqa: E402
from ml.config import (  # noqa: E402
    AugmentationPolicy,
    ExperimentConfig,
    ModelConfig,
    PredictorArch,
    SceneConfig,
    TrainConfig,
)

TINY_CONFIG = """\
run_name = tiny
scene.count = 16
scene.test_count = 4
scene.height = 8
scene.width = 8
shift.enabled = true
shift.count = 4
model.feature_channels = 4
predictor.0.depth = 1
predictor.0.width = 4
predictor.1.depth = 1
predictor.1.width = 4
predictor.1.dilation = 2
predictor.1.activation = tanh
train.epochs = 2
train.batch_size = 4
train.base_lr = 0.005
mixer.kind = rbf
eval.caps = 3, 6, 10
"""


@pytest.fixture
def float64():
    with precision(np.float64):
        yield


@pytest.fixture
def tiny_config(tmp_path) -> ExperimentConfig:
    return ExperimentConfig(
        run_name="tiny",
        output_dir=str(tmp_path / "runs"),
        scene=SceneConfig(count=16, test_count=4, height=8, width=8),
        model=ModelConfig(feature_channels=4),
        predictor=[
            PredictorArch(depth=1, width=4),
            PredictorArch(depth=1, width=4, dilation=[2], activation=ActivationKind.TANH),
        ],
        train=TrainConfig(epochs=2, batch_size=4, base_lr=0.005),
        augment=AugmentationPolicy(enabled=False),
    )


@pytest.fixture
def tiny_data(tiny_config):
    train, test, _ = generate_splits(tiny_config.scene)
    split = split_dataset(train, seed=tiny_config.train.seed, test=test)
    return train, test, split


@pytest.fixture(scope="session")
def tiny_config_text() -> str:
    return TINY_CONFIG


@pytest.fixture
def tiny_config_file(tmp_path, tiny_config_text) -> Path:
    path = tmp_path / "tiny.cfg"
    path.write_text(tiny_config_text, encoding="utf-8")
    return path
