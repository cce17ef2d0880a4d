import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict

import numpy as np
import pytest

from saat import cli
from saat.data import Dataset, ingest_idx
from saat.models import Model, build, load_checkpoint

CACHE = Path(os.environ.get("SAAT_TEST_CACHE", Path(__file__).parent / ".cache"))


@dataclass
class World:
    root: Path
    train: Dataset
    test: Dataset
    models: Dict[str, Model]
    ckpt_dir: Path

    def paths(self, split="test"):
        return str(self.root / f"{split}-images.idx"), str(self.root / f"{split}-labels.idx")


def trained_world(n_train: int, n_test: int, epochs: int, seed: int = 0) -> World:
    """Dataset plus three trained models produced through the CLI, cached by their settings."""
    key = hashlib.sha256(f"{n_train}/{n_test}/{epochs}/{seed}".encode()).hexdigest()[:12]
    root = CACHE / key
    ckpt = root / "checkpoints"
    if not (root / "test-labels.idx").is_file():
        assert cli.main(["make-dataset", "--out", str(root), "--n-train", str(n_train),
                         "--n-test", str(n_test), "--seed", str(seed)]) == 0
    if not all((ckpt / f"{m}.ckpt").is_file() for m in ("vgg", "res", "inc")):
        assert cli.main(["train", "--dataset-images", str(root / "train-images.idx"),
                         "--dataset-labels", str(root / "train-labels.idx"), "--checkpoint-dir", str(ckpt),
                         "--out", str(root / "train-run"), "--epochs", str(epochs), "--seed", str(seed)]) == 0
    train = ingest_idx(root / "train-images.idx", root / "train-labels.idx")
    test = ingest_idx(root / "test-images.idx", root / "test-labels.idx")
    models = {m: load_checkpoint(ckpt / f"{m}.ckpt") for m in ("vgg", "res", "inc")}
    return World(root, train, test, models, ckpt)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def full_world():
    """Desk dataset at full size with three models trained for twelve epochs."""
    return trained_world(n_train=5000, n_test=2000, epochs=12)


@pytest.fixture(scope="session")
def mini_world():
    """Small models trained for a few epochs; good enough for plumbing checks."""
    return trained_world(n_train=1500, n_test=500, epochs=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_models():
    """Untrained float64 models; enough for shape, gradient and plumbing checks."""
    return {name: build(name, 10, seed=i, dtype=np.float64) for i, name in enumerate(("vgg", "res", "inc"))}


@pytest.fixture
def images(rng):
    return rng.uniform(0.0, 1.0, size=(4, 1, 32, 32))
