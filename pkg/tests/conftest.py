import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from icdistill.config import ExperimentConfig
from icdistill.meta import meta_train
from icdistill.model import PfnConfig, PfnModel
from icdistill.optim import RunLog

SRC = Path(__file__).resolve().parents[1] / "src" / "icdistill"
_TRAINING_SOURCES = ("autodiff.py", "data.py", "meta.py", "model.py", "optim.py", "prior.py")


def _training_key(cfg: ExperimentConfig) -> str:
    h = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode())
    for name in _TRAINING_SOURCES:
        h.update((SRC / name).read_bytes())
    return h.hexdigest()[:16]


class TrainedRun:
    def __init__(self, directory: Path, cfg: ExperimentConfig):
        self.directory = directory
        self.config = cfg
        self.checkpoint = directory / "best.json"
        self.model = PfnModel.load(self.checkpoint)
        self.log = RunLog.read_jsonl(directory / "meta_log.jsonl")
        timing = directory / "train_seconds.txt"
        self.train_seconds = float(timing.read_text()) if timing.exists() else None


@pytest.fixture(scope="session")
def trained(request) -> TrainedRun:
    """The default model meta-trained for 20k steps with seed 0.

    Training takes several minutes, so the result is cached under the pytest
    cache directory, keyed by the config and the source of every module that
    influences training.
    """
    cfg = ExperimentConfig()
    root = Path(request.config.cache.mkdir("icdistill-trained"))
    directory = root / _training_key(cfg)
    if not (directory / "best.json").exists():
        start = time.perf_counter()
        model = PfnModel.init(cfg.model, seed=cfg.seed)
        meta_train(model, cfg.prior, cfg.meta_train.steps, adam_lr=cfg.meta_train.lr,
                   split_ratio=cfg.meta_train.split_ratio, window=cfg.meta_train.window, out_dir=directory)
        (directory / "train_seconds.txt").write_text(f"{time.perf_counter() - start:.1f}\n")
    return TrainedRun(directory, cfg)


TINY = PfnConfig(max_features=4, max_classes=4, embed_dim=8, num_layers=2, num_heads=2, ff_dim=12, context_cap=64)


# experiment config matching TINY, small enough for end-to-end CLI runs
TINY_CONFIG = {
    "prior": {"n_range": [24, 48], "d_range": [1, 4], "C_range": [2, 4]},
    "model": {
        "max_features": 4, "max_classes": 4, "embed_dim": 8, "num_layers": 2,
        "num_heads": 2, "ff_dim": 12, "context_cap": 64,
    },
    "meta_train": {"steps": 3, "window": 2},
    "icd": {"m": 8, "steps": 20, "batch_size": 32, "eval_interval": 5},
    "data": {"moons_n": 200},
    "eval": {"baseline_repeats": 3, "grid_resolution": 7, "grid_steps": [0, 10, 20]},
}


def random_head(model: PfnModel, rng: np.random.Generator, scale: float = 0.5) -> PfnModel:
    """Give a freshly initialized model a non-zero head so gradients are non-trivial."""
    model.weights["head.weight"][...] = rng.normal(0.0, scale, model.weights["head.weight"].shape)
    model.weights["head.bias"][...] = rng.normal(0.0, scale, model.weights["head.bias"].shape)
    return model


@pytest.fixture
def tiny_model() -> PfnModel:
    return random_head(PfnModel.init(TINY, seed=7), np.random.default_rng(7))


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}: {detail}")
