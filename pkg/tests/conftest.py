import warnings

import numpy as np
import pytest
import torch

from gmmsep.datagen import generate_manifest, synthetic_bank
from gmmsep.trainer import desk_config, fit, prepare_examples


@pytest.fixture(scope="session")
def bank_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("bank")


@pytest.fixture(scope="session")
def small_run(bank_dir, tmp_path_factory):
    """A briefly trained desk-scale model plus its held-out test specs."""
    torch.manual_seed(0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        train = generate_manifest(synthetic_bank(bank_dir, "train", 4, 2.0, 16000, 0), 24, 1.0, 1,
                                  16000, partial_prob=0.3)
        val = generate_manifest(synthetic_bank(bank_dir, "val", 4, 2.0, 16000, 0), 4, 1.0, 2, 16000)
        test = generate_manifest(synthetic_bank(bank_dir, "test", 4, 2.0, 16000, 0), 3, 1.0, 3,
                                 16000)
    cfg = desk_config(max_epochs=3)
    fe = cfg.frontend()
    out = tmp_path_factory.mktemp("small_run")
    best = fit(None, None, cfg, out, train_data=prepare_examples(train, fe),
               val_data=prepare_examples(val, fe))
    return {"checkpoint": best, "dir": out, "test": test, "train": train, "val": val,
            "config": cfg}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


DESK_PARTIAL_PROB = 0.3


@pytest.fixture(scope="session")
def desk_data(tmp_path_factory):
    """Synthetic desk-scale data: 200 train / 20 val / 20 test mixtures of 1 s at 16 kHz."""
    root = tmp_path_factory.mktemp("desk_bank")
    banks = {split: synthetic_bank(root, split, n, 4.0, 16000, 0)
             for split, n in (("train", 8), ("val", 4), ("test", 4))}
    cfg = desk_config()
    fe = cfg.frontend()
    train = generate_manifest(banks["train"], 200, 1.0, 1, 16000,
                              partial_prob=DESK_PARTIAL_PROB)
    val = generate_manifest(banks["val"], 20, 1.0, 2, 16000)
    test = generate_manifest(banks["test"], 20, 1.0, 3, 16000)
    return {"train": train, "val": val, "test": test, "config": cfg,
            "train_examples": prepare_examples(train, fe),
            "val_examples": prepare_examples(val, fe)}


class DeskRuns:
    """Trains desk-scale models on demand and remembers them for the session."""

    def __init__(self, data, root):
        self.data = data
        self.root = root
        self.runs = {}

    def get(self, name: str) -> dict:
        if name not in self.runs:
            import time
            baseline = name == "baseline"
            cfg = desk_config(covariance="sphr-tied" if baseline else name, baseline=baseline)
            out = self.root / name
            t0 = time.perf_counter()
            best = fit(None, None, cfg, out, train_data=self.data["train_examples"],
                       val_data=self.data["val_examples"])
            self.runs[name] = {"checkpoint": best, "dir": out, "config": cfg,
                               "seconds": time.perf_counter() - t0}
        return self.runs[name]


@pytest.fixture(scope="session")
def desk_runs(desk_data, tmp_path_factory):
    return DeskRuns(desk_data, tmp_path_factory.mktemp("desk_runs"))


def pytest_collection_modifyitems(items):
    # anything built on the desk-scale runs trains real models for minutes
    for item in items:
        if {"desk_runs", "desk_data"} & set(getattr(item, "fixturenames", ())):
            item.add_marker(pytest.mark.slow)
