import json

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("cfsm", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("cfsm")


def tiny_config(**overrides) -> dict:
    """Small synthetic UnsupDLSTL run that finishes in well under a second."""
    cfg = {
        "scenario": {"kind": "UnsupDLSTL"},
        "variant": "CFSM",
        "seed": 3,
        "data": {"synthetic": {"n_factors": 4, "source_classes": 3, "target_classes": 3,
                               "samples_per_class": 12, "input_dim": 8}},
        "arch": {"hidden": [8], "feature_dim": 6, "cfs_dim": 4},
        "optimizer": {"epochs": 2, "batch_size": 12, "warmup": 3},
        "pretrain": {"epochs": 2, "batch_size": 12},
        "graph": {"k": 3},
    }
    cfg.update(overrides)
    return cfg


@pytest.fixture
def write_config(tmp_path):
    def write(cfg: dict, name: str = "config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(cfg))
        return path
    return write


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
