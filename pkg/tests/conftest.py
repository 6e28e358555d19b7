import time
from dataclasses import dataclass

import numpy as np
import pytest
import torch

from v2lab.synth_data import SceneConfig, generate_dataset
from v2lab.training import (
    DESK_TRAIN, Expert, build_point_dataset, configure_threads, prepare_pairs,
    pretrain_point_decoder, train_expert,
)

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _single_thread():
    configure_threads()
    yield


@dataclass
class TrainedPipeline:
    scene: SceneConfig
    train: object
    test: object
    train_pairs: list
    test_pairs: list
    experts: dict
    logs: dict
    seconds: float


@pytest.fixture(scope="session")
def pipeline():
    """The default desk-scale benchmark trained once: 512/128 pairs, point decoder, Visual and Fusion experts."""
    configure_threads()
    t0 = time.perf_counter()
    scene = SceneConfig()
    train_pairs = generate_dataset(scene, 512, "train")
    test_pairs = generate_dataset(scene, 128, "test")
    train, test = prepare_pairs(train_pairs), prepare_pairs(test_pairs)
    decoder, pre_log = pretrain_point_decoder(build_point_dataset(scene, DESK_TRAIN.pretrain_scenes), DESK_TRAIN)
    experts = {"anchor": Expert("anchor", decoder)}
    logs = {"pretrain": pre_log}
    for kind in ("visual", "fusion"):
        experts[kind], logs[kind] = train_expert(kind, train, DESK_TRAIN, point_decoder=decoder)
    return TrainedPipeline(scene, train, test, train_pairs, test_pairs, experts, logs, time.perf_counter() - t0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

