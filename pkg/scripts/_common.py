"""Shared settings for the desk-scale experiments."""

import logging
from pathlib import Path

from pisr_lab.experiments import RunCache
from pisr_lab.scenes import SceneConfig
from pisr_lab.train import TrainConfig, synthetic_dataset

ROOT = Path(__file__).resolve().parent.parent
RESULTS = ROOT / "results"
N_TRAIN, N_VAL = 200, 50
SEEDS = (0, 1, 2)
K_LIST = (2, 4, 8, 16, 32)


def setup() -> tuple:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    data = synthetic_dataset(SceneConfig(), N_TRAIN, N_VAL)
    return TrainConfig(), data, RunCache(RESULTS / "cache")
