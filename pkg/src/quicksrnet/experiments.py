"""Desk-scale experiment recipes shared by ``scripts/`` and the acceptance suite.

One CPU core, minutes not days: a 32-image synthetic training set, a
held-out synthetic validation set and a separate calibration set, each drawn
from its own seed so no image is shared between them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional

import numpy as np

from .data import synthetic_dataset
from .evaluate import EvalOptions, EvalReport, ImagePair, evaluate, make_pair
from .model import Model, ModelConfig, build
from .quant import GRANULARITIES, QuantScheme, build_encodings
from .train import TrainConfig, TrainResult, train_loop

DESK_ITERATIONS = 5000
# 24 keeps a 5k-step f32-m2 run near five minutes; 48 doubles the cost
DESK_PATCH = 24


@dataclass(frozen=True)
class DeskData:
    n_train: int = 32
    n_val: int = 10
    n_calib: int = 8
    size: int = 192
    train_seed: int = 1
    val_seed: int = 2
    calib_seed: int = 3


@dataclass
class DeskSplits:
    train: list[np.ndarray]
    val: list[ImagePair]
    calib: list[np.ndarray]  # LR images, (1, 3, h, w)


def desk_splits(scale, data: DeskData = DeskData()) -> DeskSplits:
    train = synthetic_dataset(data.n_train, size=data.size, seed=data.train_seed)
    val = [make_pair(img, scale, f"val{i:02d}") for i, img in enumerate(synthetic_dataset(data.n_val, data.size, data.val_seed))]
    calib = [make_pair(img, scale, "calib").lr for img in synthetic_dataset(data.n_calib, data.size, data.calib_seed)]
    return DeskSplits(train, val, calib)


def desk_train_config(iterations: int = DESK_ITERATIONS, **overrides) -> TrainConfig:
    return TrainConfig.desk_scale(iterations, **{"patch_size": DESK_PATCH, **overrides})


@dataclass
class DeskRun:
    config: ModelConfig
    result: TrainResult
    seconds: float

    @property
    def model(self) -> Model:
        return self.result.model


def train_desk_model(
    config: ModelConfig,
    splits: DeskSplits,
    train_cfg: Optional[TrainConfig] = None,
    log: Optional[Callable[[int, float, float], None]] = None,
) -> DeskRun:
    t0 = time.perf_counter()
    result = train_loop(build(config), splits.train, train_cfg or desk_train_config(), log=log)
    return DeskRun(config, result, time.perf_counter() - t0)


def quantized_reports(model: Model, splits: DeskSplits, granularities=GRANULARITIES) -> dict[str, EvalReport]:
    """fp and W8A8 evaluation per weight granularity, calibrated on ``splits.calib``."""
    reports = {}
    for gran in granularities:
        scheme = QuantScheme(weight_granularity=gran)
        enc = build_encodings(model, splits.calib, scheme)
        reports[gran] = evaluate(model, splits.val, EvalOptions(encodings=enc, scheme=scheme))
    return reports


def small_config(scale=2, **overrides) -> ModelConfig:
    """f32-m2, the smallest listed configuration."""
    scale = Fraction(scale)
    head = "proposed1p5x" if scale == Fraction(3, 2) else "standard"
    return ModelConfig(**{"f": 32, "m": 2, "scale": scale, "head": head, **overrides})
