"""Differentiable self-training (DRIFT) on a small from-scratch autodiff engine."""

from drift.engine import RunConfig, RunMetrics, compare_runs, evaluate, train, warmup
from drift.models import MlpSpec, ParamSet, ema_update, init_params
from drift.strategy import StrategyConfig

__all__ = [
    "MlpSpec", "ParamSet", "RunConfig", "RunMetrics", "StrategyConfig",
    "compare_runs", "ema_update", "evaluate", "init_params", "train", "warmup",
]
__version__ = "0.1.0"
