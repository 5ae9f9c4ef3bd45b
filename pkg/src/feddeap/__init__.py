"""Simulator for dual-prompt federated prompt tuning with ETF-aligned transforms."""

from .config import ExperimentConfig, load_config
from .etf import EtfFrame, delta_bound, entropy_floor, make_etf, mi_lower_bound
from .experiment import build_experiment, load_checkpoint, run_ablation, run_experiment, save_checkpoint

__all__ = [
    "EtfFrame",
    "ExperimentConfig",
    "build_experiment",
    "delta_bound",
    "entropy_floor",
    "load_checkpoint",
    "load_config",
    "make_etf",
    "mi_lower_bound",
    "run_ablation",
    "run_experiment",
    "save_checkpoint",
]
