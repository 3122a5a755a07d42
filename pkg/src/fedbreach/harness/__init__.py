"""Metrics, experiment specs, sweep runner and command line."""

from .config import Cell, ExperimentSpec, load_spec
from .metrics import bleu, rouge_l, token_accuracy, total_accuracy
from .runner import MetricsRow, run_experiment

__all__ = ["Cell", "ExperimentSpec", "MetricsRow", "bleu", "load_spec", "rouge_l", "run_experiment",
           "token_accuracy", "total_accuracy"]
