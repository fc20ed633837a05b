"""Experiment runner, configuration, file formats and CLI."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .heatmap import emit_heatmap, heatmap_svg
from .io import ingest_offline, read_matrix, write_matrix
from .runner import measure_checkpoints, run_experiment, train_seed

__all__ = ["ConfigError", "ExperimentConfig", "emit_heatmap", "heatmap_svg", "ingest_offline", "load_config",
           "measure_checkpoints", "parse_config", "read_matrix", "run_experiment", "train_seed", "write_matrix"]
