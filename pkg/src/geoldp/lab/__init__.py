"""Experiment orchestration: configs, Monte Carlo studies, persistence and the CLI."""
from .config import EventSpec, ExperimentConfig, load_config, parse_config
from .experiments import (ResultRecord, averaging_study, estimate_rare_event, extract_rate,
                          run_experiment, theoretical_rate, wilson_interval)
