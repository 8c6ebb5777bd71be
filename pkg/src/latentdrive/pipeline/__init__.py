"""End-to-end orchestration: collection, staged training, evaluation, CLI."""
from .config import ConfigError, RunConfig
from .episodes import EpisodeRecord, EpisodeSpec, collect
from .stages import (CONDITIONS, DependencyError, EvalReport, evaluate, evaluate_run, render_episode,
                     run_collect, run_stage)

__all__ = ["ConfigError", "RunConfig", "EpisodeRecord", "EpisodeSpec", "collect", "CONDITIONS",
           "DependencyError", "EvalReport", "evaluate", "evaluate_run", "render_episode", "run_collect",
           "run_stage"]
