"""Command-line interface.

    latentdrive collect           --run RUN [--config FILE] [--seed N] [--driver scripted|random]
    latentdrive train-vae         --run RUN
    latentdrive train-rnn         --run RUN
    latentdrive train-controller  --run RUN [--resume]
    latentdrive evaluate          --run RUN [--conditions ...] [--pairs N]
    latentdrive render            --run RUN [--track-seed N --palette-seed N --start X --difficulty D]
    latentdrive report            --run RUN [--csv]

Every RunConfig key is also a flag (``--vae-epochs 3``).  The master seed
comes from ``--seed`` or the LATENTDRIVE_SEED environment variable.
Exit codes: 0 ok, 2 config error, 3 missing/mismatched dependency,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .. import cmaes
from .. import drivesim as ds
from ..vae import TrainingError
from . import config as rc
from .episodes import EpisodeSpec
from .stages import (CONDITIONS, DependencyError, evaluate_run, render_episode, run_collect, run_stage,
                     training_reconstruction_error)

log = logging.getLogger("latentdrive")

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERICAL = 0, 2, 3, 4

COVERAGE_NOTE = ("note: training data comes from a scripted pure-pursuit driver weaving around the "
                 "centerline, not from human driving; its state coverage differs accordingly.")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--run", type=Path, required=True, help="run directory")
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("-v", "--verbose", action="store_true")
    group = p.add_argument_group("config overrides")
    for f in fields(rc.RunConfig):
        group.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}", metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentdrive", description="world-model driving pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [("collect", "collect driving episodes"), ("train-vae", "train the VAE"),
                           ("train-rnn", "encode the dataset and train the LSTM"),
                           ("train-controller", "evolve the controller with CMA-ES"),
                           ("evaluate", "success rates per condition"),
                           ("render", "dump observation/reconstruction frames of one episode"),
                           ("report", "print the evaluation table")]:
        p = sub.add_parser(name, help=helptext)
        _add_config_flags(p)
        if name == "train-controller":
            p.add_argument("--resume", action="store_true", help="continue from es_state.bin")
        elif name == "evaluate":
            p.add_argument("--conditions", nargs="+", choices=CONDITIONS, default=list(CONDITIONS))
            p.add_argument("--pairs", type=int, help="start-goal pairs per condition")
        elif name == "render":
            p.add_argument("--track-seed", type=int, default=0)
            p.add_argument("--palette-seed", type=int, default=0)
            p.add_argument("--start", type=float, default=0.0)
            p.add_argument("--difficulty", choices=("train", "test"), default="train")
            p.add_argument("--out", type=Path)
        elif name == "report":
            p.add_argument("--csv", action="store_true", help="emit CSV instead of a table")
    return parser


def _config(args) -> rc.RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return rc.load(args.config, overrides)


def _dispatch(args) -> int:
    cfg = _config(args)
    run: Path = args.run
    cmd = args.command
    if cmd == "collect":
        manifest = run_collect(run, cfg)
        print(f"wrote {manifest}")
    elif cmd == "train-vae":
        _, history = run_stage("vae", run, cfg)
        print(f"vae: first epoch {history[0][3]:.5f}, final epoch {history[-1][3]:.5f}")
    elif cmd == "train-rnn":
        _, history = run_stage("rnn", run, cfg)
        print(f"rnn: first epoch {history[0][1]:.5f}, final epoch {history[-1][1]:.5f}")
    elif cmd == "train-controller":
        _, history = run_stage("controller", run, cfg, resume=args.resume)
        print(f"controller: {len(history)} generations, last best fitness {history[-1].best_fitness:.2f}")
    elif cmd == "evaluate":
        report = evaluate_run(run, cfg, conditions=tuple(args.conditions), n_pairs=args.pairs)
        print(report.to_table(), end="")
    elif cmd == "render":
        spec = EpisodeSpec(args.track_seed, args.palette_seed, args.start, args.difficulty)
        info = render_episode(run, cfg, spec, args.out)
        train_err = training_reconstruction_error(run, cfg)
        print(f"{info['frames']} frames to {info['dir']}; mean abs error {info['mean_abs_error']:.2f} "
              f"(training set {train_err:.2f})")
    elif cmd == "report":
        path = run / ("report.csv" if args.csv else "report.txt")
        if not path.exists():
            raise DependencyError(f"{path} missing (run evaluate first)")
        text = path.read_text(encoding="utf-8")
        print(text if args.csv else text + COVERAGE_NOTE)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (rc.ConfigError, ds.ConfigError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DependencyError as exc:
        log.error("dependency error: %s", exc)
        return EXIT_DEPENDENCY
    except (TrainingError, cmaes.NumericalError, FloatingPointError) as exc:
        log.error("numerical error: %s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
