import argparse
import logging
import os
import sys
from typing import Dict, List, Optional

from src.config import ConfigError, load_config
from src.pipeline import UpstreamMissingError, run_pipeline
from src.synthetic_world import WorldError
from src.training import DivergenceDetected

logger = logging.getLogger("coupledcast")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_UPSTREAM = 3
EXIT_DIVERGED = 4


def _parse_sets(pairs: Optional[List[str]]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got '{pair}'")
        overrides[key.strip()] = value.strip()
    return overrides


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON lab config merged over src/lab_config.json")
    common.add_argument("--run-name", help="Run directory name under the runs root")
    common.add_argument("--runs-dir", help="Runs root (default: $COUPLEDCAST_RUNS_DIR or ./runs)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a dotted config field, e.g. rollout.horizon=50")

    parser = argparse.ArgumentParser(prog="coupledcast", description="Coupled multi-sphere emulator lab")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="Integrate the synthetic world and write the dataset")
    p = sub.add_parser("pretrain", parents=[common], help="Pretrain sphere engines on ground-truth boundaries")
    p.add_argument("--engine", action="append", help="Sphere id (repeatable; default: all engines)")
    sub.add_parser("train-corrector", parents=[common], help="Train the corrector against frozen engines")
    p = sub.add_parser("rollout", parents=[common], help="Roll out coupled, uncorrected and truth-boundary series")
    p.add_argument("--horizon", type=int)
    p.add_argument("--ics", type=int)
    p.add_argument("--no-corrector", action="store_true", help="Skip the corrected series")
    sub.add_parser("evaluate", parents=[common], help="Metrics, extremes and summary from rollout traces")
    p = sub.add_parser("spectrum", parents=[common], help="Radial energy spectra at one lead")
    p.add_argument("--lead", type=int)
    sub.add_parser("theory-check", parents=[common], help="Validate the error bounds on linear testbeds")
    p = sub.add_parser("ablation", parents=[common], help="Train encoder variants of one engine and compare them with and without the corrector")
    p.add_argument("--engine", dest="ablation_engine", help="Sphere whose engine is ablated")
    p = sub.add_parser("pipeline", parents=[common], help="Run several stages in dependency order")
    p.add_argument("--stages", help="Comma-separated stage names (default: all)")
    return parser


def _command_overrides(args: argparse.Namespace) -> Dict[str, str]:
    overrides = _parse_sets(args.set)
    if args.run_name:
        overrides["run_name"] = args.run_name
    if getattr(args, "horizon", None) is not None:
        overrides["rollout.horizon"] = str(args.horizon)
    if getattr(args, "ics", None) is not None:
        overrides["rollout.ics"] = str(args.ics)
    if getattr(args, "no_corrector", False):
        overrides["corrector.enabled"] = "false"
    if getattr(args, "lead", None) is not None:
        overrides["evaluation.spectrum_lead"] = str(args.lead)
    if getattr(args, "ablation_engine", None):
        overrides["ablation.engine"] = args.ablation_engine
    return overrides


def _command_stages(args: argparse.Namespace) -> Optional[List[str]]:
    if args.command == "pipeline":
        return args.stages.split(",") if args.stages else None
    if args.command == "pretrain":
        return [f"pretrain:{e}" for e in args.engine] if args.engine else ["pretrain"]
    return [args.command]


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = _command_overrides(args)
        cfg = load_config(args.config, overrides)
        run_dir = None
        if args.runs_dir:
            run_dir = os.path.join(args.runs_dir, cfg.run_name)
        manifest = run_pipeline(cfg, _command_stages(args), run_dir=run_dir, overrides=overrides)
        for name, record in manifest.stages.items():
            print(f"  {name:<20} {record.status}")
        return EXIT_OK
    except (ConfigError, WorldError) as e:
        logger.error(f"❌ configuration error: {e}")
        return EXIT_CONFIG
    except UpstreamMissingError as e:
        logger.error(f"❌ upstream stage missing: {e}")
        return EXIT_UPSTREAM
    except DivergenceDetected as e:
        logger.error(f"🚨 divergence detected: {e}")
        return EXIT_DIVERGED
    except Exception as e:
        logger.exception(f"❌ An unexpected error occurred: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
