#!/usr/bin/python
import argparse
import json
import logging
import sys
from pathlib import Path

from dotenv import find_dotenv, load_dotenv

from rdmdp import __version__
from rdmdp.exceptions import ConfigError, RdmdpError
from rdmdp.harness import EXPERIMENTS, load_spec, pde_dump, rate_dump, replay, run_experiment, simulate_dump

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    handlers=[logging.StreamHandler()],
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_FAIL = 2


def create_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Experiment file (.json or .toml)")
    common.add_argument("--seed", type=int, help="Master seed")
    common.add_argument("--replicas", type=int, help="Replicas per side length")
    common.add_argument("--out", type=Path, help="Output directory (default $RDMDP_OUT or ./runs)")
    common.add_argument("--workers", type=int, help="Worker threads (default $RDMDP_WORKERS)")
    common.add_argument("--debug", action="store_true", help="Log at DEBUG level")

    parser = argparse.ArgumentParser(
        prog="rdmdp", description="Moderate deviations of a reaction-diffusion lattice gas"
    )
    parser.add_argument("--version", action="version", version=f"rdmdp v{__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", parents=[common], help="Dump one trajectory")
    sim.add_argument("--tilt", action="store_true", help="Run the tilted dynamics from nu_{phi,rho*}")
    sub.add_parser("pde", parents=[common], help="Solve the forward equation for (phi, H)")
    rate = sub.add_parser("rate", parents=[common], help="Q_0, Q_dyn and Q_T of a density path")
    rate.add_argument("--mu", type=Path, help="Density path file; default is the forward solution")
    exp = sub.add_parser("experiment", parents=[common], help="Run a named experiment")
    exp.add_argument("kind", choices=sorted(EXPERIMENTS))
    rep = sub.add_parser("replay", parents=[common], help="Re-run a manifest and compare")
    rep.add_argument("manifest", type=Path)
    return parser


def _run(args: argparse.Namespace) -> int:
    overrides = {"seed": args.seed, "replicas": args.replicas, "out": args.out}
    match args.command:
        case "experiment":
            spec = load_spec(args.config, overrides | {"kind": args.kind})
            report = run_experiment(spec, args.workers)
            print(json.dumps({"kind": report.kind, "verdict": report.verdict}))
            return EXIT_FAIL if report.verdict == "FAIL" else EXIT_OK
        case "simulate":
            path = simulate_dump(load_spec(args.config, overrides), tilt=args.tilt)
            print(path)
        case "pde":
            print(pde_dump(load_spec(args.config, overrides)))
        case "rate":
            breakdown = rate_dump(load_spec(args.config, overrides), args.mu)
            print(breakdown.model_dump_json(indent=2))
        case "replay":
            same, diffs = replay(args.manifest, args.workers)
            for line in diffs:
                print(line)
            return EXIT_OK if same else EXIT_FAIL
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    load_dotenv(find_dotenv())
    print(f"rdmdp v{__version__}", file=sys.stderr)
    args = create_parser().parse_args(argv)
    if args.debug:
        logging.getLogger().setLevel(logging.DEBUG)
    try:
        code = _run(args)
    except ConfigError as e:
        logger.error(f"configuration error: {e}")
        code = EXIT_CONFIG
    except RdmdpError as e:
        logger.error(f"{type(e).__name__}: {e}")
        code = EXIT_CONFIG
    if argv is None:
        sys.exit(code)
    return code


if __name__ == "__main__":
    main()
