"""Command-line entry point: aoi-whittle {balpha,relaxed,fluid,compare,kurtz}."""

import argparse
import logging
import sys

from pydantic import ValidationError
from rich.status import Status

from aoi_whittle import harness, settings
from aoi_whittle.errors import AcceptanceError, InvalidParameterError, SpecFileError
from aoi_whittle.experiment_spec import (
    BalphaParams,
    ExperimentKind,
    ExperimentSpec,
    FluidParams,
    KurtzParams,
    SweepParams,
    load_spec,
)
from aoi_whittle.log import console, setup_logging
from aoi_whittle.policy_core import ClassSpec, SystemConfig
from aoi_whittle.results import ResultWriter

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_ACCEPTANCE = 3

SUBCOMMAND_KIND = {
    "balpha": ExperimentKind.BALPHA_TABLE,
    "relaxed": ExperimentKind.RELAXED_SOLVE,
    "fluid": ExperimentKind.FLUID_RUN,
    "compare": ExperimentKind.SIM_SWEEP,
    "kurtz": ExperimentKind.KURTZ,
}


def _pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'p_lo,p_hi', got {text!r}")
    return a, b


class CliParser(argparse.ArgumentParser):
    """Argument parser that raises InvalidParameterError on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise InvalidParameterError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(
        prog="aoi-whittle",
        description="Whittle index scheduling for age of information: relaxed bound, fluid limit, simulation.",
    )
    common = CliParser(add_help=False)
    common.add_argument("--config", help="JSON experiment file; its parameters replace the flags below")
    common.add_argument("--out", default=None, help=f"output directory (default {settings.OUT_DIR})")
    common.add_argument("--seed", type=int, default=0, help="base seed")
    common.add_argument("--no-timestamp", action="store_true", help="omit generated_at from metadata files")
    common.add_argument("--check", action="store_true", help="evaluate acceptance criteria, exit 3 on failure")
    common.add_argument("--workers", type=int, default=None, help=f"worker processes (default {settings.WORKERS})")
    common.add_argument("--log-level", default=settings.LOG_LEVEL)

    system = CliParser(add_help=False)
    system.add_argument("--p", type=float, nargs="+", default=[0.8, 0.5], help="success probability per class")
    system.add_argument("--gamma", type=float, nargs="+", default=None, help="population share per class")
    system.add_argument("--alpha", type=float, default=0.5, help="scheduling budget M/N")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("balpha", parents=[common], help="B_alpha table")
    p.add_argument("--pairs", type=_pair, nargs="*", default=[], help="probability pairs 'p_lo,p_hi'")
    p.add_argument("--paper", "--published", dest="published", action="store_true",
                   help="include the ten published pairs")

    sub.add_parser("relaxed", parents=[common, system], help="solve the relaxed problem")

    p = sub.add_parser("fluid", parents=[common, system], help="iterate the fluid model")
    p.add_argument("--init", choices=["zstar", "all_age_one", "random", "file"], default="random")
    p.add_argument("--init-file", default=None, help="CSV class,age,mass for --init file")
    p.add_argument("--states", type=int, default=1, help="number of random initial states")
    p.add_argument("--horizon", type=int, default=5000)
    p.add_argument("--tol", type=float, default=1e-6)

    p = sub.add_parser("compare", parents=[common, system], help="simulate and compare with the relaxed bound")
    p.add_argument("--n-list", type=int, nargs="+", default=[8, 16, 32, 64, 128, 256])
    p.add_argument("--horizon", type=int, default=200_000)
    p.add_argument("--seeds", type=int, default=8, help="number of seeds, starting at --seed")
    p.add_argument("--policy", choices=["whittle", "mixed_threshold", "max_age_greedy"], default="whittle")
    p.add_argument("--burn-in", type=float, default=None)

    p = sub.add_parser("kurtz", parents=[common, system], help="concentration around the fluid path")
    p.add_argument("--n-list", type=int, nargs="+", default=[16, 64, 256])
    p.add_argument("--horizon", type=int, default=200)
    p.add_argument("--seeds", type=int, default=200, help="number of seeds, starting at --seed")
    p.add_argument("--mu", type=float, default=None, help="deviation level (default: twice the median at the largest N)")
    return parser


def system_from_args(args) -> SystemConfig:
    gammas = args.gamma or [1.0 / len(args.p)] * len(args.p)
    if len(gammas) != len(args.p):
        raise InvalidParameterError(f"{len(args.p)} probabilities but {len(gammas)} shares")
    return SystemConfig(
        classes=tuple(ClassSpec(p=p, gamma=g) for p, g in zip(args.p, gammas)),
        alpha=args.alpha,
    )


def spec_from_args(args) -> ExperimentSpec:
    """The experiment described by --config, or else by the command-line flags."""
    kind = SUBCOMMAND_KIND[args.command]
    if args.config:
        spec = load_spec(args.config)
        if spec.kind is not kind:
            raise SpecFileError(f"file describes '{spec.kind.value}', command is '{args.command}'", args.config)
        return spec

    seeds = tuple(range(args.seed, args.seed + getattr(args, "seeds", 0)))
    match kind:
        case ExperimentKind.BALPHA_TABLE:
            return ExperimentSpec(kind=kind, balpha=BalphaParams(pairs=tuple(args.pairs), published=args.published))
        case ExperimentKind.RELAXED_SOLVE:
            return ExperimentSpec(kind=kind, system=system_from_args(args))
        case ExperimentKind.FLUID_RUN:
            return ExperimentSpec(kind=kind, system=system_from_args(args), fluid=FluidParams(
                init=args.init, init_file=args.init_file, seed=args.seed, states=args.states,
                horizon=args.horizon, tol=args.tol))
        case ExperimentKind.SIM_SWEEP:
            return ExperimentSpec(kind=kind, system=system_from_args(args), sweep=SweepParams(
                n_list=tuple(args.n_list), horizon=args.horizon, seeds=seeds, policy=args.policy,
                burn_in=args.burn_in))
        case ExperimentKind.KURTZ:
            return ExperimentSpec(kind=kind, system=system_from_args(args), kurtz=KurtzParams(
                n_list=tuple(args.n_list), horizon=args.horizon, seeds=seeds, mu=args.mu))


def run_balpha(spec: ExperimentSpec, writer, workers, check):
    params = spec.section()
    rows = harness.cmd_balpha_table(params.pairs, params.published, writer)
    if check:
        harness.check_balpha(rows)


def run_relaxed(spec: ExperimentSpec, writer, workers, check):
    solution = harness.cmd_relaxed(spec.system, writer)
    if check:
        harness.check_relaxed(solution)


def run_fluid(spec: ExperimentSpec, writer, workers, check):
    f = spec.section()
    with Status("Iterating fluid model...", console=console, spinner="dots"):
        runs = harness.cmd_fluid(spec.system, f.init, f.horizon, f.tol, f.seed, f.states,
                                 f.init_file, f.max_age, writer)
    if check:
        harness.check_fluid(runs)


def run_compare(spec: ExperimentSpec, writer, workers, check):
    s = spec.section()
    with Status("Simulating...", console=console, spinner="dots"):
        rows, _ = harness.cmd_compare(spec.system, s.n_list, s.horizon, s.seeds, s.policy,
                                      s.burn_in, workers, writer)
    if check:
        harness.check_compare(rows)


def run_kurtz(spec: ExperimentSpec, writer, workers, check):
    k = spec.section()
    with Status("Simulating...", console=console, spinner="dots"):
        _, rows = harness.cmd_kurtz(spec.system, k.n_list, k.horizon, k.seeds, k.mu,
                                    k.initial, workers, writer)
    if check:
        harness.check_kurtz(rows)


COMMAND_HANDLERS = {
    ExperimentKind.BALPHA_TABLE: run_balpha,
    ExperimentKind.RELAXED_SOLVE: run_relaxed,
    ExperimentKind.FLUID_RUN: run_fluid,
    ExperimentKind.SIM_SWEEP: run_compare,
    ExperimentKind.KURTZ: run_kurtz,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except InvalidParameterError as e:
        console.print(f"[bold red]Invalid input:[/bold red] {e}")
        return EXIT_VALIDATION
    setup_logging(args.log_level)

    try:
        spec = spec_from_args(args)
        out_dir = args.out or spec.output.dir or settings.OUT_DIR
        timestamp = spec.output.timestamp and not args.no_timestamp
        workers = args.workers if args.workers is not None else settings.WORKERS
        writer = ResultWriter(out_dir, args.command, timestamp=timestamp)
        COMMAND_HANDLERS[spec.kind](spec, writer, workers, args.check)
    except (ValidationError, InvalidParameterError, SpecFileError) as e:
        console.print(f"[bold red]Invalid input:[/bold red] {e}")
        return EXIT_VALIDATION
    except AcceptanceError as e:
        console.print(f"[bold red]Check failed:[/bold red] {e}")
        return EXIT_ACCEPTANCE
    except Exception as e:
        logger.debug("unhandled error", exc_info=True)
        console.print(f"[bold red]Error:[/bold red] {e}")
        return EXIT_RUNTIME

    if args.check:
        console.print("[bold green]Check passed.[/bold green]")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
