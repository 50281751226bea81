# Command-line entry point: python -m abmlens <subcommand> ... --out <dir>
import argparse
import contextlib
import logging
import sys
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from abmlens import __version__
from abmlens.abm_sim import (
    REAL_PARAMETERS,
    VARIABLES,
    SimConfig,
    load_config,
    load_output,
    load_sweep,
    population_series,
    save_output,
    save_sweep,
    simulate,
    sweep,
)
from abmlens.descriptors import shape_summary
from abmlens.diffusion import NoiseSchedule, TrainConfig, load_model, sample, save_model, train
from abmlens.emachine import (
    AnalysisOptions,
    Invariants,
    analyze,
    default_max_block,
    entropy_rate,
    excess_entropy,
    machine_to_dict,
    reconstruct,
    statistical_complexity,
)
from abmlens.helpers.artifacts import (
    RunManifest,
    atomic_output_dir,
    load_manifest,
    read_json,
    utc_timestamp,
    write_csv,
    write_json,
    write_manifest,
)
from abmlens.helpers.table_reader import read_table_with_columns
from abmlens.regimes import (
    PipelineOptions,
    cluster_behaviors,
    detect_regime_shifts,
    elementary_effects,
    load_surface,
    response_surface,
    save_surface,
    save_tensor,
    tensor_from_runs,
    window_samples,
)
from abmlens.report import build_report, export_machine_diagram
from abmlens.settings import configure_logging
from abmlens.symbolize import AggregationSpec, aggregate_series, discretize, load_symbols, save_symbols

logger = logging.getLogger(__name__)

Handler = Callable[[argparse.Namespace, Path], Tuple[List[str], List[int]]]


# ───────────────────────────────
# Argument types
# ───────────────────────────────
def _float_list(text: str) -> List[float]:
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _grid(text: str) -> List[float]:
    """``start:stop:num`` evenly spaced values, stop included."""
    try:
        start, stop, num = text.split(":")
        return np.linspace(float(start), float(stop), int(num)).tolist()
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected start:stop:num, got {text!r}")


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


# ───────────────────────────────
# Shared readers
# ───────────────────────────────
def _base_config(args) -> SimConfig:
    config = load_config(args.config) if args.config else SimConfig()
    if args.seed is not None:
        config = SimConfig.model_validate({**config.model_dump(), "seed": args.seed})
    return config


def _pipeline_options(args) -> PipelineOptions:
    return PipelineOptions(
        variable=args.var,
        agent=args.agent,
        n_bins=args.bins,
        method=args.method,
        analysis=AnalysisOptions(max_order=args.max_order, significance=args.significance),
        snapshot_window=args.window,
        train=TrainConfig(epochs=args.epochs, seed=args.seed or 0),
        max_modes=args.max_modes,
        em_restarts=args.restarts,
        seed=args.seed or 0,
    )


def _read_samples(path: Path, window: float) -> np.ndarray:
    if path.is_dir():
        return window_samples(load_output(path), PipelineOptions(snapshot_window=window))
    frame = read_table_with_columns(path)
    frame = frame.drop(columns=[c for c in ("t", "agent_id") if c in frame.columns])
    return frame.to_numpy(dtype=float)


def _surface_from_args(args):
    param_name, runs = load_sweep(args.sweep)
    spec = AggregationSpec(k=args.k, reducer=args.reducer)
    return param_name, response_surface(runs, _pipeline_options(args), spec)


# ───────────────────────────────
# Subcommands
# ───────────────────────────────
def _cmd_simulate(args, out: Path):
    config = _base_config(args)
    save_output(simulate(config), out)
    return [args.config] if args.config else [], [config.seed]


def _cmd_sweep(args, out: Path):
    config = _base_config(args)
    values = args.values or args.grid
    if not values:
        raise ValueError("sweep needs --values or --grid")
    runs = sweep(config, args.param, values, args.replicates)
    save_sweep(runs, args.param, out)
    return [args.config] if args.config else [], [(config.seed + r) % 2**64 for r in range(args.replicates)]


def _cmd_symbolize(args, out: Path):
    path = Path(args.input)
    if path.is_dir():
        series = population_series(load_output(path), args.var, args.agent)
    else:
        series = read_table_with_columns(path, ["value"])["value"].to_numpy(dtype=float)
    series = aggregate_series(series, AggregationSpec(k=args.k, reducer=args.reducer))
    save_symbols(discretize(series, args.bins, args.method), out)
    return [args.input], []


def _cmd_emachine(args, out: Path):
    seq = load_symbols(args.input)
    if args.history is None:
        machine, invariants = analyze(
            seq, AnalysisOptions(max_order=args.max_order, significance=args.significance)
        )
    else:
        machine = reconstruct(seq, args.history, args.significance)
        max_block = default_max_block(len(seq), seq.alphabet_size, AnalysisOptions().max_block_cap)
        invariants = Invariants(
            entropy_rate=entropy_rate(machine),
            statistical_complexity=statistical_complexity(machine),
            excess_entropy=excess_entropy(seq, max_block),
        )
    write_json(machine_to_dict(machine), out / "machine.json")
    write_json(invariants.model_dump(), out / "invariants.json")
    export_machine_diagram(machine, out / "machine.dot")
    return [args.input], []


def _cmd_diffusion_train(args, out: Path):
    data = _read_samples(Path(args.input), args.window)
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        seed=args.seed or 0,
        hidden_width=args.hidden_width,
        n_hidden=args.n_hidden,
    )
    save_model(train(data, cfg, NoiseSchedule.linear(args.steps)), out)
    return [args.input], [cfg.seed]


def _cmd_diffusion_sample(args, out: Path):
    model = load_model(args.model)
    draws = sample(model, args.n, args.seed or 0)
    frame = pd.DataFrame(draws, columns=[f"y{i}" for i in range(draws.shape[1])])
    write_csv(frame, out / "samples.csv")
    return [args.model], [args.seed or 0]


def _cmd_descriptors(args, out: Path):
    samples = _read_samples(Path(args.input), args.window)
    model = load_model(args.model) if args.model else None
    summary = shape_summary(samples, model, max_modes=args.max_modes, restarts=args.restarts, seed=args.seed or 0)
    write_json(summary.model_dump(), out / "descriptors.json")
    return [args.input] + ([args.model] if args.model else []), [args.seed or 0]


def _cmd_surface(args, out: Path):
    _, surface = _surface_from_args(args)
    save_surface(surface, out)
    return [args.sweep], [args.seed or 0]


def _cmd_regimes(args, out: Path):
    surface = load_surface(args.surface)
    boundaries = detect_regime_shifts(surface, args.field, args.z)
    write_json(
        {
            "field": args.field,
            "z_threshold": args.z,
            "boundaries": boundaries,
            "boundary_thetas": [surface[i].theta for i in boundaries],
        },
        out / "regimes.json",
    )
    return [args.surface], []


def _cmd_cluster(args, out: Path):
    surface = load_surface(args.surface)
    result = cluster_behaviors(
        surface, args.method, args.k, args.eps, args.min_pts, args.fields, args.seed or 0
    )
    write_json(result.model_dump(), out / "clusters.json")
    write_csv(
        pd.DataFrame({"theta": [v.theta for v in surface], "label": result.labels}),
        out / "clusters.csv",
    )
    return [args.surface], [args.seed or 0]


def _cmd_tensor(args, out: Path):
    _, runs = load_sweep(args.sweep)
    save_tensor(tensor_from_runs(runs, args.scales, args.reducer, _pipeline_options(args)), out)
    return [args.sweep], [args.seed or 0]


def _cmd_effects(args, out: Path):
    config = _base_config(args)
    result = elementary_effects(
        config,
        args.params,
        args.delta,
        args.r,
        _pipeline_options(args),
        seed=args.seed or 0,
        num_levels=args.levels,
    )
    write_json(result.model_dump(), out / "effects.json")
    return [args.config] if args.config else [], [config.seed]


def _cmd_report(args, out: Path):
    if args.surface:
        surface = load_surface(args.surface)
        param_name = _sweep_param(args.sweep) if args.sweep else "theta"
    elif args.sweep:
        param_name, surface = _surface_from_args(args)
    else:
        raise ValueError("report needs --sweep or --surface")
    save_surface(surface, out)
    build_report(surface, out, args.var, param_name)
    return [p for p in (args.sweep, args.surface) if p], [args.seed or 0]


def _sweep_param(directory) -> str:
    return read_json(Path(directory) / "sweep.json")["param_name"]


# ───────────────────────────────
# Parser
# ───────────────────────────────
def _parent(*adders) -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    for add in adders:
        add(parent)
    return parent


def _output_flags(p):
    p.add_argument("--out", required=True, help="output directory (replaced atomically)")
    p.add_argument("--seed", type=_seed, default=None)


def _config_flags(p):
    p.add_argument("--config", default=None, help="SimConfig JSON or TOML file")


def _pipeline_flags(p):
    p.add_argument("--var", choices=VARIABLES, default="mobility")
    p.add_argument("--agent", type=int, default=None, help="use one agent's series instead of the mean")
    p.add_argument("--bins", type=int, default=2)
    p.add_argument("--method", choices=["quantile", "uniform"], default="quantile")
    p.add_argument("--max-order", type=int, default=3, help="maximum Markov order tried by BIC")
    p.add_argument("--significance", type=float, default=0.01)
    p.add_argument("--window", type=float, default=0.25, help="final share of ticks pooled as samples")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--max-modes", type=int, default=3)
    p.add_argument("--restarts", type=int, default=50)
    p.add_argument("--k", type=int, default=1, help="aggregation block length")
    p.add_argument("--reducer", choices=["mean", "max", "last"], default="mean")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="abmlens", description="Temporal and distributional characterization of ABM output"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)
    out = _parent(_output_flags)
    config = _parent(_config_flags)
    pipeline = _parent(_pipeline_flags)

    def add(name: str, handler: Handler, parents, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, parents=parents, help=help_text)
        sub.set_defaults(handler=handler)
        return sub

    add("simulate", _cmd_simulate, [out, config], "run the reference ABM once")

    p = add("sweep", _cmd_sweep, [out, config], "simulate a one-parameter sweep")
    p.add_argument("--param", required=True, choices=REAL_PARAMETERS)
    values = p.add_mutually_exclusive_group()
    values.add_argument("--values", type=_float_list, default=None, help="comma-separated values")
    values.add_argument("--grid", type=_grid, default=None, help="start:stop:num")
    p.add_argument("--replicates", type=int, default=1)

    p = add("symbolize", _cmd_symbolize, [out], "discretize a series")
    p.add_argument("--input", required=True, help="simulation directory or CSV with a 'value' column")
    p.add_argument("--var", choices=VARIABLES, default="mobility")
    p.add_argument("--agent", type=int, default=None)
    p.add_argument("--bins", type=int, default=2)
    p.add_argument("--method", choices=["quantile", "uniform"], default="quantile")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--reducer", choices=["mean", "max", "last"], default="mean")

    p = add("emachine", _cmd_emachine, [out], "reconstruct an epsilon-machine")
    p.add_argument("--input", required=True, help="symbols directory or symbols CSV")
    p.add_argument("--history", type=int, default=None, help="fixed history length; BIC order if omitted")
    p.add_argument("--max-order", type=int, default=3)
    p.add_argument("--significance", type=float, default=0.01)

    p = add("diffusion-train", _cmd_diffusion_train, [out], "train a score model")
    p.add_argument("--input", required=True, help="simulation directory or samples CSV")
    p.add_argument("--window", type=float, default=0.25)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden-width", type=int, default=128)
    p.add_argument("--n-hidden", type=int, default=3)
    p.add_argument("--steps", type=int, default=200)

    p = add("diffusion-sample", _cmd_diffusion_sample, [out], "draw samples from a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, default=1000)

    p = add("descriptors", _cmd_descriptors, [out], "geometry descriptors of a sample set")
    p.add_argument("--input", required=True, help="simulation directory or samples CSV")
    p.add_argument("--model", default=None, help="trained model directory for mean_score_norm")
    p.add_argument("--window", type=float, default=0.25)
    p.add_argument("--max-modes", type=int, default=3)
    p.add_argument("--restarts", type=int, default=50)

    p = add("surface", _cmd_surface, [out, pipeline], "descriptor vectors per theta of a sweep")
    p.add_argument("--sweep", required=True)

    p = add("regimes", _cmd_regimes, [out], "flag regime boundaries on a surface")
    p.add_argument("--surface", required=True)
    p.add_argument("--field", default="h_mu")
    p.add_argument("--z", type=float, default=2.0)

    p = add("cluster", _cmd_cluster, [out], "cluster surface descriptor vectors")
    p.add_argument("--surface", required=True)
    p.add_argument("--method", choices=["kmeans", "gmm", "hierarchical", "dbscan"], default="kmeans")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--eps", type=float, default=0.5)
    p.add_argument("--min-pts", type=int, default=5)
    p.add_argument("--fields", type=lambda s: s.split(","), default=None)

    p = add("tensor", _cmd_tensor, [out, pipeline], "scale-parameter descriptor tensor")
    p.add_argument("--sweep", required=True)
    p.add_argument("--scales", type=_int_list, required=True, help="comma-separated block lengths")

    p = add("effects", _cmd_effects, [out, config, pipeline], "Morris elementary effects")
    p.add_argument("--params", type=lambda s: s.split(","), required=True)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--r", type=int, default=4)
    p.add_argument("--levels", type=int, default=4, help="Morris grid levels (even)")

    p = add("report", _cmd_report, [out, pipeline], "two-axis summary table and plots")
    p.add_argument("--sweep", default=None)
    p.add_argument("--surface", default=None)

    p = commands.add_parser("rerun", help="re-execute a manifest into a new directory")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    return parser


# ───────────────────────────────
# Entry
# ───────────────────────────────
def _config_echo(args: argparse.Namespace) -> dict:
    return {
        key: value
        for key, value in vars(args).items()
        if key not in ("handler", "out", "command") and not callable(value)
    }


def _replace_out(argv: List[str], out: str) -> List[str]:
    replaced, skip = [], False
    for item in argv:
        if skip:
            skip = False
            continue
        if item == "--out":
            skip = True
            continue
        if item.startswith("--out="):
            continue
        replaced.append(item)
    return replaced + ["--out", out]


def _execute(args: argparse.Namespace, argv: List[str]) -> int:
    if args.command == "rerun":
        manifest = load_manifest(args.manifest)
        out = str(Path(args.out).resolve())
        logger.info(f"Re-running {manifest.command} from {args.manifest} in {manifest.cwd}")
        # Relative paths in the recorded argv resolve against the original working directory.
        with contextlib.chdir(manifest.cwd):
            return main(_replace_out(manifest.argv, out))

    manifest = RunManifest(
        command=args.command, argv=argv, config=_config_echo(args), started_at=utc_timestamp()
    )
    with atomic_output_dir(args.out) as scratch:
        inputs, seeds = args.handler(args, scratch)
        manifest.inputs = [str(p) for p in inputs]
        manifest.seeds = seeds
        write_manifest(manifest, scratch)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        configure_logging()
        return _execute(args, argv)
    except (ValueError, ValidationError, FileNotFoundError) as e:
        logger.error(f"{args.command} rejected its input: {str(e)}")
        print(f"abmlens {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception:
        logger.exception(f"{args.command} failed")
        return 1


if __name__ == "__main__":
    sys.exit(main())
