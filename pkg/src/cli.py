"""Command line entry point.

Exit codes: 0 success, 1 error, 2 usage error, 3 run finished with item-level
failures recorded as UNDEFINED answers.
"""
import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import structlog
from dotenv import load_dotenv

from src.backends import StochasticBackendSpec
from src.config import ExperimentConfig, load_config, load_price_sheet
from src.core import PriceSheet, Regime, enumerate_configs
from src.errors import ConfigError, PipelineError
from src.handoff import DEFAULT_TEMPLATES, load_templates
from src.pareto import frontiers_by_dataset, read_config_points, write_frontier_csv, write_plot_data_csv
from src.reports import build_report, write_report
from src.runner import PipelineRunner, RunResult
from src.sim import calibrate, chain_profiles
from src.storage import MANIFEST_NAME, load_run, read_manifest
from src.utils import configure_logging, load_dataset_file

logger = structlog.get_logger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 3

FRONTIER_NAME = "frontier.csv"
PLOT_DATA_NAME = "plot_data.csv"


# --- validate-dataset --------------------------------------------------------


def cmd_validate_dataset(args: argparse.Namespace) -> int:
    dataset = load_dataset_file(args.file)
    print(f"{args.file}: ok, {len(dataset)} items, sha256 {dataset.content_hash()[:12]}")
    return EXIT_OK


# --- run ---------------------------------------------------------------------


def _run_one(
    runner: PipelineRunner,
    out_dir: Path,
    resume: bool,
    dataset,
    start,
) -> RunResult:
    if resume and (out_dir / MANIFEST_NAME).exists():
        return runner.resume(out_dir, dataset)
    return start(runner, out_dir)


def _run_seed(run_dir: Path, args: argparse.Namespace) -> Optional[int]:
    """The seed a run uses; a resumed run keeps the seed it started with."""
    if not (args.resume and (run_dir / MANIFEST_NAME).exists()):
        return args.seed
    recorded = read_manifest(run_dir).seed
    if args.seed is not None and args.seed != recorded:
        raise ConfigError(f"{run_dir}: run was started with seed {recorded}; --seed {args.seed} conflicts")
    return recorded


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    regime = Regime(args.regime)
    dataset = load_dataset_file(args.dataset)
    dataset_path = str(args.dataset)
    prices = load_price_sheet(args.prices)

    templates_dir = args.templates
    if args.resume and not args.all_configs and (Path(args.out) / MANIFEST_NAME).exists():
        # a resumed run keeps the templates it started with
        templates_dir = read_manifest(args.out).templates_dir
    templates = load_templates(templates_dir) if templates_dir else DEFAULT_TEMPLATES

    runners: dict[Optional[int], PipelineRunner] = {}

    def runner_for(seed: Optional[int]) -> PipelineRunner:
        if seed not in runners:
            runners[seed] = PipelineRunner(
                config.build_backends(seed=seed),
                prices=prices,
                templates=templates,
                parallelism=args.parallelism or config.pipeline.parallelism,
                timeout=config.pipeline.timeout,
                progress=not args.quiet,
                templates_dir=templates_dir,
                seed=seed,
            )
        return runners[seed]

    out = Path(args.out)

    jobs = []
    if regime == Regime.BASELINE:
        if args.all_configs:
            models = config.model_ids
        else:
            key = args.model or config.pipeline.baseline
            if not key:
                raise ConfigError("the baseline regime needs --model or [pipeline].baseline")
            models = [config.model(key)]
        for model in models:
            run_dir = out / model.key if args.all_configs else out
            jobs.append((run_dir, lambda r, d, m=model: r.run_baseline(m, dataset, d, dataset_path)))
    else:
        if args.all_configs:
            configs = enumerate_configs(config.model_ids, regime)
        else:
            configs = [config.pipeline_config(regime, args.planner, args.executor, args.critic)]
        for pipeline in configs:
            run_dir = out / pipeline.label if args.all_configs else out
            jobs.append((run_dir, lambda r, d, c=pipeline: r.run_pipeline(c, dataset, d, dataset_path)))

    partial = 0
    for run_dir, start in jobs:
        result = _run_one(runner_for(_run_seed(run_dir, args)), run_dir, args.resume, dataset, start)
        m = result.manifest
        print(f"{run_dir}: {m.label} {m.regime.value}, {m.traced_count}/{m.item_count} traced, "
              f"{m.failed_items} items with failed stages")
        partial += result.partial
    return EXIT_PARTIAL if partial else EXIT_OK


# --- report ------------------------------------------------------------------


def _run_dirs(paths: Sequence[str]) -> list[Path]:
    """Run directories given directly or one level below a parent directory."""
    found = []
    for raw in paths:
        path = Path(raw)
        if (path / MANIFEST_NAME).exists():
            found.append(path)
            continue
        children = sorted(p.parent for p in path.glob(f"*/{MANIFEST_NAME}"))
        if not children:
            raise ConfigError(f"{path}: no run manifest found")
        found.extend(children)
    return found


def _merged_prices(manifests) -> PriceSheet:
    rows = {}
    for manifest in manifests:
        for key, row in manifest.prices.rows.items():
            if key in rows and rows[key] != row:
                logger.warning("runs priced a model differently; using the later sheet", model=key)
            rows[key] = row
    return PriceSheet(rows=rows)


def cmd_report(args: argparse.Namespace) -> int:
    manifests, traces = [], []
    sizes: dict[str, int] = {}
    for run_dir in _run_dirs(args.traces):
        manifest, run_traces = load_run(run_dir)
        if not manifest.complete:
            logger.warning("reporting an incomplete run", run_dir=str(run_dir),
                           traced=len(run_traces), items=manifest.item_count)
        known = sizes.setdefault(manifest.dataset_name, manifest.item_count)
        if known != manifest.item_count:
            raise ConfigError(
                f"dataset {manifest.dataset_name!r} has {known} items in one run and "
                f"{manifest.item_count} in {run_dir}"
            )
        manifests.append(manifest)
        traces.extend(run_traces)

    prices = load_price_sheet(args.prices) if args.prices else _merged_prices(manifests)
    tables = build_report(traces, prices, sizes)
    path = write_report(args.out, tables)
    print(f"{len(traces)} traces from {len(manifests)} runs; report in {path}")
    return EXIT_OK


# --- pareto ------------------------------------------------------------------


def cmd_pareto(args: argparse.Namespace) -> int:
    points = read_config_points(args.report)
    if not points:
        raise ConfigError(f"{args.report}: no configuration with a known cost")
    out = Path(args.out) if args.out else Path(args.report).parent
    frontiers = frontiers_by_dataset(points)
    on_frontier = [p for front in frontiers.values() for p in front]
    write_frontier_csv(out / FRONTIER_NAME, on_frontier)
    write_plot_data_csv(out / PLOT_DATA_NAME, points, on_frontier)
    for dataset, front in frontiers.items():
        labels = ", ".join(f"{p.label}{'/' + p.regime if p.regime else ''}" for p in front)
        print(f"{dataset or 'all'}: {len(front)} of {sum(p.dataset == dataset for p in points)} on the frontier ({labels})")
    return EXIT_OK


# --- simulate ----------------------------------------------------------------


def _profiles_from_config(config: ExperimentConfig, args: argparse.Namespace):
    keys = (
        args.planner or config.pipeline.planner,
        args.executor or config.pipeline.executor,
        args.critic or config.pipeline.critic,
    )
    if not all(keys):
        raise ConfigError("simulation needs planner, executor and critic model keys")
    profiles = {}
    for key in set(keys):
        entry = next((m for m in config.models if m.key == key), None)
        if entry is None:
            raise ConfigError(f"unknown model key {key!r}")
        spec = config.backends[entry.backend]
        if not isinstance(spec, StochasticBackendSpec):
            raise ConfigError(f"model {key!r} does not use a stochastic backend")
        profiles[key] = spec.profile()
    return profiles, keys


def cmd_simulate(args: argparse.Namespace) -> int:
    if args.profiles:
        profiles, keys = _profiles_from_config(load_config(args.profiles), args)
    else:
        profiles = chain_profiles(args.q, args.r_e, args.h_e, args.r_c, args.h_c)
        keys = ("A", "B", "C")
    report = calibrate(
        profiles,
        keys,
        n_items=args.n,
        seed=args.seed,
        out_dir=args.out,
        parallelism=args.parallelism or 1,
        prices=load_price_sheet(args.prices),
        overwrite=args.force,
    )
    print(report.summary(), end="")
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def _probability(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not within [0, 1]")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"{text} is not a positive integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="accountable-pipeline",
        description="Run, trace and analyse Planner/Executor/Critic agent pipelines.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate-dataset", help="check a JSONL dataset")
    p.add_argument("file")
    p.set_defaults(func=cmd_validate_dataset)

    p = sub.add_parser("run", help="run a baseline or pipeline over a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--regime", required=True, choices=[r.value for r in Regime])
    p.add_argument("--out", required=True)
    p.add_argument("--parallelism", type=_positive_int)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--planner")
    p.add_argument("--executor")
    p.add_argument("--critic")
    p.add_argument("--model", help="model key for the baseline regime")
    p.add_argument("--all-configs", action="store_true",
                   help="run every model (baseline) or every ordered triple into <out>/<label>/")
    p.add_argument("--templates", help="directory of prompt template overrides")
    p.add_argument("--prices")
    p.add_argument("--seed", type=int, help="overrides stochastic backend seeds")
    p.add_argument("--quiet", action="store_true", help="no progress bar")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="metric tables from one or more runs")
    p.add_argument("--traces", required=True, nargs="+", help="run directories or their parents")
    p.add_argument("--prices")
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pareto", help="accuracy-vs-cost frontier from a configs CSV")
    p.add_argument("--report", required=True, help="configs.csv written by the report command")
    p.add_argument("--out", help="defaults to the directory of --report")
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("simulate", help="calibrate a stochastic pipeline against the closed form")
    p.add_argument("--profiles", help="backend config with stochastic backends")
    p.add_argument("--n", type=_positive_int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="simulation")
    p.add_argument("--parallelism", type=_positive_int)
    p.add_argument("--planner")
    p.add_argument("--executor")
    p.add_argument("--critic")
    p.add_argument("--prices")
    p.add_argument("--force", action="store_true", help="replace an earlier simulation in --out")
    p.add_argument("--q", type=_probability, default=0.6, help="planner correctness")
    p.add_argument("--r-e", type=_probability, default=0.5, help="executor repair probability")
    p.add_argument("--h-e", type=_probability, default=0.1, help="executor harm probability")
    p.add_argument("--r-c", type=_probability, default=0.5, help="critic repair probability")
    p.add_argument("--h-c", type=_probability, default=0.1, help="critic harm probability")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
