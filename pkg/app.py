import argparse
import os
import sys
from zipfile import ZipFile

from rich.console import Console
from rich.table import Table

from config import APP_TITLE, OUTPUT_DIR, ROOT_SEED, WORKERS, config_hash
from logger import log_to_file, setup_logger
from utils.file_loader import load_run_config, save_network
from utils.harness import (BASELINE_METHODS, RL_METHODS, ScenarioSpec, evaluate, generalization_matrix,
                           regime_comparison, train)
from utils.reports import emit_reports, summary_frame
from utils.roadnet import generate_grid_network, generate_random_network
from utils.validator import protocol_warnings, validate_network, validate_run_config, write_validation_report

# ─────────────────────────────────────────────────────────────────────────────
# Setup logger and console
logger = setup_logger("app")
console = Console()

LOGGED_MODULES = ("app", "roadnet", "simcore", "obsgraph", "autodiff", "gcnmodel", "agents", "harness",
                  "reports", "file_loader", "validator")
METHODS = BASELINE_METHODS + RL_METHODS


def _print_table(title, df, columns=None):
    table = Table(title=title)
    columns = columns or list(df.columns)
    for col in columns:
        table.add_column(str(col))
    for row in df[columns].itertuples(index=False):
        table.add_row(*[f"{v:.2f}" if isinstance(v, float) else str(v) for v in row])
    console.print(table)


def _load_config(args):
    cfg = load_run_config(args.config)
    issues = validate_run_config(cfg)
    if issues:
        for check, key, issue in issues:
            console.print(f"[red]{check}[/red] {key}: {issue}")
        raise SystemExit(2)
    for warning in protocol_warnings(cfg):
        logger.warning(warning)
    return cfg


def _checkpoints(directory, methods):
    needed = set()
    for m in methods:
        needed |= {"rglight": {"igrl", "dgrl"}}.get(m, {m} if m in RL_METHODS else set())
    return {agent: os.path.join(directory, f"{agent}.ckpt.json") for agent in sorted(needed)}


def _bundle(paths, out_dir):
    """Zip every report file next to the outputs."""
    zip_path = os.path.join(out_dir, "reports.zip")
    with ZipFile(zip_path, "w") as zipf:
        for path in paths:
            zipf.write(path, arcname=os.path.relpath(path, out_dir))
    logger.info(f"Bundled {len(paths)} file(s) into: {zip_path}")
    return zip_path


# ─────────────────────────────────────────────────────────────────────────────
# Subcommands

def cmd_netgen(args):
    cfg = _load_config(args)
    net = cfg["network"]
    kwargs = dict(lanes_per_route=args.lanes or net["lanes_per_route"], speed_limit=net["speed_limit"],
                  min_phase_duration=net["min_phase_duration"], clearance_duration=net["clearance_duration"])
    if args.kind == "random":
        network = generate_random_network(args.seed, args.intersections, allow_large=args.allow_large, **kwargs)
    else:
        network = generate_grid_network(args.rows, args.cols, edge_length=net["grid_edge_length"], **kwargs)
    issues = validate_network(network)
    if issues:
        write_validation_report(issues, args.out_dir)
        console.print(f"[yellow]{len(issues)} validation issue(s) found[/yellow]")
    out = args.out or os.path.join(args.out_dir, f"{network.name}.json")
    save_network(network, out)
    console.print(f"[green]{network.name}[/green]: {len(network.intersections)} intersections, "
                  f"{len(network.lanes)} lanes, {len(network.connections)} connections -> {out}")


def cmd_train(args):
    cfg = _load_config(args)
    if args.episodes is not None:
        cfg["training"]["episodes"] = args.episodes
    out_dir = args.out_dir
    log_to_file(os.path.join(out_dir, "run.log"), LOGGED_MODULES)
    agents = args.agent or cfg["training"]["agents"]
    logger.info(f"Training {agents} (config hash {config_hash(cfg)}, root seed {args.root_seed}).")
    checkpoints = train(cfg, os.path.join(out_dir, "checkpoints"), agents, args.root_seed, args.resume)
    for agent, path in checkpoints.items():
        console.print(f"[green]{agent}[/green] -> {path}")


def _scenarios(args, cfg):
    ev = cfg["evaluation"]
    seeds = tuple(range(args.seeds if args.seeds is not None else ev["seeds"]))
    probabilities = args.missing if args.missing is not None else ev["missing_probabilities"]
    network = args.network or "grid"
    size = args.grid_size or ev["grid_size"]
    surge_start = args.surge_start if args.surge_start is not None else ev["surge_start"]
    return [ScenarioSpec(network, size, args.period or ev["period"], float(p), cfg["sim"]["horizon"], seeds,
                         surge_start, ev["surge_factor"]) for p in probabilities]


def cmd_eval(args):
    cfg = _load_config(args)
    out_dir = args.out_dir
    log_to_file(os.path.join(out_dir, "run.log"), LOGGED_MODULES)
    methods = args.agent or cfg["evaluation"]["methods"]
    checkpoints = _checkpoints(args.checkpoints, methods)
    if args.regimes:
        records = regime_comparison(checkpoints, cfg, args.grid_size, tuple(args.regimes), methods,
                                    workers=args.workers, root_seed=args.root_seed)
    else:
        records = evaluate(checkpoints, _scenarios(args, cfg), cfg, methods, args.workers, args.root_seed,
                           dump_every=args.dump_graph_every,
                           dump_dir=os.path.join(out_dir, "graphs") if args.dump_graph_every else None)
    written = emit_reports(records, out_dir, paper_scale=args.paper_scale, plots=not args.no_plots)
    _bundle(written, out_dir)
    _print_table(APP_TITLE, summary_frame(records, args.paper_scale),
                 ["scenario", "method", "sum_delay_mean", "sum_queue_mean", "mean_travel_time_mean",
                  "executed_switch_rate_mean"])


def cmd_matrix(args):
    cfg = _load_config(args)
    out_dir = args.out_dir
    log_to_file(os.path.join(out_dir, "run.log"), LOGGED_MODULES)
    methods = args.agent or cfg["evaluation"]["methods"]
    seeds = range(args.seeds) if args.seeds is not None else None
    matrix, records = generalization_matrix(_checkpoints(args.checkpoints, methods), cfg, args.scales, args.demands,
                                            methods, seeds, args.workers, args.root_seed)
    written = emit_reports(records, out_dir, matrix=matrix, paper_scale=args.paper_scale, plots=not args.no_plots)
    _bundle(written, out_dir)
    _print_table("Generalization matrix", matrix, ["scale", "demand", "method", "mean_delay", "normalized"])


def cmd_demo(args):
    """Two baselines on a 2x2 grid for a few hundred steps; no checkpoints needed."""
    cfg = _load_config(args)
    cfg["sim"]["horizon"] = args.steps
    scenario = ScenarioSpec("grid", 2, cfg["evaluation"]["period"], 0.0, args.steps, tuple(range(args.seeds or 2)))
    records = evaluate({}, [scenario], cfg, list(BASELINE_METHODS), workers=1, root_seed=args.root_seed)
    _print_table("Demo (baselines, 2x2 grid)", summary_frame(records),
                 ["method", "sum_delay_mean", "sum_queue_mean", "arrivals_mean", "executed_switch_rate_mean"])


# ─────────────────────────────────────────────────────────────────────────────
# Argument parsing

def build_parser():
    parser = argparse.ArgumentParser(prog="app.py", description=APP_TITLE)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON or TOML run configuration")
        p.add_argument("--out-dir", default=OUTPUT_DIR)
        p.add_argument("--root-seed", type=int, default=ROOT_SEED)

    p = sub.add_parser("netgen", help="generate and validate a road network")
    common(p)
    p.add_argument("--kind", choices=["grid", "random"], default="grid")
    p.add_argument("--rows", type=int, default=2, help="grid rows")
    p.add_argument("--cols", type=int, default=2, help="grid columns")
    p.add_argument("--intersections", type=int, default=4, help="intersections of a random network")
    p.add_argument("--seed", type=int, default=0, help="random network seed")
    p.add_argument("--lanes", type=int, help="lanes per route")
    p.add_argument("--allow-large", action="store_true", help="allow more than 10 random intersections")
    p.add_argument("--out", "--save", dest="out", help="network JSON path")
    p.set_defaults(func=cmd_netgen)

    p = sub.add_parser("train", help="train IGRL / DGRL (and optionally the MLP sanity agent)")
    common(p)
    p.add_argument("--agent", action="append", choices=["igrl", "dgrl", "irl"])
    p.add_argument("--episodes", type=int)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "robustness evaluation on paired seeds"),
                             ("matrix", cmd_matrix, "zero-shot generalization matrix")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--checkpoints", "--load", dest="checkpoints", default=os.path.join(OUTPUT_DIR, "checkpoints"))
        p.add_argument("--agent", action="append", choices=METHODS, help="method to run (repeatable)")
        p.add_argument("--seeds", type=int)
        p.add_argument("--workers", type=int, default=WORKERS)
        p.add_argument("--paper-scale", action="store_true", help="divide summed metrics by 100")
        p.add_argument("--no-plots", action="store_true")
        p.set_defaults(func=func)
        if name == "eval":
            p.add_argument("--network", help="network JSON (default: generated grid)")
            p.add_argument("--grid-size", type=int)
            p.add_argument("--period", type=float)
            p.add_argument("--missing", type=float, nargs="+")
            p.add_argument("--surge-start", type=int)
            p.add_argument("--regimes", type=float, nargs="+", help="compare demand periods, e.g. 4 2")
            p.add_argument("--dump-graph-every", type=int)
        else:
            p.add_argument("--scales", type=int, nargs="+")
            p.add_argument("--demands", type=float, nargs="+")

    p = sub.add_parser("demo", help="quick baseline run")
    common(p)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--seeds", type=int, default=2)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except SystemExit:
        raise
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        console.print(f"[red]Error:[/red] {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
