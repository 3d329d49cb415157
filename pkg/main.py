import argparse
import json
import os
import sys

import numpy as np

from config.settings import Config, ConfigError
from core import PowerFlowLabError
from core.bench_eval import (MP_OPT, TABLE_MODELS, LearnedPredictor, MpOptPredictor, Thresholds,
                             evaluate_predictor, export_curves, run_benchmark, train_size_sweep,
                             write_benchmark)
from core.dc_solver import Injection, SingularSystem, solve_sample
from core.grid_model import DimensionMismatch, GridError, IslandedGrid, load_grid
from core.mp_engine import MpConfig, NotConverged, mp_opt_solve
from core.neural_core import MODEL_KINDS, NonFiniteLoss, TrainConfig, prepare_dataset, train
from core.scenario_gen import SPLITS, TEST, TRAIN, VAL, RetriesExhausted, ScenarioConfig, generate_dataset
from utils.log_analyzer import BenchmarkAnalyzer
from utils.logger import AdvancedLogger
from utils.storage import load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_json

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

CONFIG_ERRORS = (ConfigError, FileNotFoundError)
DATA_ERRORS = (GridError, IslandedGrid, DimensionMismatch, RetriesExhausted)
NUMERIC_ERRORS = (SingularSystem, NotConverged, NonFiniteLoss)

RESOLVED_CONFIG = "config.json"


def exit_code_for(error):
    if isinstance(error, CONFIG_ERRORS):
        return EXIT_CONFIG
    if isinstance(error, DATA_ERRORS):
        return EXIT_DATA
    if isinstance(error, NUMERIC_ERRORS):
        return EXIT_NUMERIC
    return EXIT_FAILURE


# ------------------------------------------------------------------ layout

def data_dir(config, grid, split):
    return os.path.join(config.settings["output_dir"], "data", grid.name, split)


def model_dir(config, grid, model_kind, seed):
    return os.path.join(config.settings["output_dir"], "models", grid.name, model_kind, f"seed{seed}")


def log_dir(config):
    return os.path.join(config.get_grid_settings()["output_dir"], "logs")


def logger_for(config):
    return AdvancedLogger(log_dir(config))


def load_splits(config, grid, splits):
    datasets = {}
    for split in splits:
        directory = data_dir(config, grid, split)
        if not os.path.exists(os.path.join(directory, "manifest.json")):
            raise FileNotFoundError(f"dataset for split '{split}' not found at {directory} (run generate first)")
        datasets[split] = load_dataset(directory)
        if datasets[split].manifest.get("grid") != grid.name:
            raise DimensionMismatch(f"dataset {directory} was generated for grid "
                                    f"'{datasets[split].manifest.get('grid')}', not '{grid.name}'")
    return datasets


def train_configs(config, seed=None):
    return {kind: TrainConfig(**config.get_train_settings(kind, seed)) for kind in MODEL_KINDS}


def mp_config(config, layers=None):
    settings = config.get_mp_settings()
    return MpConfig(n_layers=layers or settings["n_layers"], damping=settings["damping"], tol=settings["tol"])


def thresholds(config):
    return Thresholds.from_dict(config.get_bench_settings()["thresholds"])


# ---------------------------------------------------------------- commands

def cmd_generate(config, splits=SPLITS):
    """Generate and persist every split; reruns with the same config rewrite identical bytes"""
    settings = config.get_grid_settings()
    grid = load_grid(settings["grid"])
    workers = settings["workers"]
    written = {}
    for split in splits:
        scenario = ScenarioConfig(**config.get_scenario_settings(split))
        print(f"🔧 Generating {split}: {scenario.n_samples} samples, rule {scenario.disconnection_rule}, "
              f"seed {scenario.seed}")
        dataset = generate_dataset(grid, split, scenario, workers)
        directory = data_dir(config, grid, split)
        save_dataset(dataset, directory)
        config.save(os.path.join(directory, RESOLVED_CONFIG))
        written[split] = directory
        print(f"💾 {split} saved to {directory}")
    print(f"✅ Generated {len(written)} splits for {grid.name}")
    return written


def cmd_train(config, model_kind, seeds=None):
    """Train one model kind once per seed; writes a checkpoint and a loss CSV per seed"""
    if model_kind not in MODEL_KINDS:
        raise ConfigError(f"cannot train {model_kind!r}, expected one of {MODEL_KINDS}")
    grid = load_grid(config.get_grid_settings()["grid"])
    datasets = load_splits(config, grid, (TRAIN, VAL))
    train_data = prepare_dataset(grid, datasets[TRAIN])
    val_data = prepare_dataset(grid, datasets[VAL])
    logger = logger_for(config)
    seeds = seeds or [config.settings["seed"]]
    directories = []
    for seed in seeds:
        run_id = f"{model_kind}-seed{seed}"
        train_config = TrainConfig(**config.get_train_settings(model_kind, seed))
        print(f"🧠 Training {run_id} on {len(train_data)} samples ({train_config.epochs} epochs)")
        try:
            params, report = train(model_kind, train_data, val_data, train_config, logger, run_id, verbose=True)
        except PowerFlowLabError as e:
            logger.log_failure(run_id, model_kind, e)
            raise
        logger.log_run(run_id, model_kind, report)
        directory = model_dir(config, grid, model_kind, seed)
        save_checkpoint(params, directory, {
            "grid": grid.name,
            "model_kind": model_kind,
            "seed": int(seed),
            "train_config": train_config.to_dict(),
            "pimp_layers": train_config.pimp_layers,
            "best_epoch": report.best_epoch,
            "wall_time": report.wall_time,
        })
        report.to_frame().to_csv(os.path.join(directory, "report.csv"), index=False, float_format="%.17g")
        config.save(os.path.join(directory, RESOLVED_CONFIG))
        directories.append(directory)
        print(f"💾 {run_id} saved to {directory} (best epoch {report.best_epoch})")
    return directories


def _predictor(config, grid, model, layers=None):
    if model in (MP_OPT, "mp-opt"):
        return MP_OPT, MpOptPredictor(mp_config(config, layers))
    params, manifest = load_checkpoint(model)
    if manifest.get("grid") != grid.name:
        raise DimensionMismatch(f"checkpoint {model} was trained on grid '{manifest.get('grid')}', "
                                f"evaluation grid is '{grid.name}'")
    kind = manifest["model_kind"]
    depth = layers or manifest.get("pimp_layers", 50)
    damping = manifest.get("train_config", {}).get("damping", 1.0)
    return kind, LearnedPredictor(params, kind, depth, damping)


def cmd_evaluate(config, model, split=TEST, layers=None):
    """Score a checkpoint or MP Opt on one split; writes metrics.json and physics.json"""
    grid = load_grid(config.get_grid_settings()["grid"])
    dataset = load_splits(config, grid, (split,))[split]
    label, predictor = _predictor(config, grid, model, layers)
    limits = thresholds(config)
    evaluation = evaluate_predictor(predictor, grid, dataset, limits)
    name = label if label == MP_OPT else f"{label}-{os.path.basename(os.path.normpath(model))}"
    directory = os.path.join(config.settings["output_dir"], "eval", grid.name, f"{name}-{split}")
    os.makedirs(directory, exist_ok=True)
    write_json(os.path.join(directory, "metrics.json"),
               {"model": label, "split": split, "thresholds": limits.to_dict(), **evaluation.metrics.to_dict()})
    write_json(os.path.join(directory, "physics.json"),
               {"model": label, "split": split, **evaluation.physics.to_dict()})
    config.save(os.path.join(directory, RESOLVED_CONFIG))
    logger_for(config).log_evaluation(f"{label}-{split}", label, split, evaluation.metrics, evaluation.physics)

    physics = evaluation.physics
    print(f"📊 {label} on {split} ({physics.n_samples} samples)")
    print(f"   MAE {evaluation.metrics.mae:.3e} | MAPE90 {_fmt(evaluation.metrics.mape90)}")
    print(f"   P1 {physics.p1:.3f} | P2 {physics.p2:.3f} | P3 {physics.p3:.3f} (n/a under DC) | "
          f"P4 {_fmt(physics.p4)} ({physics.p4_excluded} balanced samples excluded)")
    print(f"   P5 {100 * physics.p5:.2f}% at tau {physics.p5_threshold:g} | P5 MAPE {_fmt(physics.p5_mape)}")
    print(f"💾 Reports saved to {directory}")
    return evaluation


def _fmt(value):
    return "undefined" if value is None else f"{value:.3e}"


def cmd_benchmark(config, train_sizes=None):
    """Full table over all four model kinds, curves, and the optional train-size sweep"""
    grid = load_grid(config.get_grid_settings()["grid"])
    datasets = load_splits(config, grid, SPLITS)
    bench = config.get_bench_settings()
    directory = os.path.join(config.settings["output_dir"], "bench", grid.name)
    os.makedirs(directory, exist_ok=True)
    config.save(os.path.join(directory, RESOLVED_CONFIG))
    logger = logger_for(config)

    print(f"🚀 Benchmark on {grid.name}: {bench['n_runs']} runs, seeds {bench['seeds']}")
    table = run_benchmark(grid, TABLE_MODELS, datasets, bench["n_runs"], bench["seeds"],
                          train_configs=train_configs(config), mp_config=mp_config(config),
                          thresholds=thresholds(config), timing_repeats=bench["timing_repeats"],
                          logger=logger, warm_start_depth=bench["warm_start_depth"])
    json_path, md_path = write_benchmark(table, directory)
    curves = export_curves(table.reports, table.trajectories, os.path.join(directory, "curves"), table.warm_start)
    print(f"💾 Table saved to {json_path} and {md_path} ({len(curves)} curve files)")

    sizes = train_sizes or bench["train_sizes"]
    if sizes:
        print(f"🔧 Train-size sweep: {sizes}")
        sweep = train_size_sweep(grid, [k for k in TABLE_MODELS if k != MP_OPT], datasets, sizes,
                                 bench["seeds"], train_configs(config), logger)
        sweep_path = os.path.join(directory, "train_size_sweep.csv")
        sweep.to_csv(sweep_path, index=False, float_format="%.17g")
        print(f"💾 Sweep saved to {sweep_path}")

    print(table.to_markdown())
    if table.failures:
        print(f"⚠️ {len(table.failures)} runs failed; see the table for details")
    return table


def cmd_solve(config, layers=None, as_json=False):
    """DC solve and MP Opt side by side on the default topology with nominal injections"""
    grid = load_grid(config.get_grid_settings()["grid"])
    inj = Injection.nominal(grid)
    bg, Y, p, solution, flows = solve_sample(grid, grid.default_topology(), inj)
    mp = mp_config(config, layers)
    warning = None
    try:
        theta_mp, trajectory = mp_opt_solve(bg, p, mp, Y)
    except NotConverged as e:
        theta_mp, trajectory = e.theta, e.trajectory
        warning = f"MP Opt not converged after {mp.n_layers} layers: residual {e.residual:.3e} (tol {mp.tol:g})"
    residual_dc = float(np.max(np.abs(p - Y.entries @ solution.theta)))
    residual_mp = trajectory.max_residual[-1] if trajectory.max_residual else 0.0
    result = {
        "grid": grid.name,
        "slack_bus": int(bg.slack_bus),
        "bus_slots": bg.bus_slots.tolist(),
        "theta_dc": solution.theta.tolist(),
        "theta_mp": np.asarray(theta_mp).tolist(),
        "max_abs_difference": float(np.max(np.abs(solution.theta - theta_mp))),
        "p_or": flows.p_or.tolist(),
        "p_ex": flows.p_ex.tolist(),
        "residual_dc": residual_dc,
        "residual_mp": residual_mp,
        "mp_layers": trajectory.n_layers,
        "mp_converged": trajectory.converged,
        "warning": warning,
    }
    if as_json:
        print(json.dumps(result, indent=2))
        return result

    print(f"⚡ {grid.name}: {bg.n_buses} buses, slack bus {bg.slack_bus}")
    print(f"{'bus':>4} {'slot':>5} {'theta DC':>14} {'theta MP':>14}")
    for i, slot in enumerate(bg.bus_slots):
        print(f"{i:>4} {slot:>5} {solution.theta[i]:>14.8f} {theta_mp[i]:>14.8f}")
    print(f"{'line':>4} {'p_or':>12} {'p_ex':>12}")
    for line, (a, b) in enumerate(zip(flows.p_or, flows.p_ex)):
        print(f"{line:>4} {a:>12.6f} {b:>12.6f}")
    print(f"📊 DC residual {residual_dc:.2e} | MP residual {residual_mp:.2e} after {trajectory.n_layers} layers "
          f"| max |dtheta| {result['max_abs_difference']:.2e}")
    if warning:
        print(f"⚠️ {warning}")
    else:
        print("✅ MP Opt converged")
    return result


def cmd_report(config, paths, markdown=None):
    analyzer = BenchmarkAnalyzer(paths, log_dir(config))
    summary = analyzer.generate_summary_report()
    if markdown:
        analyzer.write_markdown(markdown)
        print(f"💾 Markdown saved to {markdown}")
    return summary


# -------------------------------------------------------------------- CLI

def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def build_parser():
    parser = argparse.ArgumentParser(prog="pflab", description="DC power-flow surrogate lab")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--grid", help="grid JSON file or 'synthetic36'")
    common.add_argument("--seed", type=int, help="base seed")
    common.add_argument("--seeds", type=_int_list, help="comma-separated run seeds")
    common.add_argument("--out", help="output directory (data, models, eval, bench and logs live under it)")
    common.add_argument("--deterministic", action="store_true", default=None,
                        help="single worker, identical outputs on rerun")

    commands = parser.add_subparsers(dest="command")
    generate = commands.add_parser("generate", parents=[common], help="generate train/val/test/ood datasets")
    generate.add_argument("--split", choices=SPLITS, action="append", help="only these splits")

    train_cmd = commands.add_parser("train", parents=[common], help="train one model kind per seed")
    train_cmd.add_argument("--model", choices=MODEL_KINDS, required=True)

    evaluate = commands.add_parser("evaluate", parents=[common], help="score a checkpoint or mp-opt")
    evaluate.add_argument("--model", required=True, help="checkpoint directory or 'mp-opt'")
    evaluate.add_argument("--split", choices=SPLITS, default=TEST)
    evaluate.add_argument("--layers", type=int, help="MP depth override")

    benchmark = commands.add_parser("benchmark", parents=[common], help="full benchmark table")
    benchmark.add_argument("--train-sizes", type=_int_list, help="comma-separated train sizes for the sweep")

    solve = commands.add_parser("solve", parents=[common], help="DC solve vs MP Opt on one sample")
    solve.add_argument("--layers", type=int, help="MP Opt layer budget")
    solve.add_argument("--json", action="store_true", help="machine-readable output")

    report = commands.add_parser("report", parents=[common], help="summarize benchmark.json files")
    report.add_argument("paths", nargs="+", help="benchmark.json files or benchmark directories")
    report.add_argument("--markdown", help="write the combined markdown table here")
    return parser


def config_from_args(args):
    overrides = {
        "grid": args.grid,
        "seed": args.seed,
        "deterministic": args.deterministic,
        "output_dir": args.out,
    }
    if args.seeds:
        overrides["bench"] = {"seeds": args.seeds, "n_runs": len(args.seeds)}
    return Config(args.config, overrides)


def run_command(args):
    config = config_from_args(args)
    if args.command == "report":
        cmd_report(config, args.paths, args.markdown)
    elif args.command == "generate":
        cmd_generate(config, tuple(args.split) if args.split else SPLITS)
    elif args.command == "train":
        cmd_train(config, args.model, args.seeds)
    elif args.command == "evaluate":
        cmd_evaluate(config, args.model, args.split, args.layers)
    elif args.command == "benchmark":
        cmd_benchmark(config, args.train_sizes)
    elif args.command == "solve":
        cmd_solve(config, args.layers, args.json)
    return EXIT_OK


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        return menu()
    args = build_parser().parse_args(argv)
    if args.command is None:
        build_parser().print_help()
        return EXIT_CONFIG
    try:
        return run_command(args)
    except (PowerFlowLabError, FileNotFoundError) as e:
        print(f"❌ {type(e).__name__}: {e}")
        return exit_code_for(e)


def menu():
    print("⚡ DC POWER-FLOW SURROGATE LAB")
    print("=" * 50)
    print("1. Solve IEEE-14 (DC vs MP Opt)")
    print("2. Generate datasets")
    print("3. Train a model")
    print("4. Run benchmark")
    print("5. Exit")

    choice = input("\nSelect option (1-5): ").strip()

    if choice == "1":
        argv = ["solve"]
    elif choice == "2":
        argv = ["generate"]
    elif choice == "3":
        kind = input(f"Model kind {MODEL_KINDS}: ").strip()
        argv = ["train", "--model", kind]
    elif choice == "4":
        argv = ["benchmark"]
    elif choice == "5":
        print("👋 Goodbye!")
        return EXIT_OK
    else:
        print("❌ Invalid choice!")
        return menu()

    code = main(argv)
    input("\nPress Enter to continue...")
    return code


if __name__ == "__main__":
    sys.exit(main())
