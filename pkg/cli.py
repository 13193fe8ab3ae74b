"""
Command-line interface.

Usage:
    python cli.py suite --env-kind rooms --count 10 --out configs/two_rooms.json
    python cli.py pretrain --suite configs/two_rooms.json --out runs/pretrained
    python cli.py finetune --checkpoint runs/pretrained/policy.ckpt \\
        --suite configs/two_rooms.json --method poly_ppo --out runs/poly_seed0
    python cli.py compare --checkpoint runs/pretrained/policy.ckpt \\
        --suite configs/two_rooms.json --seeds 0 1 2 --out runs/comparison
    python cli.py eval --checkpoint runs/poly_seed0/policy.ckpt \\
        --suite configs/two_rooms.json -R 64 --k 1 2 4 8 16 --out runs/poly_seed0/eval.jsonl
    python cli.py theory --out runs/theory.json
    python cli.py plotdata --runs-dir runs --db polyppo_metrics.db
    python cli.py describe runs/poly_seed0/policy.ckpt

Every training hyperparameter has a flag (e.g. --kl-coef 0.05 --lambda-ucb 0.5);
flags override the --config JSON document, which overrides the defaults.
"""

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from advantage import WindowError
from charts import curve_figure, training_figure
from config import (
    DEFAULT_SEED,
    ENV_KINDS,
    METHODS,
    METRICS_DB,
    PRETRAIN_SUCCESS_BAND,
    RUNS_DIR,
    ConfigError,
    TrainConfig,
    load_train_config,
)
from env import (
    EpisodeFinishedError,
    ExpertPolicy,
    ObservationLimitError,
    PlannerError,
    RoomsConfig,
    SnapshotMismatchError,
    UnsatisfiableMissionError,
    load_graph_suite,
    load_rooms_suite,
    make_triangle_graph,
    make_two_room_suite,
    save_suite,
)
from evaluate import (
    DEFAULT_K_GRID,
    InconsistentReportError,
    PassAtKError,
    build_perturbation_suite,
    compare_methods,
    creativity_metrics,
    emit_metrics,
    evaluate_suite,
    perturbation_eval,
)
from metrics_store import load_eval_curves, load_run_metrics, write_metrics_db
from policy import CheckpointError, CriticModel, TrainingDivergedError, describe, load_checkpoint
from rollout import BudgetError, RestoreError
from setobj import UnnormalizedReturnError, ValidationError
from theorylab import TermCountError, run_theory_suite, save_theory_report
from train import BudgetViolationError, NonFiniteError, run_pretraining, select_kl_coef, train_run

# Errors reported as "❌ Error: ..." with exit status 1
HANDLED_ERRORS = (
    ConfigError, UnsatisfiableMissionError, EpisodeFinishedError, SnapshotMismatchError, PlannerError,
    TrainingDivergedError, CheckpointError, BudgetError, RestoreError, UnnormalizedReturnError,
    ValidationError, WindowError, NonFiniteError, BudgetViolationError, TermCountError, PassAtKError,
    InconsistentReportError, ObservationLimitError, FileNotFoundError,
)

# Fields whose default is None
FLAG_TYPES = {"window": int, "temperature": float}

CHOICES = {"method": METHODS, "env_kind": ENV_KINDS,
           "rollout_criterion": ("equal_spacing", "top_entropy", "top_critic_error"),
           "optimizer": ("sgd", "adam"), "ucb_schedule": ("global", "per_iteration")}


def load_suite(path: str | Path) -> list:
    """Rooms or graph configurations, detected from the document keys."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Suite file not found: {path}")
    with open(path) as f:
        documents = json.load(f)
    first = documents[0] if isinstance(documents, list) else documents
    if "graph_id" in first:
        return load_graph_suite(path)
    return load_rooms_suite(path)


def suite_kind(configs) -> str:
    return "rooms" if isinstance(configs[0], RoomsConfig) else "triangle"


def load_policy(path: str | Path):
    model = load_checkpoint(path)
    if isinstance(model, CriticModel):
        raise CheckpointError(f"{path} holds a critic, not a policy")
    return model


def add_train_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("training hyperparameters")
    for f in fields(TrainConfig):
        kind = FLAG_TYPES.get(f.name, type(f.default))
        group.add_argument(
            f"--{f.name.replace('_', '-')}",
            dest=f.name,
            type=kind,
            default=None,
            choices=CHOICES.get(f.name),
            help=f"(default: {f.default})",
        )


def train_config_overrides(args) -> dict:
    return {f.name: getattr(args, f.name) for f in fields(TrainConfig)}


def resolve_train_config(args, configs: list) -> TrainConfig:
    overrides = train_config_overrides(args)
    if overrides["env_kind"] is None:
        overrides["env_kind"] = suite_kind(configs)
    config = load_train_config(args.config, **overrides)
    if config.env_kind != suite_kind(configs):
        raise ConfigError(f"env_kind '{config.env_kind}' does not match the {suite_kind(configs)} suite")
    return config


# ----------------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------------

def cmd_suite(args) -> None:
    if args.env_kind == "rooms":
        configs = make_two_room_suite(args.count, args.seed, args.width, args.height, args.horizon,
                                      args.compositional)
    else:
        configs = [make_triangle_graph(i, args.nodes, args.edge_prob, args.seed, args.seen_fraction)
                   for i in range(args.count)]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_suite(configs, args.out)
    print(f"✓ Wrote {len(configs)} {args.env_kind} configurations to {args.out}")


def cmd_pretrain(args) -> None:
    configs = load_suite(args.suite)
    _, summary = run_pretraining(
        suite_kind(configs), configs, args.out, args.parameterization, args.count, args.noise,
        args.epochs, args.lr, args.entropy_coef, args.seed,
        success_band=None if args.no_calibrate else PRETRAIN_SUCCESS_BAND,
        calibration_rollouts=args.calibration_rollouts,
    )
    print(f"Holdout cross-entropy: {summary['holdout_before']:.4f} -> {summary['holdout_after']:.4f}")


def cmd_finetune(args) -> None:
    configs = load_suite(args.suite)
    config = resolve_train_config(args, configs)
    policy = load_policy(args.checkpoint)
    out_dir = Path(args.out or Path(RUNS_DIR) / f"{config.method}_seed{config.seed}")

    if args.select_kl:
        best, _ = select_kl_coef(config, configs, policy, out_dir / "kl_sweep")
        config = config.with_overrides(kl_coef=best)

    result = train_run(config, configs, policy, out_dir, resume=args.resume, dump_final=args.dump_trajectories)
    if result.reports:
        last = result.reports[-1]
        print(f"Final iteration {last.iteration}: success {last.success_rate:.2%}, return {last.mean_return:.3f}")


def cmd_compare(args) -> None:
    configs = load_suite(args.suite)
    config = resolve_train_config(args, configs)
    policy = load_policy(args.checkpoint)
    out_dir = Path(args.out or Path(RUNS_DIR) / "comparison")
    comparison = compare_methods(policy, configs, config, args.seeds, out_dir, args.rollouts, args.k, args.diff_k)
    ahead = sum(comparison.verdict.values())
    print(f"\n{comparison.challenger} ahead on {ahead}/{len(comparison.verdict)} metrics (majority of seeds)")
    print(f"✓ Comparison saved: {out_dir / 'comparison.json'}")


def cmd_eval(args) -> None:
    configs = load_suite(args.suite)
    kind = suite_kind(configs)
    if args.expert:
        if kind != "rooms":
            raise ConfigError("The planner policy is only defined for rooms suites")
        policy = ExpertPolicy()
    else:
        policy = load_policy(args.checkpoint)
    k_grid = tuple(args.k)

    print("=" * 60)
    print(f"EVALUATION: {len(configs)} {kind} configurations, R={args.rollouts}")
    print("=" * 60)
    report = evaluate_suite(policy, configs, args.rollouts, k_grid, args.seed, label=args.label, verbose=True)
    if kind == "triangle":
        creativity_metrics(policy, configs, attempts=args.rollouts, k_grid=k_grid, seed=args.seed, report=report)

    if args.perturb:
        if kind != "rooms":
            raise ConfigError("Perturbation evaluation is only defined for rooms suites")
        explorer = load_policy(args.explorer) if args.explorer else policy
        if isinstance(explorer, ExpertPolicy):
            raise ConfigError("--perturb with --expert needs --explorer CHECKPOINT")
        rates = []
        for index, config in enumerate(configs):
            suite = build_perturbation_suite(explorer, config, args.perturb_temperature, seed=args.seed,
                                             config_index=index, verbose=True)
            rates.append(perturbation_eval(policy, suite, args.seed))
        report.perturbation_pass_at_1 = float(np.mean(rates))

    print(f"\nSuccess rate: {report.success_rate:.2%}")
    print(f"Mean return: {report.mean_return:.3f}")
    for k, value in report.pass_at_k.items():
        print(f"  pass@{k}: {value:.3f}")
    if report.validity is not None:
        print(f"Validity {report.validity:.3f}  diversity {report.diversity}  creativity {report.creativity:.3f}")
    if report.perturbation_pass_at_1 is not None:
        print(f"Perturbed-start pass@1: {report.perturbation_pass_at_1:.3f}")

    if args.out:
        table_path = emit_metrics(report, args.out)
        print(f"✓ Metrics saved: {args.out} (curves: {table_path})")


def cmd_theory(args) -> None:
    report = run_theory_suite(args.seed)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        save_theory_report(report, args.out)
        print(f"✓ Theory report saved: {args.out}")
    if not report["passed"]:
        raise ValidationError("At least one theory check failed")


def cmd_plotdata(args) -> None:
    iterations = load_run_metrics(args.runs_dir)
    curves = load_eval_curves(args.runs_dir)
    if iterations.empty and curves.empty:
        raise FileNotFoundError(f"No metrics under {args.runs_dir}")
    write_metrics_db(iterations, args.db, curves)
    if args.csv_dir:
        out = Path(args.csv_dir)
        out.mkdir(parents=True, exist_ok=True)
        iterations.to_csv(out / "iterations.csv", index=False)
        curves.to_csv(out / "curves.csv", index=False)
        print(f"✓ Tables saved: {out}")
    if args.html:
        out = Path(args.html)
        out.mkdir(parents=True, exist_ok=True)
        if not iterations.empty:
            for metric in ("success_rate", "mean_return", "entropy", "mean_set_diversity"):
                if iterations[metric].notna().any():
                    training_figure(iterations, metric).write_html(out / f"{metric}.html")
        for metric in curves["metric"].unique():
            curve_figure(curves, metric).write_html(out / f"{metric}.html")
        print(f"✓ Figures saved: {out}")


def cmd_describe(args) -> None:
    print(describe(load_checkpoint(args.checkpoint)))


# ----------------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cli.py", description="Polychromic PPO toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("suite", help="Generate a configuration suite")
    p.add_argument("--env-kind", choices=ENV_KINDS, default="rooms")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--height", type=int, default=8)
    p.add_argument("--horizon", type=int, default=100)
    p.add_argument("--compositional", action="store_true")
    p.add_argument("--nodes", type=int, default=30)
    p.add_argument("--edge-prob", type=float, default=0.25)
    p.add_argument("--seen-fraction", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("pretrain", help="Behaviour-clone a policy on generated demonstrations")
    p.add_argument("--suite", required=True)
    p.add_argument("--out", default=str(Path(RUNS_DIR) / "pretrained"))
    p.add_argument("--parameterization", choices=("tabular", "mlp"), default="tabular")
    p.add_argument("--count", type=int, default=20, help="Demonstrations (rooms) or samples (triangle) per config")
    p.add_argument("--noise", type=float, default=0.25)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--entropy-coef", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--calibration-rollouts", type=int, default=32,
                   help="Episodes per config when calibrating pretrained success")
    p.add_argument("--no-calibrate", action="store_true", help="Keep the cloned policy's temperature")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="Fine-tune a pretrained policy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--suite", required=True)
    p.add_argument("--config", help="JSON training configuration")
    p.add_argument("--out")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--select-kl", action="store_true", help="Sweep beta_KL on seed 0 first")
    p.add_argument("--dump-trajectories", action="store_true",
                   help="Write the final iteration's trajectories to trajectories.jsonl")
    add_train_config_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("compare", help="Fine-tune poly_ppo and ppo per seed and compare them")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--suite", required=True)
    p.add_argument("--config", help="JSON training configuration")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("-R", "--rollouts", type=int, default=64)
    p.add_argument("--k", type=int, default=16, help="k for pass@k")
    p.add_argument("--diff-k", type=int, default=32, help="k for diff@k on triangle suites")
    p.add_argument("--out")
    add_train_config_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("eval", help="Evaluate a policy on a suite")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoint")
    source.add_argument("--expert", action="store_true", help="Use the shortest-path planner")
    p.add_argument("--suite", required=True)
    p.add_argument("-R", "--rollouts", type=int, default=64)
    p.add_argument("--k", type=int, nargs="+", default=list(DEFAULT_K_GRID))
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--label", default="")
    p.add_argument("--perturb", action="store_true", help="Also run the perturbed-start harness")
    p.add_argument("--explorer", help="Pretrained checkpoint used to discover rooms")
    p.add_argument("--perturb-temperature", type=float, default=2.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("theory", help="Run the numerical set-RL checks")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("plotdata", help="Collect run metrics into SQLite / CSV / HTML")
    p.add_argument("--runs-dir", default=RUNS_DIR)
    p.add_argument("--db", default=METRICS_DB)
    p.add_argument("--csv-dir")
    p.add_argument("--html", help="Folder for plotly HTML figures")
    p.set_defaults(func=cmd_plotdata)

    p = sub.add_parser("describe", help="Print a checkpoint's parameter summary")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_describe)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except HANDLED_ERRORS as e:
        print(f"❌ Error: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
