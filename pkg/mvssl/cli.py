"""Command-line entry point.

    python main.py gen-data --config tiny.yaml --out runs/data
    python main.py train --config default.yaml --seed 3 --set train.epochs=50
    python main.py cross-val --config tiny.yaml --jobs 4
    python main.py ablate --config default.yaml
    python main.py gradcheck --seed 7
    python main.py report --run runs/ablate

Exit codes: 0 success, 1 unexpected failure, 2 usage error, 3 invalid
configuration or input, 4 training divergence. Failures print one line
``error: <category>: <message>`` to stderr.
"""
import argparse
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from dotenv import load_dotenv

from mvssl import __version__
from mvssl.config import SEED_KEYS, RunConfig, config_key_docs, load_run_config
from mvssl.data import (
    MultiviewDataset,
    PromptBank,
    generate_synthetic,
    kfold_subject_split,
    load_dataset,
    load_prompt_bank,
    save_dataset,
)
from mvssl.encoders import load_checkpoint
from mvssl.errors import ConfigurationError, MvsslError
from mvssl.evaluation import (
    Metrics,
    evaluate_fold,
    evaluate_views,
    make_shifted_dataset,
    prompt_similarity_gap,
    run_ablation,
    run_cross_domain,
    run_cross_validation,
)
from mvssl.train import METRIC_COLUMNS, gradient_check_suite, run_training
from utils.file_loader import list_available_configs, write_json
from utils.logger import apply_env_level, attach_run_log, detach_run_log, setup_logger
from utils.renderers import (
    csv_to_html_table,
    matrix_table,
    render_bar_chart,
    render_heatmap,
    to_html_report,
    to_table,
    write_csv,
    write_matrix_csv,
)

logger = setup_logger(__name__)

OUT_ENV = "SMILE_SSL_OUT"

FOLD_COLUMNS = ["fold", "seed", "n_test", "accuracy", "macro_f1", "weighted_f1", "final_total_loss"]
PER_CLASS_COLUMNS = ["class", "precision", "recall", "f1", "support"]


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------

def _config_epilog() -> str:
    lines = ["config keys (set with --set key=value; defaults shown):"]
    lines += [f"  {key} = {value!r}" for key, value in config_key_docs()]
    lines.append(f"'seed' (or --seed) is the only seed knob; it sets {' and '.join(SEED_KEYS)}, "
                 "which cannot be set on their own.")
    return "\n".join(lines)


def _config_help() -> str:
    shipped = ", ".join(list_available_configs()) or "none"
    return f"run config YAML/JSON, a path or a shipped name ({shipped}; default: default.yaml)"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help=_config_help())
    common.add_argument("--seed", type=int, default=None, help="master seed; overrides the config's seed")
    common.add_argument("--out", default=None, help=f"output directory (default: ${OUT_ENV} or ./runs/<subcommand>)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for folds (default 1)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. train.epochs=20 (repeatable)")

    parser = argparse.ArgumentParser(prog="mvssl", description="Multi-view vision-language self-supervised training.")
    parser.add_argument("--version", action="version", version=f"mvssl {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def _add(name: str, help_text: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                              epilog=_config_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)

    p = _add("gen-data", "generate the synthetic multiview dataset")
    p.add_argument("--name", default="dataset", help="dataset file stem (default: dataset)")

    p = _add("train", "train one model (all samples, or the training split of --fold)")
    p.add_argument("--data", default=None, help="dataset manifest to train on instead of generating")
    p.add_argument("--fold", type=int, default=None, help="train on this fold's split and evaluate on its test set")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = _add("eval", "zero-shot evaluation of a checkpoint, per view and fused")
    p.add_argument("--checkpoint", required=True, help="checkpoint path (with or without .json)")
    p.add_argument("--data", default=None, help="dataset manifest (default: regenerate from config)")
    p.add_argument("--fold", type=int, default=None, help="evaluate only this fold's test subjects")

    p = _add("cross-val", "subject-independent k-fold cross-validation")
    p.add_argument("--data", default=None, help="dataset manifest (default: regenerate from config)")

    _add("cross-domain", "train on the source domain, zero-shot evaluate on the shifted domain")

    p = _add("ablate", "cross-validate the full objective and each single-loss removal")
    p.add_argument("--data", default=None, help="dataset manifest (default: regenerate from config)")

    _add("gradcheck", "finite-difference gradient check of every loss and the full model")

    p = _add("report", "render an HTML summary of the CSV/SVG files in a run directory")
    p.add_argument("--run", default=None, help="run directory to summarize (default: the output directory)")
    return parser


# ----------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------

def resolve_out_dir(args: argparse.Namespace) -> Path:
    if args.out:
        return Path(args.out)
    if os.getenv(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    return Path("runs") / args.command


def _run_name(config: RunConfig) -> str:
    return f"seed{config.seed}"


def _dataset(args: argparse.Namespace, config: RunConfig, bank: PromptBank) -> MultiviewDataset:
    if getattr(args, "data", None):
        dataset = load_dataset(args.data)
        if dataset.n_classes > bank.n_classes:
            raise ConfigurationError(f"dataset has {dataset.n_classes} classes, prompt bank only {bank.n_classes}")
        return dataset
    return generate_synthetic(config.data, bank)


def _fold_split(dataset: MultiviewDataset, config: RunConfig, fold: int) -> Tuple[np.ndarray, np.ndarray]:
    splits = kfold_subject_split(dataset, config.eval.folds, seed=config.seed)
    if not 0 <= fold < len(splits):
        raise ConfigurationError(f"--fold {fold} outside 0..{len(splits) - 1}")
    return splits[fold]


def write_provenance(out_dir: Path, args: argparse.Namespace, config: RunConfig,
                     dataset: Optional[MultiviewDataset] = None, extra: Optional[Dict[str, Any]] = None) -> Path:
    record = {
        "artifact": "mvssl",
        "version": __version__,
        "command": args.command,
        "config_path": args.config,
        "overrides": list(args.overrides),
        "seed": config.seed,
        "config": config.to_dict(),
        "dataset_digest": dataset.digest() if dataset is not None else None,
        "jobs": args.jobs,
    }
    record.update(extra or {})
    return write_json(out_dir / "run.json", record)


def _metrics_summary(label: str, metrics: Metrics) -> Dict[str, Any]:
    return {"evaluation": label, "n_test": metrics.n_samples, "accuracy": metrics.accuracy,
            "macro_f1": metrics.macro_f1, "weighted_f1": metrics.weighted_f1}


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def cmd_gen_data(args, config, bank, out_dir) -> int:
    dataset = generate_synthetic(config.data, bank)
    manifest = save_dataset(dataset, out_dir, args.name, bank)
    write_provenance(out_dir, args, config, dataset, {"manifest": str(manifest)})
    print(f"dataset: {manifest}")
    print(f"digest: {dataset.digest()}")
    print(f"oracle_accuracy: {dataset.oracle_accuracy:.6f}")
    return 0


def cmd_train(args, config, bank, out_dir) -> int:
    dataset = _dataset(args, config, bank)
    if args.fold is not None:
        train_idx, test_idx = _fold_split(dataset, config, args.fold)
    else:
        train_idx, test_idx = np.arange(len(dataset)), None
    model, log = run_training(dataset, train_idx, config.train, config.model, bank,
                              checkpoint_dir=out_dir / "checkpoints", resume_from=args.resume)
    write_csv(out_dir / "report" / f"metrics_log_{_run_name(config)}.csv", log, METRIC_COLUMNS)
    extra = {"checkpoint": str(out_dir / "checkpoints" / "final.json"), "model_digest": model.digest()}
    write_provenance(out_dir, args, config, dataset, extra)
    if log:
        print(to_table([log[0], log[-1]], columns=list(METRIC_COLUMNS)))
    if test_idx is not None:
        metrics = evaluate_fold(model, dataset, test_idx, bank, config.eval.match)
        print(to_table([_metrics_summary(f"fold {args.fold}", metrics)]))
    print(f"checkpoint: {extra['checkpoint']}")
    return 0


def cmd_eval(args, config, bank, out_dir) -> int:
    checkpoint = args.checkpoint[:-5] if args.checkpoint.endswith(".json") else args.checkpoint
    model, _, _ = load_checkpoint(checkpoint)
    dataset = _dataset(args, config, bank)
    indices = _fold_split(dataset, config, args.fold)[1] if args.fold is not None else np.arange(len(dataset))
    results = evaluate_views(model, dataset, indices, bank, config.eval.match)
    rows = [_metrics_summary(label, m) for label, m in results.items()]
    name = _run_name(config)
    write_csv(out_dir / "report" / f"eval_{name}.csv", rows, list(rows[0]))
    write_csv(out_dir / "report" / f"per_class_{name}.csv", results["fused"].per_class_rows(), PER_CLASS_COLUMNS)
    gap = prompt_similarity_gap(model.text, bank)
    write_provenance(out_dir, args, config, dataset, {"checkpoint": checkpoint, "prompt_similarity_gap": gap})
    print(to_table(rows))
    print(f"prompt_similarity_gap: {gap:.6f}")
    return 0


def cmd_cross_val(args, config, bank, out_dir) -> int:
    dataset = _dataset(args, config, bank)
    result = run_cross_validation(dataset, config.eval.folds, config.train, config.model, bank,
                                  config.eval.match, jobs=args.jobs)
    rows = result.rows()
    summary = [
        {"fold": "mean", "accuracy": result.mean_accuracy, "macro_f1": result.mean_macro_f1},
        {"fold": "sd", "accuracy": result.sd_accuracy},
    ]
    name = _run_name(config)
    report = out_dir / "report"
    write_csv(report / f"metrics_{name}.csv", rows + summary, FOLD_COLUMNS)
    write_csv(report / f"per_class_{name}.csv", result.pooled.per_class_rows(), PER_CLASS_COLUMNS)
    write_matrix_csv(report / f"confusion_{name}.csv", result.pooled.class_names,
                     result.pooled.confusion.astype(np.float64))
    write_provenance(out_dir, args, config, dataset, {"mean_accuracy": result.mean_accuracy})
    print(to_table(rows + summary, columns=FOLD_COLUMNS))
    return 0


def cmd_cross_domain(args, config, bank, out_dir) -> int:
    source = generate_synthetic(config.data, bank)
    target = make_shifted_dataset(config.data, config.domain_shift, bank)
    result = run_cross_domain(source, target, config.eval.class_subset, config.train, config.model, bank,
                              config.eval.match)
    classes = " ".join(bank.class_names[c] for c in result.class_subset)
    rows = [
        {**_metrics_summary("in-domain", result.in_domain), "classes": classes, "degenerate": result.degenerate},
        {**_metrics_summary("cross-domain", result.metrics), "classes": classes, "degenerate": result.degenerate},
    ]
    write_csv(out_dir / "report" / f"cross_domain_{_run_name(config)}.csv", rows, list(rows[0]))
    write_provenance(out_dir, args, config, source, {"target_digest": target.digest()})
    print(to_table(rows))
    return 0


def cmd_ablate(args, config, bank, out_dir) -> int:
    dataset = _dataset(args, config, bank)
    result = run_ablation(dataset, config.eval.folds, config.train, config.model, bank,
                          config.eval.match, jobs=args.jobs)
    name = _run_name(config)
    report = out_dir / "report"
    rows = result.rows()
    matrix = result.improvement_matrix()
    write_csv(report / f"ablation_{name}.csv", rows, ["variant", "mean_accuracy", "sd_accuracy", "mean_macro_f1"])
    write_matrix_csv(report / f"improvement_matrix_{name}.csv", result.variants, matrix)
    (report / f"ablation_{name}.svg").write_text(
        render_bar_chart(result.variants, [r["mean_accuracy"] for r in rows], "Mean CV accuracy per variant",
                         errors=[r["sd_accuracy"] for r in rows]),
        encoding="utf-8",
    )
    (report / f"improvement_matrix_{name}.svg").write_text(
        render_heatmap(result.variants, matrix, "Accuracy improvement of row over column"), encoding="utf-8"
    )
    write_provenance(out_dir, args, config, dataset, {"accuracies": result.accuracies})
    print(to_table(rows))
    print()
    print(matrix_table(result.variants, matrix))
    return 0


def cmd_gradcheck(args, config, bank, out_dir) -> int:
    rows = gradient_check_suite(seed=config.seed)
    write_csv(out_dir / "report" / f"gradcheck_{_run_name(config)}.csv", rows,
              ["check", "n_params", "max_rel_error", "passed"])
    write_provenance(out_dir, args, config, None, {"passed": all(r["passed"] for r in rows)})
    print(to_table(rows, floatfmt=".3e"))
    failed = [r["check"] for r in rows if not r["passed"]]
    if failed:
        print(f"error: gradcheck: relative error above tolerance for {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_report(args, config, bank, out_dir) -> int:
    run_dir = Path(args.run) if args.run else out_dir
    report = run_dir / "report"
    if not report.is_dir():
        raise FileNotFoundError(f"no report directory in {run_dir}")
    sections: List[Tuple[str, str]] = []
    for path in sorted(report.glob("*.csv")):
        sections.append((path.name, csv_to_html_table(path)))
    for path in sorted(report.glob("*.svg")):
        sections.append((path.name, path.read_text(encoding="utf-8")))
    html_path = report / "index.html"
    html_path.write_text(to_html_report(f"mvssl run: {run_dir}", sections), encoding="utf-8")
    write_provenance(out_dir, args, config, None, {"summarized": str(run_dir)})
    print(f"report: {html_path}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "cross-val": cmd_cross_val,
    "cross-domain": cmd_cross_domain,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def dispatch(argv: Optional[List[str]] = None) -> int:
    """
    Parse ``argv`` and run one subcommand.

    Returns:
        process exit code (see module docstring)
    """
    load_dotenv()
    apply_env_level()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.jobs < 1:
        print("error: usage: --jobs must be >= 1", file=sys.stderr)
        return 2

    out_dir = resolve_out_dir(args)
    try:
        config = load_run_config(args.config, args.overrides, seed=args.seed)
        bank = load_prompt_bank(config.prompts.mode)
        out_dir.mkdir(parents=True, exist_ok=True)
        attach_run_log(str(out_dir))
        logger.info(f"mvssl {__version__}: {args.command} (seed {config.seed}) -> {out_dir}")
        return COMMANDS[args.command](args, config, bank, out_dir)
    except MvsslError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e.category}: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"error: io: {e}", file=sys.stderr)
        return 3
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly")
        print(f"error: internal: {e}", file=sys.stderr)
        return 1
    finally:
        detach_run_log()


def main() -> None:
    sys.exit(dispatch())
