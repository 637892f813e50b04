import argparse
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path
from typing import Any, Optional

import numpy as np

from kyoto_shift_bench.config import (
    RunConfig,
    config_hash,
    load_run_config,
    settings,
    write_default_config,
)
from kyoto_shift_bench.detectors import (
    FeatureVectorizer,
    FittedDetector,
    MaskedModelScorer,
    fit_detector,
    load_detector,
    save_detector,
    state_provenance,
)
from kyoto_shift_bench.driftstats import (
    LabelledPoints,
    dataset_distance_report,
    divergence_matrix,
    pca_project,
    write_distance_matrix,
    write_projection_csv,
)
from kyoto_shift_bench.errors import ArtifactMismatch, BenchError
from kyoto_shift_bench.evaluate import (
    evaluate_benchmark,
    monthly_breakdown,
    write_monthly_csv,
)
from kyoto_shift_bench.ingest import generate_synthetic, read_dataset, write_dataset
from kyoto_shift_bench.maskedmodel import (
    PARAMETER_FORMULA,
    StrategyRow,
    expected_parameter_count,
    init_model,
    load_checkpoint,
    parameter_count,
    read_checkpoint,
    run_strategies,
    save_checkpoint,
    train_distill,
    train_finetune,
    train_iid,
)
from kyoto_shift_bench.protocol import BenchmarkSplits, load_splits, plan_splits, save_splits
from kyoto_shift_bench.schema import RawRecord
from kyoto_shift_bench.tokenize import (
    Vocabulary,
    build_vocabulary,
    encode_all,
    load_vocabulary,
    save_vocabulary,
    token_matrix,
)
from kyoto_shift_bench.utils import (
    atomic_write,
    check_sidecar_data,
    create_filename,
    read_json_artifact,
    write_json_artifact,
    write_sidecar,
)

logger = logging.getLogger("kyoto_shift_bench")

VOCAB_FILE = "vocab.txt"
REFERENCE_PARAMETER_COUNT = 342_135
DEFAULT_SEED_COUNT = 3


def _configure_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("kyoto_shift_bench")
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    logging.captureWarnings(True)


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    """Maps command-line flags onto RunConfig keys; flags win over the file."""
    out: dict[str, Any] = defaultdict(dict)
    if args.seed is not None:
        out["seed"] = args.seed
    if args.threads is not None:
        out["threads"] = args.threads
    command = args.command
    if command == "synth" and args.seed is not None:
        out["synthetic"]["seed"] = args.seed
    if command == "split":
        if args.seed is not None:
            out["split"]["seed"] = args.seed
        if args.contamination is not None:
            out["split"]["contamination_rate"] = args.contamination
    if command == "drift":
        for key in ("metric", "feature"):
            if getattr(args, key) is not None:
                out["drift"][key] = getattr(args, key)
        if args.class_pair is not None:
            out["drift"]["class_pair"] = args.class_pair
        if args.repeats is not None:
            out["drift"]["repeats"] = args.repeats
        if args.sample_size is not None:
            out["drift"]["sample_size"] = args.sample_size
    if command == "train" and args.strategy is not None:
        out["strategy"] = args.strategy
    if command in ("train", "strategies") and args.epochs is not None:
        out["model"]["epochs"] = args.epochs
    if command in ("train", "strategies", "bench") and args.no_progress:
        out["model"]["show_progress"] = False
    if command == "bench":
        if args.detectors is not None:
            out["detectors"]["names"] = args.detectors
        if args.seeds is not None:
            out["detectors"]["seeds"] = args.seeds
        if args.features is not None:
            out["detectors"]["features"] = args.features
        if args.train_fraction is not None:
            out["detectors"]["train_fraction"] = args.train_fraction
    return {k: v for k, v in out.items() if v != {}}


def _load_splits(directory: str) -> tuple[BenchmarkSplits, Vocabulary]:
    path = Path(directory)
    return load_splits(path), load_vocabulary(path / VOCAB_FILE)


def _records_by_year(splits: BenchmarkSplits) -> dict[int, list[RawRecord]]:
    by_year: dict[int, list[RawRecord]] = defaultdict(list)
    for ys in splits.train:
        by_year[ys.year].extend(ys.records)
    for _, ys in splits.test_sets():
        by_year[ys.year].extend(ys.records)
    return dict(sorted(by_year.items()))


def _tokens(records, vocab: Vocabulary, config: RunConfig) -> np.ndarray:
    return token_matrix(
        encode_all(records, vocab, config.layout.feature_treatments(), config.threads)
    )


def _test_tokens(splits, vocab, config) -> dict[tuple[str, int], tuple[np.ndarray, np.ndarray]]:
    return {
        (split, ys.year): (
            _tokens(ys.records, vocab, config),
            np.array([r.label.is_anomaly for r in ys.records], dtype=bool),
        )
        for split, ys in splits.test_sets()
    }


def _seeds(config: RunConfig) -> list[int]:
    return config.detectors.seeds or [config.seed + i for i in range(DEFAULT_SEED_COUNT)]


def cmd_init_config(args: argparse.Namespace, config: RunConfig) -> None:
    path = Path(args.path)
    if not write_default_config(path):
        raise BenchError(f"{path} already exists; refusing to overwrite it.")
    print(f"Wrote default configuration to {path}", file=sys.stderr)


def cmd_synth(args: argparse.Namespace, config: RunConfig) -> None:
    records = generate_synthetic(config.synthetic)
    output = write_dataset(records, args.output, config.layout)
    write_sidecar(output, "dataset", config, config.seed, {"n_records": len(records)})
    print(f"Wrote {len(records)} records to {output}", file=sys.stderr)


def cmd_split(args: argparse.Namespace, config: RunConfig) -> None:
    result = read_dataset(args.input, config.layout)
    splits = plan_splits(result.records, config.split)
    vocab = build_vocabulary(splits.train_records, config.layout.feature_treatments())
    out = Path(args.output_dir)
    save_splits(splits, out, config.layout, config, config.seed)
    save_vocabulary(vocab, out / VOCAB_FILE)
    for p in splits.provenance:
        print(
            f"{p.split.upper():<5}  {p.year}  normals {p.n_normal:>7}  "
            f"anomalies {p.n_anomaly:>7}  ratio {p.realized_anomaly_ratio:.3f}"
        )
    if splits.injected:
        print(f"{len(splits.injected)} anomalies injected into TRAIN", file=sys.stderr)


def cmd_drift(args: argparse.Namespace, config: RunConfig) -> None:
    splits, vocab = _load_splits(args.splits)
    drift = config.drift
    by_year = _records_by_year(splits)
    if drift.metric == "jeffreys":
        matrix = divergence_matrix(
            {year: _tokens(recs, vocab, config) for year, recs in by_year.items()},
            drift.feature, vocab, drift.smoothing, config.threads,
        )
    else:
        vectorizer = FeatureVectorizer("onehot", vocab, config.layout.feature_treatments())
        vectorizer.fit(splits.train_records)
        points = {
            year: LabelledPoints(
                vectorizer.transform(recs),
                np.array([r.label.is_anomaly for r in recs], dtype=bool),
            )
            for year, recs in by_year.items()
        }
        matrix = dataset_distance_report(
            points, tuple(drift.class_pair), drift.sample_size, drift.repeats,
            config.seed, drift.epsilon, drift.max_iters, drift.tol, config.threads,
        )
        if args.pca:
            recs = [r for year_recs in by_year.values() for r in year_recs]
            projection = pca_project(vectorizer.transform(recs), drift.pca_components)
            pca_path = write_projection_csv(
                projection, [r.year for r in recs], [r.label.is_anomaly for r in recs],
                args.pca,
            )
            write_sidecar(
                pca_path, "projection", config, config.seed,
                {"n_points": len(recs),
                 "explained_ratio": [float(v) for v in projection.explained_ratio]},
            )
    csv_path, _ = write_distance_matrix(matrix, args.output, config, config.seed)
    print(matrix.to_csv(), end="")
    print(f"Wrote {csv_path}", file=sys.stderr)


def cmd_train(args: argparse.Namespace, config: RunConfig) -> None:
    splits, vocab = _load_splits(args.splits)
    sets = [_tokens(ys.records, vocab, config) for ys in splits.train]
    if config.strategy == "iid":
        result = train_iid(sets, config.model, vocab.size, config.seed)
    elif config.strategy == "finetune":
        initial = init_model(config.model, vocab.size, config.seed)
        result = train_finetune(initial, sets, config.model, config.seed)
    else:
        result = train_distill(None, sets, config.model, vocab.size, config.seed)
    save_checkpoint(result.model, vocab, args.output, config, config.seed)
    for stage, losses in enumerate(result.epoch_losses, 1):
        print(f"stage {stage}: " + " ".join(f"{v:.4f}" for v in losses))
    print(f"Wrote {config.strategy} checkpoint to {args.output}", file=sys.stderr)


def strategy_table(rows: list[StrategyRow]) -> str:
    lines = [
        f"{'Strategy':<8}  {'Stage':<5}  {'Through':<7}  {'Split':<5}  {'Year':<4}  ROC-AUC",
        f"{'=' * 8}  {'=' * 5}  {'=' * 7}  {'=' * 5}  {'=' * 4}  {'=' * 7}",
    ]
    for r in rows:
        lines.append(
            f"{r.strategy:<8}  {r.stage + 1:<5}  {r.last_train_year:<7}  "
            f"{r.test_split.upper():<5}  {r.test_year:<4}  {100 * r.roc_auc:6.2f}"
        )
    return "\n".join(lines) + "\n"


def cmd_strategies(args: argparse.Namespace, config: RunConfig) -> None:
    splits, vocab = _load_splits(args.splits)
    yearly = [(ys.year, _tokens(ys.records, vocab, config)) for ys in splits.train]
    rows = run_strategies(
        yearly, _test_tokens(splits, vocab, config), config.model, vocab.size,
        config.seed, args.strategies,
    )
    write_json_artifact(
        args.output, "strategies", config, config.seed,
        {"rows": [vars(r) for r in rows]},
    )
    print(strategy_table(rows), end="")


def cmd_bench(args: argparse.Namespace, config: RunConfig) -> None:
    splits, vocab = _load_splits(args.splits)
    treatments = config.layout.feature_treatments()
    scorers: dict[str, dict[int, FittedDetector]] = {}
    for name in config.detectors.names:
        scorers[name] = {}
        for seed in _seeds(config):
            fitted = fit_detector(
                name, splits.train_records, config.detectors, seed, vocab, treatments,
                config.model, config.threads,
            )
            scorers[name][seed] = fitted
            if args.save_states:
                save_detector(
                    fitted,
                    Path(args.save_states) / create_filename(f"{name} seed{seed}", "npz"),
                    config,
                )
    report = evaluate_benchmark(scorers, splits, config.threads, config_hash(config))
    out = Path(args.output_dir)
    write_json_artifact(
        out / "report.json", "eval_report", config, config.seed,
        report.model_dump(mode="json"),
    )
    text = report.to_text()
    report_txt = atomic_write(out / "report.txt", text)
    write_sidecar(report_txt, "eval_report_text", config, config.seed)
    print(text, end="")


def cmd_monthly(args: argparse.Namespace, config: RunConfig) -> None:
    splits, vocab = _load_splits(args.splits)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint, vocab)
        detector = MaskedModelScorer(model.config, vocab.size, config.seed)
        detector.model = model
        vectorizer = FeatureVectorizer("tokens", vocab, config.layout.feature_treatments())
        scorer = FittedDetector("mlm", config.seed, vectorizer.fit(splits.train_records),
                                detector, config.threads)
    else:
        scorer = load_detector(args.detector_state, config.threads)
        if scorer.run_config_hash and scorer.run_config_hash != config_hash(config):
            logger.warning(
                "%s was fitted under config %s, not the current %s",
                args.detector_state, scorer.run_config_hash[:12], config_hash(config)[:12],
            )
    records = [
        r
        for split, ys in splits.test_sets()
        if (args.split is None or split == args.split)
        and (args.year is None or ys.year == args.year)
        for r in ys.records
    ]
    if not records:
        raise BenchError("no test records match the requested split/year")
    rows = monthly_breakdown(scorer, records, scorer.name)
    csv_path = write_monthly_csv(rows, args.output)
    write_sidecar(
        csv_path, "monthly", config, scorer.seed,
        {"scorer": scorer.name, "split": args.split, "year": args.year},
    )
    for row in rows:
        auc = "   n/a" if row.roc_auc is None else f"{100 * row.roc_auc:6.2f}"
        print(f"{row.year_month}  {auc}  ({row.n_in} in / {row.n_out} out)")


def cmd_params(args: argparse.Namespace, config: RunConfig) -> None:
    if args.vocab_size is not None:
        vocab_size = args.vocab_size
    elif args.vocab:
        vocab_size = load_vocabulary(args.vocab).size
    else:
        records = generate_synthetic(config.synthetic)
        vocab_size = build_vocabulary(records, config.layout.feature_treatments()).size
    model = init_model(config.model, vocab_size, config.seed)
    count = parameter_count(model)
    closed = expected_parameter_count(config.model, vocab_size)
    m = config.model
    print(f"Vocabulary size V = {vocab_size}")
    print(f"Formula: {PARAMETER_FORMULA}")
    print(f"  with h={m.hidden}, i={m.intermediate}, T={m.seq_len}, L={m.n_layers}")
    print(f"Closed form: {closed}")
    print(f"Counted:     {count}")
    print(f"Delta vs {REFERENCE_PARAMETER_COUNT}: {count - REFERENCE_PARAMETER_COUNT:+d}")
    if closed != count:
        raise BenchError("counted parameters disagree with the closed form")


def _verify_hash(stored: Optional[str], config_data: Optional[dict], label: str) -> str:
    if config_data is None:
        raise ArtifactMismatch(f"{label} carries no embedded run configuration")
    recomputed = config_hash(RunConfig.model_validate(config_data))
    if recomputed != stored:
        raise ArtifactMismatch(
            f"{label}: embedded hash {stored} does not match its config ({recomputed})"
        )
    return recomputed


def cmd_verify(args: argparse.Namespace, config: RunConfig) -> None:
    path = Path(args.artifact)
    data = None
    if path.suffix == ".pt":
        blob = read_checkpoint(path)
        stored, embedded = blob["config_hash"], blob.get("run_config")
    elif path.suffix == ".npz":
        stored, embedded, _ = state_provenance(path)
    else:
        data = read_json_artifact(path)
        stored, embedded = data.get("config_hash"), data.get("config")
    recomputed = _verify_hash(stored, embedded, str(path))
    if data is not None:
        check_sidecar_data(path, data)
    if args.config and config_hash(config) != recomputed:
        raise ArtifactMismatch(
            f"{path} was produced by a different configuration than {args.config}"
        )
    print(f"OK {path} config_hash={recomputed}")


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    group = common.add_argument_group("Run Options")
    group.add_argument(
        "--config", type=str, metavar="FILE", default=None,
        help="JSON run configuration; flags override its keys."
    )
    group.add_argument(
        "--seed", type=int, default=None, metavar="N",
        help="Global seed (default: SHIFT_BENCH_SEED or the config file)."
    )
    group.add_argument(
        "--threads", type=int, default=None, metavar="N",
        help="Upper bound on worker threads. Results do not depend on it."
    )
    group.add_argument(
        "--log-level", type=str, default=settings.log_level,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging verbosity on stderr (default: %(default)s)."
    )
    return common


def build_parser() -> argparse.ArgumentParser:
    epilog_examples = """
EXAMPLES:

  1. Generate the synthetic drifting corpus and cut the chronological splits:
     shift-bench synth --output runs/synth.tsv
     shift-bench split --input runs/synth.tsv --output-dir runs/splits

  2. Jeffreys divergence of the 'service' histograms between years:
     shift-bench drift --splits runs/splits --metric jeffreys --feature service \\
         --output runs/jeffreys_service

  3. Benchmark the classic detectors over three seeds:
     shift-bench bench --splits runs/splits --detectors ecod copod iforest lof \\
         --output-dir runs/bench

  4. Compare iid, finetune and distill training of the masked model:
     shift-bench strategies --splits runs/splits --output runs/strategies.json

  5. Check that an artifact still matches its embedded configuration:
     shift-bench verify runs/bench/report.json

CONFIGURATION:
  Environment defaults are read from .env, ~/.env and
  ~/.config/kyoto-shift-bench/.env, e.g.:
  $ echo "SHIFT_BENCH_THREADS=8" >> .env
  A full run configuration template is written by 'shift-bench init-config'.
"""
    parser = argparse.ArgumentParser(
        prog="shift-bench",
        description=(
            "Benchmark unsupervised network anomaly detectors under "
            "chronological distribution shift (Kyoto-2006+ layout)."
        ),
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=epilog_examples,
    )
    common = _common_options()
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("init-config", parents=[common], help="Write a default run config.")
    p.add_argument("path", nargs="?", default="shift-bench.json", metavar="PATH")

    p = sub.add_parser("synth", parents=[common], help="Generate a synthetic drifting corpus.")
    p.add_argument("--output", required=True, metavar="FILE")

    p = sub.add_parser("split", parents=[common], help="Plan TRAIN/IID/NEAR/FAR splits.")
    p.add_argument("--input", required=True, metavar="FILE")
    p.add_argument("--output-dir", required=True, metavar="DIR")
    p.add_argument(
        "--contamination", type=float, default=None, metavar="RATE",
        help="Fraction of TRAIN replaced by anomalies labelled normal."
    )

    p = sub.add_parser("drift", parents=[common], help="Year-by-year drift matrices.")
    p.add_argument("--splits", required=True, metavar="DIR")
    p.add_argument("--output", required=True, metavar="STEM",
                   help="Writes STEM.csv and a STEM.json sidecar.")
    p.add_argument("--metric", choices=["jeffreys", "sinkhorn"], default=None)
    p.add_argument("--feature", default=None, metavar="NAME")
    p.add_argument("--class-pair", nargs=2, choices=["inlier", "outlier"], default=None)
    p.add_argument("--repeats", type=int, default=None, metavar="N")
    p.add_argument("--sample-size", type=int, default=None, metavar="N")
    p.add_argument("--pca", default=None, metavar="FILE",
                   help="Also write PCA coordinates of every year's points (sinkhorn only).")

    p = sub.add_parser("train", parents=[common], help="Train the masked model.")
    p.add_argument("--splits", required=True, metavar="DIR")
    p.add_argument("--output", required=True, metavar="FILE")
    p.add_argument("--strategy", choices=["iid", "finetune", "distill"], default=None)
    p.add_argument("--epochs", type=int, default=None, metavar="N")
    p.add_argument("--no-progress", action="store_true")

    p = sub.add_parser("strategies", parents=[common],
                       help="Stage-by-stage comparison of the training strategies.")
    p.add_argument("--splits", required=True, metavar="DIR")
    p.add_argument("--output", required=True, metavar="FILE")
    p.add_argument("--strategies", nargs="+", choices=["iid", "finetune", "distill"],
                   default=["iid", "finetune", "distill"])
    p.add_argument("--epochs", type=int, default=None, metavar="N")
    p.add_argument("--no-progress", action="store_true")

    p = sub.add_parser("bench", parents=[common], help="Evaluate detectors on every split.")
    p.add_argument("--splits", required=True, metavar="DIR")
    p.add_argument("--output-dir", required=True, metavar="DIR")
    p.add_argument("--detectors", nargs="+",
                   choices=["ecod", "copod", "iforest", "lof", "mlm"], default=None)
    p.add_argument("--seeds", nargs="+", type=int, default=None, metavar="N")
    p.add_argument("--features", choices=["onehot", "raw"], default=None)
    p.add_argument("--train-fraction", type=float, default=None, metavar="F")
    p.add_argument("--save-states", default=None, metavar="DIR",
                   help="Also write each fitted detector's state file here.")
    p.add_argument("--no-progress", action="store_true")

    p = sub.add_parser("monthly", parents=[common], help="Per-month metrics for one scorer.")
    p.add_argument("--splits", required=True, metavar="DIR")
    p.add_argument("--output", required=True, metavar="FILE")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoint", metavar="FILE")
    source.add_argument("--detector-state", metavar="FILE")
    p.add_argument("--split", choices=["iid", "near", "far"], default=None)
    p.add_argument("--year", type=int, default=None)

    p = sub.add_parser("params", parents=[common], help="Report the masked model's size.")
    vocab = p.add_mutually_exclusive_group()
    vocab.add_argument("--vocab", metavar="FILE")
    vocab.add_argument("--vocab-size", type=int, metavar="V")

    p = sub.add_parser("verify", parents=[common], help="Re-hash an artifact's config.")
    p.add_argument("artifact", metavar="ARTIFACT")
    return parser


COMMANDS = {
    "init-config": cmd_init_config,
    "synth": cmd_synth,
    "split": cmd_split,
    "drift": cmd_drift,
    "train": cmd_train,
    "strategies": cmd_strategies,
    "bench": cmd_bench,
    "monthly": cmd_monthly,
    "params": cmd_params,
    "verify": cmd_verify,
}


def main():
    """Parses command-line arguments and runs the requested command."""
    parser = build_parser()
    args = parser.parse_args()
    _configure_logging(args.log_level)
    try:
        config = load_run_config(args.config, _overrides(args))
        COMMANDS[args.command](args, config)
    except (BenchError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(1)
    except KeyboardInterrupt:
        print("\nOperation cancelled by user. Exiting.", file=sys.stderr)
        sys.exit(130)


if __name__ == "__main__":
    main()
