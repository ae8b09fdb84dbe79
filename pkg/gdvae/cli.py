"""Command-line interface for gdvae."""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Callable, Dict, List, Optional

from .config import (
    DEBUG_MODE,
    GRAPH_VARIANTS,
    LOG_LEVEL,
    TrainConfig,
    config_digest,
    load_config,
    parse_tasks,
    save_config,
    validate_config,
)
from .corpus import (
    Corpus,
    apply_frequency_threshold,
    corpus_digest,
    generate_synthetic_corpus,
    load_admissions,
    load_synthetic_spec,
    planted_spec,
    save_admissions,
    split,
    split_digest,
)
from .evaluation import (
    code_names,
    evaluate,
    export_embeddings,
    predict_type,
    recommend,
    topic_top_words,
    write_reports,
)
from .graph import build_graph, export_graph
from .trainer import ablation_matrix, comparison_table, run_trials, train
from .utils.run_manifest import (
    CONFIG_FILE,
    CORPUS_FILE,
    METRICS_FILE,
    SPLITS_FILE,
    RunManifest,
    default_run_dir,
    load_run,
    prepare_run_dir,
    save_splits,
)

logger = logging.getLogger("gdvae.cli")


def setup_logging() -> None:
    """Configure root logging from LOG_LEVEL and DEBUG_MODE."""
    level = logging.DEBUG if DEBUG_MODE else getattr(logging, LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")


def _emit(record: Dict) -> None:
    print(json.dumps(record, sort_keys=True))


def _config_from_args(args: argparse.Namespace) -> TrainConfig:
    """Load --config and apply --seed, --tasks and --graph-variant overrides."""
    config = load_config(args.config) if args.config else TrainConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "tasks", None):
        overrides["tasks"] = parse_tasks(args.tasks)
    if getattr(args, "graph_variant", None):
        overrides["graph_variant"] = args.graph_variant
    config = replace(config, **overrides)
    validate_config(config)
    return config


def _prepared_corpus(path: str, config: TrainConfig) -> Corpus:
    """Load and threshold admissions, then rebuild vocabularies and labels from what remains."""
    corpus = apply_frequency_threshold(load_admissions(path), config.min_count)
    return Corpus.from_records(corpus.admissions)


def _start_run(args: argparse.Namespace, config: TrainConfig, corpus: Corpus, splits) -> tuple:
    run_dir = prepare_run_dir(args.out or default_run_dir(config), force=args.force)
    save_config(config, os.path.join(run_dir, CONFIG_FILE))
    save_admissions(corpus, os.path.join(run_dir, CORPUS_FILE))
    save_splits(splits, os.path.join(run_dir, SPLITS_FILE))
    manifest = RunManifest(
        config_digest=config_digest(config),
        corpus_digest=corpus_digest(corpus),
        split_digest=split_digest(splits),
        seed=config.seed,
    )
    for name, filename in (("config", CONFIG_FILE), ("corpus", CORPUS_FILE), ("splits", SPLITS_FILE)):
        manifest.record(name, filename)
    manifest.save(run_dir)
    return run_dir, manifest


def cmd_synth(args: argparse.Namespace) -> int:
    if os.path.exists(args.out) and not args.force:
        raise FileExistsError(f"{args.out} already exists; pass --force to overwrite")
    spec = load_synthetic_spec(args.spec) if args.spec else planted_spec()
    corpus, _ = generate_synthetic_corpus(spec, args.seed if args.seed is not None else 0)
    save_admissions(corpus, args.out)
    logger.info(f"Wrote {len(corpus)} synthetic admissions to {args.out}")
    _emit({"admissions": len(corpus), "out": args.out})
    return 0


def cmd_build_graph(args: argparse.Namespace) -> int:
    if os.path.exists(args.out) and not args.force:
        raise FileExistsError(f"{args.out} already exists; pass --force to overwrite")
    config = _config_from_args(args)
    corpus = _prepared_corpus(args.data, config)
    train_ids, _, _ = split(corpus, config.split, config.seed)
    graph = build_graph(corpus, train_ids, config.graph_variant)
    export_graph(graph, args.out)
    _emit({"nodes": graph.layout.size, "edges": int(graph.adjacency.nnz), "out": args.out})
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    corpus = _prepared_corpus(args.data, config)
    splits = split(corpus, config.split, config.seed)
    run_dir, manifest = _start_run(args, config, corpus, splits)

    graph = build_graph(corpus, splits[0], config.graph_variant)
    result = train(config, corpus, graph, splits)
    for name, path in result.save(run_dir).items():
        manifest.record(name, os.path.basename(path))
    manifest.save(run_dir)
    _emit({"run": run_dir, "best_epoch": result.best_epoch, "best_val_elbo": result.best_val_elbo})
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    run = load_run(args.run)
    metrics_path = os.path.join(run.run_dir, METRICS_FILE)
    if os.path.exists(metrics_path) and not args.force:
        raise FileExistsError(f"{metrics_path} already exists; pass --force to overwrite")
    tasks = [t for t in ("T", "R", "P") if t in run.config.tasks]
    reports = evaluate(run.model, run.corpus, run.splits[0], run.splits[2], tasks)
    write_reports(reports, metrics_path)
    run.manifest.record("metrics", METRICS_FILE)
    run.manifest.save(run.run_dir)
    for report in reports:
        print(report.to_json())
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    corpus = _prepared_corpus(args.data, config)
    splits = split(corpus, config.split, config.seed)
    run_dir, manifest = _start_run(args, config, corpus, splits)

    graph = build_graph(corpus, splits[0], config.graph_variant)
    table = comparison_table(ablation_matrix(config, corpus, graph, splits))
    with open(os.path.join(run_dir, "ablation.jsonl"), "w", encoding="utf-8") as f:
        for row in table:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    manifest.record("ablation", "ablation.jsonl")
    manifest.save(run_dir)
    for row in table:
        _emit(row)
    return 0


def cmd_trials(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    corpus = _prepared_corpus(args.data, config)
    splits = split(corpus, config.split, config.seed)
    run_dir, manifest = _start_run(args, config, corpus, splits)

    summary = run_trials(config, corpus, args.trials)
    record = {"trials": args.trials, "mean": summary.mean, "std": summary.std, "per_trial": summary.per_trial}
    with open(os.path.join(run_dir, "trials.json"), "w", encoding="utf-8") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")
    manifest.record("trials", "trials.json")
    manifest.save(run_dir)
    _emit({"mean": summary.mean, "std": summary.std})
    return 0


def cmd_topics(args: argparse.Namespace) -> int:
    run = load_run(args.run)
    top = min(args.top, run.model.num_codes)
    summary = topic_top_words(run.model.topic_matrix(), top, code_names(run.corpus))
    for k, ranked in enumerate(summary.topics):
        words = summary.words(k)
        _emit({"topic": k, "codes": [[w, p] for w, (_, p) in zip(words, ranked)]})
    return 0


def cmd_recommend(args: argparse.Namespace) -> int:
    run = load_run(args.run)
    procedures = recommend(run.model, run.corpus, args.admission_id, args.top)
    _emit({"admission_id": args.admission_id, "procedures": procedures})
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    run = load_run(args.run)
    label, probs = predict_type(run.model, run.corpus, args.admission_id)
    _emit(
        {
            "admission_id": args.admission_id,
            "label": label,
            "probabilities": {name: float(p) for name, p in zip(run.corpus.labels, probs)},
        }
    )
    return 0


def cmd_export_embeddings(args: argparse.Namespace) -> int:
    if os.path.exists(args.out) and not args.force:
        raise FileExistsError(f"{args.out} already exists; pass --force to overwrite")
    run = load_run(args.run)
    rows = export_embeddings(run.model, run.corpus, args.out, which=args.which, task=args.task)
    _emit({"rows": rows, "out": args.out})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gdvae", description="Graph-driven VAEs for admission data")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, handler: Callable[[argparse.Namespace], int], help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(handler=handler)
        p.add_argument("--force", action="store_true", help="Overwrite existing outputs")
        return p

    def add_experiment_flags(p: argparse.ArgumentParser, out_required: bool = False) -> None:
        p.add_argument("--config", help="Flat key = value config file")
        p.add_argument("--data", required=True, help="Admission file (one JSON record per line)")
        p.add_argument("--out", required=out_required, help="Output path")
        p.add_argument("--seed", type=int, help="Override the config seed")
        p.add_argument("--tasks", help="Active tasks, e.g. T,R,P")
        p.add_argument("--graph-variant", choices=GRAPH_VARIANTS, help="Graph weighting variant")

    p = add("synth", cmd_synth, "Generate a synthetic admission corpus")
    p.add_argument("--out", required=True, help="Admission file to write")
    p.add_argument("--spec", help="SyntheticSpec file; a planted spec is used when omitted")
    p.add_argument("--seed", type=int, help="Generator seed (default 0)")

    add_experiment_flags(add("build-graph", cmd_build_graph, "Build and export the admission graph"), True)
    add_experiment_flags(add("train", cmd_train, "Train a model into a run directory"))
    add_experiment_flags(add("ablate", cmd_ablate, "Train and compare all seven task subsets"))
    p = add("trials", cmd_trials, "Repeat training over several seeds and summarize")
    add_experiment_flags(p)
    p.add_argument("--trials", type=int, default=10, help="Number of trials (default 10)")

    p = add("eval", cmd_eval, "Evaluate a trained run on its test split")
    p.add_argument("--run", required=True, help="Run directory")

    p = add("topics", cmd_topics, "Print the top codes of each topic")
    p.add_argument("--run", required=True, help="Run directory")
    p.add_argument("--top", type=int, default=10, help="Codes per topic")

    p = add("recommend", cmd_recommend, "Recommend procedures for an admission")
    p.add_argument("--run", required=True, help="Run directory")
    p.add_argument("--admission-id", required=True, help="Admission id")
    p.add_argument("--top", type=int, default=10, help="Number of procedures")

    p = add("predict", cmd_predict, "Predict the type of an admission")
    p.add_argument("--run", required=True, help="Run directory")
    p.add_argument("--admission-id", required=True, help="Admission id")

    p = add("export-embeddings", cmd_export_embeddings, "Export admission latents or code representations")
    p.add_argument("--run", required=True, help="Run directory")
    p.add_argument("--out", required=True, help="TSV file to write")
    p.add_argument("--which", choices=("admissions", "codes"), default="admissions")
    p.add_argument("--task", choices=("T", "R", "P"), default="P")

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run the CLI; errors become one JSON line on stderr and exit code 1."""
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ValueError, OSError, RuntimeError, FloatingPointError) as e:
        logger.error(f"{args.command} failed: {e}", exc_info=DEBUG_MODE)
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
