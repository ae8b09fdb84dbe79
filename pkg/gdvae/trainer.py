"""Joint training: biterm documents, batching, epochs, early stopping, ablations and trials."""

import itertools
import json
import logging
import math
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .checkpoint import save_checkpoint
from .config import GRAPH_VARIANTS, SHOW_PROGRESS, TASKS, TrainConfig, task_key, task_mask, threads
from .corpus import Corpus, CorpusError, split, split_digest
from .evaluation import MetricReport, evaluate, flatten_reports
from .graph import AdmissionGraph, build_graph
from .model import GDVAE, TaskBatch, elbo_joint
from .neural.optim import Adam, NonFiniteError

logger = logging.getLogger("gdvae.trainer")

Splits = Tuple[List[str], List[str], List[str]]

TASK_SUBSETS: Tuple[FrozenSet[str], ...] = tuple(
    frozenset(combo) for size in (1, 2, 3) for combo in itertools.combinations(TASKS, size)
)


class TrainingDivergedError(RuntimeError):
    """Raised when the loss becomes non-finite during training."""


@dataclass
class BitermDocument:
    """Unordered code pairs pooled from several admissions.

    Pairs are formed within each contributing admission; ``codes`` is the union of their
    code sets, which the topic head pools over.
    """

    biterms: List[Tuple[int, int]]
    admission_ids: List[str]
    codes: np.ndarray


@dataclass
class TrainResult:
    model: GDVAE
    best_epoch: int
    best_val_elbo: float
    log: List[Dict] = field(default_factory=list)

    def save(self, run_dir: str) -> Dict[str, str]:
        """Write the checkpoint and epoch log into ``run_dir``."""
        checkpoint_path = os.path.join(run_dir, "checkpoint.gdvae")
        log_path = os.path.join(run_dir, "epochs.jsonl")
        save_checkpoint(self.model, checkpoint_path)
        with open(log_path, "w", encoding="utf-8") as f:
            for record in self.log:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        return {"checkpoint": checkpoint_path, "epochs": log_path}


def global_code_indices(corpus: Corpus) -> Dict[str, int]:
    nd = len(corpus.disease_vocab)
    index = dict(corpus.disease_vocab.index)
    index.update({code: nd + i for code, i in corpus.procedure_vocab.index.items()})
    return index


def make_biterm_documents(
    corpus: Corpus, train_ids: Sequence[str], merge_count: int, num_docs: int, rng: np.random.Generator
) -> List[BitermDocument]:
    """Sample merged biterm documents from training admissions.

    Each document draws ``merge_count`` admissions without replacement and pools the
    unordered code pairs of each admission into one bag.

    Raises:
        CorpusError: If fewer than ``merge_count`` training admissions exist
    """
    if merge_count > len(train_ids):
        raise CorpusError(f"Cannot merge {merge_count} admissions from {len(train_ids)} training admissions")
    index = global_code_indices(corpus)
    code_sets = [sorted(index[c] for c in corpus.get(adm_id).codes) for adm_id in train_ids]

    docs = []
    for _ in range(num_docs):
        picks = rng.choice(len(train_ids), size=merge_count, replace=False)
        biterms: List[Tuple[int, int]] = []
        codes: set = set()
        for k in picks:
            biterms.extend(itertools.combinations(code_sets[k], 2))
            codes.update(code_sets[k])
        docs.append(
            BitermDocument(
                biterms=biterms,
                admission_ids=[train_ids[k] for k in picks],
                codes=np.array(sorted(codes), dtype=np.int64),
            )
        )
    return docs


def topic_batch(docs: Sequence[BitermDocument]) -> TaskBatch:
    """Flatten documents into one topic batch; repeated biterms become counts."""
    doc_index, left, right, counts = [], [], [], []
    for d, doc in enumerate(docs):
        for (i, j), c in sorted(Counter(doc.biterms).items()):
            doc_index.append(d)
            left.append(i)
            right.append(j)
            counts.append(c)
    return TaskBatch(
        task="T",
        doc_codes=[doc.codes for doc in docs],
        biterm_doc=np.array(doc_index, dtype=np.int64),
        biterm_left=np.array(left, dtype=np.int64),
        biterm_right=np.array(right, dtype=np.int64),
        biterm_count=np.array(counts, dtype=np.float64),
    )


def admission_batch(task: str, corpus: Corpus, graph: AdmissionGraph, ids: Sequence[str]) -> TaskBatch:
    """Recommendation or prediction batch: graph positions as inputs, corpus targets."""
    positions = {adm_id: k for k, adm_id in enumerate(graph.admission_ids)}
    rows = np.array([positions[i] for i in ids], dtype=np.int64)
    if task == "R":
        targets = np.zeros((len(ids), len(corpus.procedure_vocab)))
        for b, adm_id in enumerate(ids):
            for code in corpus.get(adm_id).procedures:
                targets[b, corpus.procedure_vocab.index[code]] = 1.0
    elif task == "P":
        targets = np.array([corpus.label_index(corpus.get(i).type_label) for i in ids], dtype=np.float64)
    else:
        raise ValueError(f"Admission batches are for tasks R and P, not {task!r}")
    return TaskBatch(task=task, positions=rows, targets=targets)


def eligible_ids(task: str, corpus: Corpus, graph: AdmissionGraph, ids: Sequence[str]) -> List[str]:
    """Ids usable by a task: recommendation needs diseases to pool and procedures to predict."""
    if task != "R":
        return list(ids)
    positions = {adm_id: k for k, adm_id in enumerate(graph.admission_ids)}
    kept = [i for i in ids if len(graph.admission_diseases[positions[i]]) > 0 and corpus.get(i).procedures]
    if len(kept) < len(ids):
        logger.warning(f"Excluded {len(ids) - len(kept)} admissions without diseases or procedures from task R")
    return kept


def _cyclic(order: Sequence, start: int, size: int) -> list:
    size = min(size, len(order))
    return [order[(start + k) % len(order)] for k in range(size)]


class Trainer:
    """Trains one GD-VAE for one config, corpus, graph and split."""

    def __init__(
        self,
        config: TrainConfig,
        corpus: Corpus,
        graph: AdmissionGraph,
        splits: Splits,
        show_progress: bool = SHOW_PROGRESS,
    ):
        """Initialize the trainer, model, optimizer and fixed biterm documents."""
        self.config = config
        self.corpus = corpus
        self.graph = graph
        self.train_ids, self.val_ids, self.test_ids = splits
        self.show_progress = show_progress
        self.tasks = [t for t in TASKS if t in config.tasks]

        seeds = np.random.SeedSequence([config.seed, task_mask(config.tasks)]).spawn(4)
        init_rng, self.data_rng, self.noise_rng = (np.random.default_rng(s) for s in seeds[:3])
        self.val_seed = seeds[3]

        self.model = GDVAE(config, graph, len(corpus.labels), init_rng)
        self.optimizer = Adam(self.model.parameters(self.tasks), lr=config.learning_rate)

        self.train_task_ids = {t: eligible_ids(t, corpus, graph, self.train_ids) for t in self.tasks if t != "T"}
        for task, ids in self.train_task_ids.items():
            if not ids:
                raise CorpusError(f"No training admissions usable for task {task}")
        self.docs: List[BitermDocument] = []
        self.val_docs: List[BitermDocument] = []
        if "T" in self.tasks:
            self.docs = make_biterm_documents(
                corpus, self.train_ids, config.merge_count, config.num_biterm_docs, self.data_rng
            )
            num_val_docs = max(1, round(config.num_biterm_docs * len(self.val_ids) / len(self.train_ids)))
            self.val_docs = make_biterm_documents(
                corpus,
                self.val_ids,
                min(config.merge_count, len(self.val_ids)),
                num_val_docs,
                np.random.default_rng(np.random.SeedSequence([config.seed, task_mask(config.tasks), 1])),
            )
        self.val_batches = self._validation_batches()

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.train_ids) / self.config.batch_size)

    def _validation_batches(self) -> Dict[str, TaskBatch]:
        batches: Dict[str, TaskBatch] = {}
        for task in self.tasks:
            if task == "T":
                batches[task] = topic_batch(self.val_docs)
            else:
                ids = eligible_ids(task, self.corpus, self.graph, self.val_ids)
                if ids:
                    batches[task] = admission_batch(task, self.corpus, self.graph, ids)
        return batches

    def epoch_batches(self) -> Iterator[Dict[str, TaskBatch]]:
        """Batches for one epoch, each step taking the next slice of a fresh per-epoch shuffle."""
        bs = self.config.batch_size
        orders = {}
        for task in self.tasks:
            if task == "T":
                orders[task] = list(self.data_rng.permutation(len(self.docs)))
            else:
                ids = self.train_task_ids[task]
                orders[task] = [ids[k] for k in self.data_rng.permutation(len(ids))]
        for step in range(self.steps_per_epoch):
            batches = {}
            for task in self.tasks:
                picked = _cyclic(orders[task], step * bs, bs)
                if task == "T":
                    batches[task] = topic_batch([self.docs[k] for k in picked])
                else:
                    batches[task] = admission_batch(task, self.corpus, self.graph, picked)
            yield batches

    def validation_elbo(self) -> float:
        """Summed validation ELBO of the active tasks under a fixed noise stream."""
        if not self.val_batches:
            return float("nan")
        result = elbo_joint(self.val_batches, self.model, np.random.default_rng(self.val_seed), backward=False)
        return -result.loss

    def fit(self) -> TrainResult:
        """Run all epochs with early stopping and restore the best validation parameters."""
        config = self.config
        log: List[Dict] = []
        best_elbo = -math.inf
        best_epoch = 0
        best_values = {name: p.value.copy() for name, p in self.model.params.items()}
        stale = 0
        key = task_key(config.tasks)

        epochs = tqdm(range(1, config.epochs + 1), desc=f"train {key}", disable=not self.show_progress)
        for epoch in epochs:
            losses: List[float] = []
            task_totals = {t: 0.0 for t in self.tasks}
            for step, batches in enumerate(self.epoch_batches(), start=1):
                self.optimizer.zero_grad()
                try:
                    result = elbo_joint(batches, self.model, self.noise_rng)
                    self.optimizer.step()
                except NonFiniteError as e:
                    raise TrainingDivergedError(f"Training {key} diverged at epoch {epoch} step {step}: {e}") from e
                losses.append(result.loss)
                for t, value in result.task_losses.items():
                    task_totals[t] += value
                logger.debug(f"epoch {epoch} step {step} loss {result.loss:.6f}")

            try:
                val_elbo = self.validation_elbo()
            except NonFiniteError as e:
                raise TrainingDivergedError(f"Validation {key} diverged at epoch {epoch}: {e}") from e
            # Without validation batches the latest parameters are kept
            if math.isnan(val_elbo) or val_elbo > best_elbo:
                best_elbo, best_epoch, stale = val_elbo, epoch, 0
                best_values = {name: p.value.copy() for name, p in self.model.params.items()}
            else:
                stale += 1

            record = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_elbo": val_elbo,
                "task_losses": {t: task_totals[t] / len(losses) for t in self.tasks},
                "best": bool(best_epoch == epoch),
            }
            log.append(record)
            logger.info(
                f"[{key}] epoch {epoch}: train loss {record['train_loss']:.4f}, validation ELBO {val_elbo:.4f}"
            )
            if stale >= config.patience:
                logger.info(f"[{key}] early stop after {epoch} epochs; best epoch {best_epoch}")
                break

        for name, value in best_values.items():
            self.model.params[name].value = value
        return TrainResult(model=self.model, best_epoch=best_epoch, best_val_elbo=best_elbo, log=log)


def train(config: TrainConfig, corpus: Corpus, graph: AdmissionGraph, splits: Splits) -> TrainResult:
    """Train a model and return it with its epoch log."""
    return Trainer(config, corpus, graph, splits).fit()


# Comparisons


@dataclass
class AblationRow:
    tasks: str
    split_digest: str
    result: TrainResult
    reports: List[MetricReport]

    @property
    def metrics(self) -> Dict[str, float]:
        return flatten_reports(self.reports)


def _train_and_evaluate(
    config: TrainConfig, corpus: Corpus, graph: AdmissionGraph, splits: Splits
) -> Tuple[TrainResult, List[MetricReport]]:
    result = train(config, corpus, graph, splits)
    reports = evaluate(result.model, corpus, splits[0], splits[2], sorted(config.tasks, key=TASKS.index))
    return result, reports


def ablation_matrix(
    base: TrainConfig,
    corpus: Corpus,
    graph: AdmissionGraph,
    splits: Splits,
    workers: Optional[int] = None,
) -> Dict[str, AblationRow]:
    """Train and evaluate every nonempty task subset on shared data splits.

    Subsets run on a thread pool capped by ``GDVAE_THREADS``; each owns its model and an rng
    stream derived from (seed, subset).
    """
    digest = split_digest(splits)
    configs = [base.with_tasks(subset) for subset in TASK_SUBSETS]
    pool_size = threads(workers if workers is not None else len(configs))
    logger.info(f"Ablating {len(configs)} task subsets on {pool_size} workers (splits {digest[:12]})")

    with ThreadPoolExecutor(max_workers=pool_size) as pool:
        futures = [pool.submit(_train_and_evaluate, c, corpus, graph, splits) for c in configs]
        outcomes = [f.result() for f in futures]

    rows = {}
    for config, (result, reports) in zip(configs, outcomes):
        key = task_key(config.tasks)
        rows[key] = AblationRow(tasks=key, split_digest=digest, result=result, reports=reports)
    return rows


def comparison_table(rows: Dict[str, AblationRow]) -> List[Dict]:
    """One record per subset with its metrics and deltas against the matching single-task rows."""
    table = []
    for key, row in rows.items():
        metrics = row.metrics
        deltas = {}
        if len(key) > 1:
            for name, value in metrics.items():
                single = rows.get(name.split(".", 1)[0])
                if single is not None and name in single.metrics:
                    deltas[name] = value - single.metrics[name]
        table.append(
            {
                "tasks": key,
                "split_digest": row.split_digest,
                "best_epoch": row.result.best_epoch,
                "metrics": metrics,
                "delta_vs_single": deltas,
            }
        )
    return table


@dataclass
class TrialSummary:
    per_trial: List[Dict[str, float]]
    mean: Dict[str, float]
    std: Dict[str, float]


def summarize_trials(per_trial: List[Dict[str, float]]) -> TrialSummary:
    names = sorted(set().union(*per_trial)) if per_trial else []
    mean, std = {}, {}
    for name in names:
        values = np.array([t[name] for t in per_trial if name in t])
        mean[name] = float(values.mean())
        std[name] = float(values.std())
    return TrialSummary(per_trial=per_trial, mean=mean, std=std)


def run_trials(config: TrainConfig, corpus: Corpus, num_trials: int = 10) -> TrialSummary:
    """Repeat split, graph construction, training and test evaluation with seeds seed, seed+1, ..."""
    if num_trials < 1:
        raise ValueError(f"num_trials must be positive, got {num_trials}")
    per_trial = []
    for t in range(num_trials):
        trial_config = replace(config, seed=config.seed + t)
        splits = split(corpus, trial_config.split, trial_config.seed)
        graph = build_graph(corpus, splits[0], trial_config.graph_variant)
        _, reports = _train_and_evaluate(trial_config, corpus, graph, splits)
        per_trial.append(flatten_reports(reports))
        logger.info(f"Trial {t + 1}/{num_trials} done")
    return summarize_trials(per_trial)


def graph_variant_comparison(
    config: TrainConfig, corpus: Corpus, splits: Splits, variants: Sequence[str] = GRAPH_VARIANTS
) -> Dict[str, Dict[str, float]]:
    """Train and evaluate one model per graph weighting variant on the same split."""
    table = {}
    for variant in variants:
        variant_config = replace(config, graph_variant=variant)
        graph = build_graph(corpus, splits[0], variant)
        _, reports = _train_and_evaluate(variant_config, corpus, graph, splits)
        table[variant] = flatten_reports(reports)
    if "R.f1@10" in table.get("pmi_tfidf", {}) and "R.f1@10" in table.get("binary", {}):
        logger.info(
            f"Recommendation F1@10: pmi_tfidf {table['pmi_tfidf']['R.f1@10']:.4f} "
            f"vs binary {table['binary']['R.f1@10']:.4f}"
        )
    return table
