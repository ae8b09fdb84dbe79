"""Metrics and inference utilities: topics, coherence, recommendation, type prediction, exports."""

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .corpus import Corpus
from .model import GDVAE
from .neural.primitives import softmax_rows

logger = logging.getLogger("gdvae.evaluation")

TOP_MS: Tuple[int, ...] = (1, 3, 5, 10)
TOP_NS: Tuple[int, ...] = (5, 10, 15, 20)


class EvaluationError(ValueError):
    """Raised for inputs a metric or inference call cannot be computed on."""


@dataclass
class TopicSummary:
    """Per topic, (code index, probability) pairs in descending probability, ties by index."""

    topics: List[List[Tuple[int, float]]]
    codes: Optional[List[str]] = None

    def indices(self, topic: int, n: Optional[int] = None) -> List[int]:
        ranked = self.topics[topic] if n is None else self.topics[topic][:n]
        return [i for i, _ in ranked]

    def words(self, topic: int, n: Optional[int] = None) -> List[str]:
        names = self.codes
        return [names[i] if names is not None else str(i) for i in self.indices(topic, n)]


@dataclass
class MetricReport:
    """Metric values for one task, with counts of evaluated and skipped items."""

    task: str
    values: Dict[str, float] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"task": self.task, "values": self.values, "counts": self.counts}, sort_keys=True)


@dataclass
class TopMResult:
    precision: float
    recall: float
    f1: float
    evaluated: int
    skipped: int


@dataclass
class ClassificationReport:
    precision: float
    recall: float
    f1: float
    accuracy: float
    support: int


def code_names(corpus: Corpus) -> List[str]:
    """Code strings in model column order: diseases then procedures."""
    return list(corpus.disease_vocab.codes) + list(corpus.procedure_vocab.codes)


def code_index_sets(corpus: Corpus, ids: Optional[Sequence[str]] = None) -> List[Set[int]]:
    """Global code indices of each admission, for coherence references."""
    nd = len(corpus.disease_vocab)
    admissions = corpus.admissions if ids is None else [corpus.get(i) for i in ids]
    return [
        {corpus.disease_vocab.index[c] for c in adm.diseases}
        | {nd + corpus.procedure_vocab.index[c] for c in adm.procedures}
        for adm in admissions
    ]


def topic_top_words(beta: np.ndarray, n: int, codes: Optional[Sequence[str]] = None) -> TopicSummary:
    """Top-n codes of each topic row of ``beta``."""
    beta = np.asarray(beta, dtype=np.float64)
    if n < 1 or n > beta.shape[1]:
        raise EvaluationError(f"Cannot take top {n} of {beta.shape[1]} codes")
    topics = []
    for row in beta:
        order = np.argsort(-row, kind="stable")[:n]
        topics.append([(int(i), float(row[i])) for i in order])
    return TopicSummary(topics=topics, codes=list(codes) if codes is not None else None)


def npmi(joint: float, p_i: float, p_j: float) -> float:
    """Normalized PMI; -1 when the pair never co-occurs, 1 when it always co-occurs."""
    if joint <= 0.0:
        return -1.0
    if joint >= 1.0:
        return 1.0
    return math.log(joint / (p_i * p_j)) / -math.log(joint)


def npmi_by_n(
    topics: TopicSummary, reference: Sequence[Set[int]], top_ns: Sequence[int] = TOP_NS
) -> Dict[int, float]:
    """Mean pairwise NPMI over topics for each top-n cut, probabilities over reference documents."""
    if not reference:
        raise EvaluationError("Coherence needs a nonempty reference corpus")
    total = float(len(reference))
    single: Dict[int, int] = {}
    for doc in reference:
        for code in doc:
            single[code] = single.get(code, 0) + 1

    joint_cache: Dict[Tuple[int, int], int] = {}

    def joint_count(a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        if key not in joint_cache:
            joint_cache[key] = sum(1 for doc in reference if a in doc and b in doc)
        return joint_cache[key]

    scores: Dict[int, float] = {}
    for n in top_ns:
        per_topic = []
        for t in range(len(topics.topics)):
            words = topics.indices(t, n)
            if len(words) < 2 or len(words) < n:
                raise EvaluationError(f"Topic {t} has fewer than {max(n, 2)} words")
            values = [
                npmi(joint_count(a, b) / total, single.get(a, 0) / total, single.get(b, 0) / total)
                for a, b in itertools.combinations(words, 2)
            ]
            per_topic.append(float(np.mean(values)))
        scores[n] = float(np.mean(per_topic))
    return scores


def npmi_coherence(topics: TopicSummary, reference: Sequence[Set[int]], top_ns: Sequence[int] = TOP_NS) -> float:
    """Topic coherence: NPMI averaged over topic pairs, topics and the top-n cuts."""
    return float(np.mean(list(npmi_by_n(topics, reference, top_ns).values())))


def random_topics(vocab_size: int, num_topics: int, n: int, rng: np.random.Generator) -> TopicSummary:
    """Uniformly random topics of n distinct codes, a coherence baseline."""
    topics = []
    for _ in range(num_topics):
        picks = rng.choice(vocab_size, size=n, replace=False)
        topics.append([(int(i), 1.0 / n) for i in picks])
    return TopicSummary(topics=topics)


def match_topics(learned: np.ndarray, planted: np.ndarray) -> Tuple[List[Tuple[int, int, float]], float]:
    """Greedy one-to-one matching of topic rows by cosine similarity.

    Returns:
        tuple: ((learned, planted, similarity) pairs in pick order, mean similarity)
    """
    a = np.asarray(learned, dtype=np.float64)
    b = np.asarray(planted, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise EvaluationError(f"Topic matrices cover different vocabularies: {a.shape} and {b.shape}")
    a_norm = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    b_norm = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    sim = a_norm @ b_norm.T

    pairs: List[Tuple[int, int, float]] = []
    remaining = sim.copy()
    for _ in range(min(a.shape[0], b.shape[0])):
        i, j = np.unravel_index(int(np.argmax(remaining)), remaining.shape)
        pairs.append((int(i), int(j), float(sim[i, j])))
        remaining[i, :] = -np.inf
        remaining[:, j] = -np.inf
    return pairs, float(np.mean([s for _, _, s in pairs])) if pairs else 0.0


# Recommendation


def _position(model: GDVAE, admission_id: str) -> int:
    try:
        return model.graph.admission_ids.index(admission_id)
    except ValueError:
        raise EvaluationError(f"Unknown admission id {admission_id!r}") from None


def rank_procedures(model: GDVAE, positions: Sequence[int], top: int) -> np.ndarray:
    """Top-M procedure indices per admission from the posterior-mean latent, ties by index."""
    positions = np.asarray(positions, dtype=np.int64)
    empty = [int(p) for p in positions if len(model.groups["diseases"][p]) == 0]
    if empty:
        raise EvaluationError(f"Admissions at positions {empty[:5]} have no disease codes to recommend from")
    mu, _ = model.infer_latent("R", positions)
    probs = model.rec_probabilities(mu)
    top = min(top, probs.shape[1])
    return np.argsort(-probs, axis=1, kind="stable")[:, :top]


def recommend(model: GDVAE, corpus: Corpus, admission_id: str, top: int) -> List[str]:
    """Ranked procedure codes for one admission."""
    ranked = rank_procedures(model, [_position(model, admission_id)], top)[0]
    return [corpus.procedure_vocab.codes[i] for i in ranked]


def topm_metrics(
    recommendations: Sequence[Sequence[Hashable]], truths: Sequence[Sequence[Hashable]], top: Optional[int] = None
) -> TopMResult:
    """Mean per-admission precision, recall and F1 of recommendation lists; empty truths are skipped.

    When ``top`` is given every list must hold exactly that many items.
    """
    if len(recommendations) != len(truths):
        raise EvaluationError(f"{len(recommendations)} recommendation lists for {len(truths)} truths")
    if top is not None and any(len(w) != top for w in recommendations):
        raise EvaluationError(f"Every recommendation list must hold {top} items")
    precisions, recalls, f1s = [], [], []
    skipped = 0
    for w, y in zip(recommendations, truths):
        w_set, y_set = set(w), set(y)
        if not y_set:
            skipped += 1
            continue
        if not w_set:
            raise EvaluationError("Empty recommendation list")
        hits = len(w_set & y_set)
        p = hits / len(w_set)
        r = hits / len(y_set)
        precisions.append(p)
        recalls.append(r)
        f1s.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    if skipped:
        logger.warning(f"Skipped {skipped} admissions with no ground-truth procedures")
    if not precisions:
        return TopMResult(0.0, 0.0, 0.0, 0, skipped)
    return TopMResult(
        precision=float(np.mean(precisions)),
        recall=float(np.mean(recalls)),
        f1=float(np.mean(f1s)),
        evaluated=len(precisions),
        skipped=skipped,
    )


# Type prediction


def predict_types(model: GDVAE, positions: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Argmax label index and class probabilities for each admission."""
    mu, _ = model.infer_latent("P", np.asarray(positions, dtype=np.int64))
    probs = model.cls_probabilities(mu)
    return np.argmax(probs, axis=1), probs


def predict_type(model: GDVAE, corpus: Corpus, admission_id: str) -> Tuple[str, np.ndarray]:
    """Predicted label for one admission and its class distribution."""
    index, probs = predict_types(model, [_position(model, admission_id)])
    return corpus.labels[int(index[0])], probs[0]


def classification_metrics(
    predictions: Sequence[Hashable], truths: Sequence[Hashable], labels: Optional[Sequence[Hashable]] = None
) -> ClassificationReport:
    """Macro-averaged precision, recall and F1; zero denominators count as 0."""
    if not truths or len(predictions) != len(truths):
        raise EvaluationError(f"Need matching nonempty predictions and truths, got {len(predictions)}/{len(truths)}")
    classes = list(labels) if labels is not None else sorted(set(truths), key=str)
    unseen = set(predictions) - set(classes)
    if unseen:
        raise EvaluationError(f"Predicted labels not among the classes: {sorted(unseen, key=str)}")

    precisions, recalls, f1s = [], [], []
    for c in classes:
        tp = sum(1 for p, t in zip(predictions, truths) if p == c and t == c)
        predicted = sum(1 for p in predictions if p == c)
        actual = sum(1 for t in truths if t == c)
        p = tp / predicted if predicted else 0.0
        r = tp / actual if actual else 0.0
        precisions.append(p)
        recalls.append(r)
        f1s.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    accuracy = sum(1 for p, t in zip(predictions, truths) if p == t) / len(truths)
    return ClassificationReport(
        precision=float(np.mean(precisions)),
        recall=float(np.mean(recalls)),
        f1=float(np.mean(f1s)),
        accuracy=float(accuracy),
        support=len(truths),
    )


# Reports and exports


def evaluate(
    model: GDVAE,
    corpus: Corpus,
    train_ids: Sequence[str],
    eval_ids: Sequence[str],
    tasks: Sequence[str],
    top_ms: Sequence[int] = TOP_MS,
    top_ns: Sequence[int] = TOP_NS,
) -> List[MetricReport]:
    """Compute the metric report of every requested task on ``eval_ids``."""
    reports: List[MetricReport] = []
    positions = {adm_id: k for k, adm_id in enumerate(model.graph.admission_ids)}

    if "T" in tasks:
        vocab = model.num_codes
        cuts = [n for n in top_ns if n <= vocab]
        if len(cuts) < len(top_ns):
            logger.warning(f"Skipping coherence cuts above the vocabulary size {vocab}")
        if not cuts:
            cuts = [vocab]
        if vocab < 2:
            raise EvaluationError("Coherence needs at least two codes")
        summary = topic_top_words(model.topic_matrix(), max(cuts), code_names(corpus))
        scores = npmi_by_n(summary, code_index_sets(corpus, train_ids), cuts)
        values = {f"npmi@{n}": s for n, s in scores.items()}
        values["npmi"] = float(np.mean(list(scores.values())))
        reports.append(MetricReport("T", values, {"topics": model.num_topics}))

    if "R" in tasks:
        eligible = [
            i for i in eval_ids if len(model.groups["diseases"][positions[i]]) > 0 and corpus.get(i).procedures
        ]
        if len(eligible) < len(eval_ids):
            logger.warning(f"Excluded {len(eval_ids) - len(eligible)} admissions from recommendation evaluation")
        values, counts = {}, {"evaluated": len(eligible), "skipped": len(eval_ids) - len(eligible)}
        if eligible:
            ranked = rank_procedures(model, [positions[i] for i in eligible], max(top_ms))
            truths = [[corpus.procedure_vocab.index[c] for c in corpus.get(i).procedures] for i in eligible]
            for m in top_ms:
                result = topm_metrics([list(r[:m]) for r in ranked], truths)
                values[f"precision@{m}"] = result.precision
                values[f"recall@{m}"] = result.recall
                values[f"f1@{m}"] = result.f1
        reports.append(MetricReport("R", values, counts))

    if "P" in tasks:
        indices, _ = predict_types(model, [positions[i] for i in eval_ids])
        truths = [corpus.label_index(corpus.get(i).type_label) for i in eval_ids]
        result = classification_metrics([int(k) for k in indices], truths, list(range(len(corpus.labels))))
        values = {
            "precision": result.precision,
            "recall": result.recall,
            "f1": result.f1,
            "accuracy": result.accuracy,
        }
        reports.append(MetricReport("P", values, {"evaluated": result.support}))

    return reports


def flatten_reports(reports: Sequence[MetricReport]) -> Dict[str, float]:
    """``{"<task>.<metric>": value}`` over all reports."""
    return {f"{r.task}.{name}": value for r in reports for name, value in r.values.items()}


def write_reports(reports: Sequence[MetricReport], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for report in reports:
            f.write(report.to_json() + "\n")
    logger.info(f"Wrote {len(reports)} metric reports to {path}")


def export_embeddings(model: GDVAE, corpus: Corpus, path: str, which: str = "admissions", task: str = "P") -> int:
    """Write a header row then one tab-separated row per node.

    Admission rows hold posterior-mean latents (topic proportions for T); code rows hold the
    encoder representation of each code under the task's view.

    Returns:
        int: Number of rows written
    """
    if which == "admissions":
        mu, _ = model.infer_latent(task)
        matrix = softmax_rows(mu) if task == "T" else mu
        ids = list(model.graph.admission_ids)
    elif which == "codes":
        h = model.encode(task)
        view = model.views["diseases" if task == "R" else "codes"]
        matrix = h[: len(view.code_nodes)]
        ids = [code_names(corpus)[i] for i in view.code_nodes]
    else:
        raise EvaluationError(f"Unknown embedding export {which!r}; expected 'admissions' or 'codes'")

    if len(matrix) != len(ids):
        raise EvaluationError(f"Got {len(matrix)} {which} rows for {len(ids)} ids")

    rows = 0
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(["id"] + [f"dim{k}" for k in range(matrix.shape[1])]) + "\n")
        for node_id, row in zip(ids, matrix):
            f.write("\t".join([node_id] + [repr(float(v)) for v in row]) + "\n")
            rows += 1
    logger.info(f"Exported {rows} {which} embeddings ({matrix.shape[1]} columns) to {path}")
    return rows
