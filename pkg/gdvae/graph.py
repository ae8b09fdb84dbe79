"""Admission graph construction: PMI and TF-IDF edges, normalization and task views."""

import itertools
import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from tqdm import tqdm

from .config import GRAPH_VARIANTS, SHOW_PROGRESS
from .corpus import Corpus, code_document_frequency

logger = logging.getLogger("gdvae.graph")

TASK_ALIASES = {"topic": "T", "recommend": "R", "predict": "P", "T": "T", "R": "R", "P": "P"}


class GraphError(ValueError):
    """Raised for inconsistent graphs, unknown variants or unknown tasks."""


@dataclass(frozen=True)
class NodeLayout:
    """Node order ``[disease codes | procedure codes | admissions]``."""

    num_diseases: int
    num_procedures: int
    num_admissions: int

    @property
    def num_codes(self) -> int:
        return self.num_diseases + self.num_procedures

    @property
    def size(self) -> int:
        return self.num_codes + self.num_admissions

    @property
    def procedure_offset(self) -> int:
        return self.num_diseases

    @property
    def admission_offset(self) -> int:
        return self.num_codes

    def header(self) -> str:
        return (
            f"# layout diseases={self.num_diseases} procedures={self.num_procedures} "
            f"admissions={self.num_admissions}"
        )


@dataclass
class AdmissionGraph:
    """Raw adjacency A, its normalization, and per-admission pooling groups."""

    layout: NodeLayout
    adjacency: sp.csr_matrix
    normalized: sp.csr_matrix
    admission_ids: List[str]
    # Global code indices per admission, in corpus order
    admission_diseases: List[np.ndarray]
    admission_procedures: List[np.ndarray]
    variant: str = "pmi_tfidf"

    def admission_node(self, position: int) -> int:
        return self.layout.admission_offset + position


@dataclass
class TaskView:
    """The node subset, sub-adjacency and pooling rule a task encodes with."""

    task: str
    nodes: np.ndarray
    pooling: str
    adjacency: sp.csr_matrix
    normalized: sp.csr_matrix
    # Rows of the view holding code nodes, and the global code index of each
    code_nodes: np.ndarray
    # Row of the view holding each admission, in corpus order
    admission_rows: np.ndarray

    @property
    def size(self) -> int:
        return len(self.nodes)

    def pooling_groups(self, graph: AdmissionGraph) -> List[np.ndarray]:
        """Per admission, the global code indices fed to max-pooling under this view."""
        if self.pooling == "diseases":
            return list(graph.admission_diseases)
        return [np.concatenate([d, p]) for d, p in zip(graph.admission_diseases, graph.admission_procedures)]


def _train_admissions(corpus: Corpus, train_ids: Optional[Iterable[str]]) -> List:
    if train_ids is None:
        return list(corpus.admissions)
    return [corpus.get(i) for i in train_ids]


def compute_pmi(corpus: Corpus, train_ids: Optional[Iterable[str]] = None) -> Dict[Tuple[str, str], float]:
    """PMI of every co-occurring code pair over the training admissions.

    PMI(i, j) = log p_ij - log(p_i p_j) with probabilities taken as admission fractions.
    Both orderings of each pair are present.
    """
    admissions = _train_admissions(corpus, train_ids)
    n = len(admissions)
    if n == 0:
        return {}
    single = code_document_frequency(admissions)
    pairs: Counter = Counter()
    for adm in tqdm(admissions, desc="Count code pairs", disable=not SHOW_PROGRESS):
        pairs.update(itertools.combinations(sorted(adm.codes), 2))

    pmi: Dict[Tuple[str, str], float] = {}
    for (a, b), n_ab in pairs.items():
        value = math.log((n_ab * n) / (single[a] * single[b]))
        pmi[(a, b)] = value
        pmi[(b, a)] = value
    return pmi


def compute_tfidf(corpus: Corpus, train_ids: Optional[Iterable[str]] = None) -> Dict[Tuple[str, str], float]:
    """TF-IDF weight of every (admission id, code) membership.

    TF is 1 / |codes in admission|; IDF is log(N_train / df_train(code)); codes never seen in
    training admissions weigh 0. Every admission of the corpus gets entries.
    """
    admissions = _train_admissions(corpus, train_ids)
    n_train = len(admissions)
    df = code_document_frequency(admissions)
    tfidf: Dict[Tuple[str, str], float] = {}
    for adm in corpus.admissions:
        codes = adm.codes
        tf = 1.0 / len(codes)
        for code in codes:
            count = df.get(code, 0)
            tfidf[(adm.id, code)] = tf * math.log(n_train / count) if count > 0 else 0.0
    return tfidf


def _code_indices(corpus: Corpus) -> Dict[str, int]:
    nd = len(corpus.disease_vocab)
    index = dict(corpus.disease_vocab.index)
    index.update({code: nd + i for code, i in corpus.procedure_vocab.index.items()})
    return index


def _pooling_groups(corpus: Corpus) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    nd = len(corpus.disease_vocab)
    diseases = [
        np.array(sorted(corpus.disease_vocab.index[c] for c in adm.diseases), dtype=np.int64)
        for adm in corpus.admissions
    ]
    procedures = [
        np.array(sorted(nd + corpus.procedure_vocab.index[c] for c in adm.procedures), dtype=np.int64)
        for adm in corpus.admissions
    ]
    return diseases, procedures


def normalize_adjacency(adjacency: sp.spmatrix) -> sp.csr_matrix:
    """Symmetric normalization D^{-1/2} A D^{-1/2} with d_ii = sum_j a_ij."""
    adjacency = sp.csr_matrix(adjacency, dtype=np.float64)
    degree = np.asarray(adjacency.sum(axis=1)).ravel()
    if np.any(degree <= 0):
        bad = int(np.flatnonzero(degree <= 0)[0])
        raise GraphError(f"Node {bad} has nonpositive degree {degree[bad]}")
    inv_sqrt = sp.diags(1.0 / np.sqrt(degree))
    return sp.csr_matrix(inv_sqrt @ adjacency @ inv_sqrt)


def _assemble(
    corpus: Corpus,
    pmi: Dict[Tuple[str, str], float],
    admission_weights: Dict[Tuple[str, str], float],
    variant: str,
) -> AdmissionGraph:
    layout = NodeLayout(len(corpus.disease_vocab), len(corpus.procedure_vocab), len(corpus))
    index = _code_indices(corpus)

    rows: List[int] = list(range(layout.size))
    cols: List[int] = list(range(layout.size))
    vals: List[float] = [1.0] * layout.size

    pmi_edges = 0
    for (a, b), value in pmi.items():
        i, j = index.get(a), index.get(b)
        if i is None or j is None or i >= j or value <= 0:
            continue
        rows += [i, j]
        cols += [j, i]
        vals += [value, value]
        pmi_edges += 1

    adm_edges = 0
    for (adm_id, code), weight in admission_weights.items():
        if weight == 0 or code not in index:
            continue
        node = layout.admission_offset + corpus.position(adm_id)
        c = index[code]
        rows += [node, c]
        cols += [c, node]
        vals += [weight, weight]
        adm_edges += 1

    adjacency = sp.coo_matrix(
        (np.array(vals, dtype=np.float64), (np.array(rows), np.array(cols))), shape=(layout.size, layout.size)
    ).tocsr()
    adjacency.sum_duplicates()
    adjacency.eliminate_zeros()

    asymmetry = abs(adjacency - adjacency.T)
    if asymmetry.nnz and asymmetry.max() > 0:
        raise GraphError(f"Assembled adjacency is not symmetric (max deviation {asymmetry.max()})")
    if not np.all(np.isfinite(adjacency.data)):
        raise GraphError("Assembled adjacency has non-finite weights")

    diseases, procedures = _pooling_groups(corpus)
    logger.info(
        f"Built {variant} graph: {layout.size} nodes, {pmi_edges} code-code edges, "
        f"{adm_edges} admission-code edges"
    )
    return AdmissionGraph(
        layout=layout,
        adjacency=adjacency,
        normalized=normalize_adjacency(adjacency),
        admission_ids=corpus.ids,
        admission_diseases=diseases,
        admission_procedures=procedures,
        variant=variant,
    )


def assemble_adjacency(
    corpus: Corpus, pmi: Dict[Tuple[str, str], float], tfidf: Dict[Tuple[str, str], float]
) -> AdmissionGraph:
    """Assemble A by the piecewise rule.

    a_ij is 1 on the diagonal, PMI(i, j) between codes when positive, TF-IDF between an
    admission and its codes, and 0 otherwise.
    """
    return _assemble(corpus, pmi, tfidf, "pmi_tfidf")


def graph_variant(corpus: Corpus, variant: str, train_ids: Optional[Sequence[str]] = None) -> AdmissionGraph:
    """Build one of the four graph variants.

    Args:
        corpus: The corpus whose admissions become nodes
        variant: ``binary``, ``tfidf``, ``pmi_binary`` or ``pmi_tfidf``
        train_ids: Admissions whose statistics define PMI and IDF (all when None)

    Returns:
        AdmissionGraph: The assembled and normalized graph
    """
    if variant not in GRAPH_VARIANTS:
        raise GraphError(f"Unknown graph variant {variant!r}; expected one of {GRAPH_VARIANTS}")

    tfidf = compute_tfidf(corpus, train_ids)
    if variant in ("binary", "pmi_binary"):
        weights = {key: 1.0 for key in tfidf}
    else:
        weights = tfidf
    pmi = compute_pmi(corpus, train_ids) if variant.startswith("pmi") else {}
    return _assemble(corpus, pmi, weights, variant)


def build_graph(corpus: Corpus, train_ids: Optional[Sequence[str]] = None, variant: str = "pmi_tfidf") -> AdmissionGraph:
    """Build the admission graph used for training and evaluation."""
    return graph_variant(corpus, variant, train_ids)


def task_view(graph: AdmissionGraph, task: str) -> TaskView:
    """Select the sub-graph a task encodes with.

    Topic modeling and type prediction use every node and pool admissions over diseases and
    procedures; recommendation drops procedure nodes and pools over diseases only.
    """
    if task not in TASK_ALIASES:
        raise GraphError(f"Unknown task {task!r}")
    key = TASK_ALIASES[task]
    layout = graph.layout
    admissions = np.arange(layout.admission_offset, layout.size)

    if key == "R":
        codes = np.arange(layout.num_diseases)
        pooling = "diseases"
    else:
        codes = np.arange(layout.num_codes)
        pooling = "codes"
    nodes = np.concatenate([codes, admissions])

    if len(nodes) == layout.size:
        adjacency = graph.adjacency
        normalized = graph.normalized
    else:
        adjacency = sp.csr_matrix(graph.adjacency[nodes][:, nodes])
        normalized = normalize_adjacency(adjacency)

    return TaskView(
        task=key,
        nodes=nodes,
        pooling=pooling,
        adjacency=adjacency,
        normalized=normalized,
        code_nodes=codes,
        admission_rows=np.arange(len(codes), len(nodes)),
    )


def export_graph(graph: AdmissionGraph, path: str) -> None:
    """Write the raw adjacency as ``row col weight`` lines (upper triangle) under a layout header."""
    upper = sp.triu(graph.adjacency).tocoo()
    order = np.lexsort((upper.col, upper.row))
    with open(path, "w", encoding="utf-8") as f:
        f.write(graph.layout.header() + f" variant={graph.variant}\n")
        for k in order:
            f.write(f"{upper.row[k]}\t{upper.col[k]}\t{float(upper.data[k])!r}\n")
    logger.info(f"Exported {len(order)} adjacency entries to {path}")
