"""Shared corpus, graph and model fixtures for the test suite."""

from typing import List, Tuple

import numpy as np

from gdvae.config import TrainConfig
from gdvae.corpus import AdmissionRecord, Corpus
from gdvae.graph import AdmissionGraph, build_graph
from gdvae.model import GDVAE


def record(adm_id: str, diseases: List[str], procedures: List[str], label: str = "a") -> AdmissionRecord:
    return AdmissionRecord(adm_id, frozenset(diseases), frozenset(procedures), label)


def four_admission_corpus() -> Corpus:
    """A1={d1,d2,p1}, A2={d1,d2}, A3={d1,p1}, A4={d3}."""
    return Corpus.from_records(
        [
            record("A1", ["d1", "d2"], ["p1"]),
            record("A2", ["d1", "d2"], []),
            record("A3", ["d1"], ["p1"]),
            record("A4", ["d3"], [], "b"),
        ]
    )


def six_admission_corpus() -> Corpus:
    """Six admissions over five diseases, three procedures and two labels."""
    return Corpus.from_records(
        [
            record("A1", ["d1", "d2"], ["p1"], "a"),
            record("A2", ["d2", "d3"], ["p2"], "b"),
            record("A3", ["d1", "d3", "d4"], ["p1", "p3"], "a"),
            record("A4", ["d4", "d5"], ["p3"], "b"),
            record("A5", ["d1", "d5"], ["p2"], "a"),
            record("A6", ["d2", "d4"], ["p1", "p2"], "b"),
        ]
    )


def tiny_config(**overrides) -> TrainConfig:
    values = dict(
        epochs=2,
        batch_size=4,
        num_topics=3,
        merge_count=2,
        num_biterm_docs=4,
        d_emb=4,
        d_latent=3,
        rec_hidden=4,
        patience=5,
        split=(0.5, 0.25, 0.25),
    )
    values.update(overrides)
    return TrainConfig(**values)


def tiny_model(seed: int = 0, **overrides) -> Tuple[Corpus, AdmissionGraph, GDVAE]:
    """The six-admission fixture with a small model whose GCN pre-activations stay positive."""
    corpus = six_admission_corpus()
    graph = build_graph(corpus)
    config = tiny_config(**overrides)
    model = GDVAE(config, graph, len(corpus.labels), np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 100)
    model.params["X"].value = rng.uniform(0.5, 1.5, size=model.params["X"].shape)
    for name in ("gcn.W1", "gcn.W2"):
        model.params[name].value = rng.uniform(0.05, 0.4, size=model.params[name].shape)
    return corpus, graph, model
