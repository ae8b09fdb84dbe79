"""Tests for admission graph construction."""

import itertools
import math
import os
import tempfile

import numpy as np
import pytest
import scipy.sparse as sp

from gdvae.corpus import generate_synthetic_corpus, planted_spec
from gdvae.graph import (
    GraphError,
    assemble_adjacency,
    build_graph,
    compute_pmi,
    compute_tfidf,
    export_graph,
    graph_variant,
    normalize_adjacency,
    task_view,
)
from tests.fixtures import four_admission_corpus

# Node order: d1 d2 d3 | p1 | A1 A2 A3 A4
D1, D2, D3, P1, A1, A2, A3, A4 = range(8)


def dense_oracle(corpus):
    """Brute-force adjacency straight from the piecewise definition."""
    codes = corpus.disease_vocab.codes + corpus.procedure_vocab.codes
    n = len(corpus)
    size = len(codes) + n
    a = np.eye(size)
    df = {c: sum(c in adm.codes for adm in corpus.admissions) for c in codes}
    for i, j in itertools.combinations(range(len(codes)), 2):
        both = sum(codes[i] in adm.codes and codes[j] in adm.codes for adm in corpus.admissions)
        if both:
            value = math.log(both / n) - math.log(df[codes[i]] / n * df[codes[j]] / n)
            if value > 0:
                a[i, j] = a[j, i] = value
    for k, adm in enumerate(corpus.admissions):
        for c in adm.codes:
            i = codes.index(c)
            value = (1.0 / len(adm.codes)) * math.log(n / df[c])
            a[len(codes) + k, i] = a[i, len(codes) + k] = value
    return a


class TestEdgeWeights:
    """Test cases for PMI and TF-IDF statistics."""

    def setup_method(self):
        """Set up test fixtures."""
        self.corpus = four_admission_corpus()

    def test_pmi_values(self):
        """Test PMI on the four-admission example."""
        pmi = compute_pmi(self.corpus)

        assert pmi[("d1", "d2")] == pytest.approx(math.log(4 / 3))
        assert pmi[("d2", "d1")] == pmi[("d1", "d2")]
        assert pmi[("d1", "p1")] == pytest.approx(math.log(4 / 3))
        assert pmi[("d2", "p1")] == pytest.approx(0.0)
        assert ("d1", "d3") not in pmi

    def test_tfidf_values(self):
        """Test TF-IDF on the four-admission example."""
        tfidf = compute_tfidf(self.corpus)

        assert tfidf[("A1", "d1")] == pytest.approx(math.log(4 / 3) / 3)
        assert tfidf[("A1", "d1")] == pytest.approx(0.09589, abs=1e-5)
        assert tfidf[("A2", "d2")] == pytest.approx(math.log(2) / 2)
        assert tfidf[("A4", "d3")] == pytest.approx(math.log(4))

    def test_tfidf_uses_training_statistics(self):
        """Test that unseen codes weigh zero and IDF comes from the training admissions."""
        tfidf = compute_tfidf(self.corpus, ["A1", "A2"])

        assert tfidf[("A4", "d3")] == 0.0
        assert tfidf[("A1", "d1")] == pytest.approx(0.0)
        assert tfidf[("A3", "p1")] == pytest.approx(0.5 * math.log(2))


class TestAssembly:
    """Test cases for adjacency assembly and normalization."""

    def setup_method(self):
        """Set up test fixtures."""
        self.corpus = four_admission_corpus()
        self.graph = build_graph(self.corpus)
        self.a = self.graph.adjacency.toarray()

    def test_layout(self):
        """Test node counts and offsets."""
        layout = self.graph.layout
        assert (layout.num_diseases, layout.num_procedures, layout.num_admissions) == (3, 1, 4)
        assert layout.admission_offset == 4
        assert self.graph.admission_node(3) == A4

    def test_example_entries(self):
        """Test individual adjacency entries."""
        assert self.a[D1, D2] == pytest.approx(math.log(4 / 3))
        assert self.a[D2, P1] == 0.0
        assert self.a[A1, D1] == pytest.approx(0.09589, abs=1e-5)
        assert self.a[A4, D3] == pytest.approx(math.log(4))
        assert self.a[A1, A2] == 0.0
        np.testing.assert_array_equal(np.diag(self.a), 1.0)

    def test_matches_oracle(self):
        """Test the assembled adjacency against a brute-force construction."""
        np.testing.assert_allclose(self.a, dense_oracle(self.corpus), atol=1e-12)

    def test_matches_oracle_on_synthetic_corpus(self):
        """Test the oracle on a larger random corpus."""
        corpus, _ = generate_synthetic_corpus(planted_spec(num_topics=3, num_admissions=40), seed=3)
        graph = build_graph(corpus)
        np.testing.assert_allclose(graph.adjacency.toarray(), dense_oracle(corpus), atol=1e-12)

    def test_symmetric(self):
        """Test that A is symmetric."""
        np.testing.assert_array_equal(self.a, self.a.T)

    def test_normalization(self):
        """Test that the normalized matrix is D^-1/2 A D^-1/2."""
        d = self.a.sum(axis=1)
        expected = self.a / np.sqrt(np.outer(d, d))
        np.testing.assert_allclose(self.graph.normalized.toarray(), expected, atol=1e-12)
        assert self.graph.normalized.toarray().max() <= 1.0 + 1e-12

    def test_normalize_rejects_isolated_node(self):
        """Test that a zero-degree row is rejected."""
        with pytest.raises(GraphError, match="nonpositive degree"):
            normalize_adjacency(sp.csr_matrix(np.array([[1.0, 0.0], [0.0, 0.0]])))

    def test_assemble_adjacency_matches_default_graph(self):
        """Test the explicit assembly entry point."""
        graph = assemble_adjacency(self.corpus, compute_pmi(self.corpus), compute_tfidf(self.corpus))
        np.testing.assert_allclose(graph.adjacency.toarray(), self.a)

    def test_pooling_groups(self):
        """Test per-admission global code indices."""
        assert [g.tolist() for g in self.graph.admission_diseases] == [[D1, D2], [D1, D2], [D1], [D3]]
        assert [g.tolist() for g in self.graph.admission_procedures] == [[P1], [], [P1], []]

    def test_training_subset_graph(self):
        """Test that statistics come from the training admissions only."""
        graph = build_graph(self.corpus, ["A1", "A2"])
        a = graph.adjacency.toarray()

        assert a[D1, D2] == 0.0
        assert a[A4, D3] == 0.0
        assert a[A4, A4] == 1.0
        assert graph.layout.num_admissions == 4


class TestGraphVariants:
    """Test cases for the four weighting variants."""

    def setup_method(self):
        """Set up test fixtures."""
        self.corpus = four_admission_corpus()

    def test_binary(self):
        """Test that binary has unit admission edges and no code-code edges."""
        a = graph_variant(self.corpus, "binary").adjacency.toarray()
        assert a[A1, D1] == 1.0
        assert a[A1, P1] == 1.0
        assert a[D1, D2] == 0.0

    def test_tfidf(self):
        """Test that tfidf keeps weighted admission edges without PMI."""
        a = graph_variant(self.corpus, "tfidf").adjacency.toarray()
        assert a[A1, D1] == pytest.approx(math.log(4 / 3) / 3)
        assert a[D1, D2] == 0.0

    def test_pmi_binary(self):
        """Test that pmi_binary combines PMI with unit admission edges."""
        a = graph_variant(self.corpus, "pmi_binary").adjacency.toarray()
        assert a[D1, D2] == pytest.approx(math.log(4 / 3))
        assert a[A1, D1] == 1.0

    def test_unknown_variant(self):
        """Test that unknown variants are rejected."""
        with pytest.raises(GraphError, match="Unknown graph variant"):
            graph_variant(self.corpus, "dense")


class TestTaskView:
    """Test cases for per-task sub-graphs."""

    def setup_method(self):
        """Set up test fixtures."""
        self.graph = build_graph(four_admission_corpus())

    def test_full_view_for_topic_and_prediction(self):
        """Test that T and P encode over every node."""
        for task in ("T", "P", "topic", "predict"):
            view = task_view(self.graph, task)
            assert view.size == 8
            assert view.pooling == "codes"
            assert view.normalized is self.graph.normalized
            assert view.admission_rows.tolist() == [4, 5, 6, 7]

    def test_recommendation_view_drops_procedures(self):
        """Test that R drops procedure nodes and renormalizes."""
        view = task_view(self.graph, "R")
        assert view.nodes.tolist() == [D1, D2, D3, A1, A2, A3, A4]
        assert view.code_nodes.tolist() == [D1, D2, D3]
        assert view.admission_rows.tolist() == [3, 4, 5, 6]
        assert view.pooling == "diseases"

        sub = self.graph.adjacency.toarray()[np.ix_(view.nodes, view.nodes)]
        d = sub.sum(axis=1)
        np.testing.assert_allclose(view.normalized.toarray(), sub / np.sqrt(np.outer(d, d)), atol=1e-12)

    def test_pooling_groups_per_view(self):
        """Test which codes each view pools over."""
        full = task_view(self.graph, "T").pooling_groups(self.graph)
        diseases = task_view(self.graph, "R").pooling_groups(self.graph)
        assert full[0].tolist() == [D1, D2, P1]
        assert diseases[0].tolist() == [D1, D2]

    def test_unknown_task(self):
        """Test that unknown tasks are rejected."""
        with pytest.raises(GraphError, match="Unknown task"):
            task_view(self.graph, "Q")


class TestExportGraph:
    """Test cases for graph export."""

    def setup_method(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.temp_dir.name, "graph.tsv")

    def teardown_method(self):
        """Clean up test fixtures."""
        self.temp_dir.cleanup()

    def test_export_upper_triangle(self):
        """Test the exported header and entries."""
        graph = build_graph(four_admission_corpus())
        export_graph(graph, self.path)
        with open(self.path, encoding="utf-8") as f:
            lines = f.read().splitlines()

        assert lines[0] == "# layout diseases=3 procedures=1 admissions=4 variant=pmi_tfidf"
        entries = [line.split("\t") for line in lines[1:]]
        assert all(int(r) <= int(c) for r, c, _ in entries)
        assert len(entries) == sp.triu(graph.adjacency).nnz
        weights = {(int(r), int(c)): float(w) for r, c, w in entries}
        assert weights[(D1, D2)] == pytest.approx(math.log(4 / 3))
        assert weights[(D3, A4)] == pytest.approx(math.log(4))
