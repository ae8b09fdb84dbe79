"""Tests for the GD-VAE model and the joint ELBO."""

import math

import numpy as np
import pytest
import scipy.sparse as sp

from gdvae.graph import normalize_adjacency
from gdvae.model import (
    GDVAE,
    SHARED_PARAMETERS,
    TASK_PARAMETERS,
    TaskBatch,
    elbo_joint,
    gcn_encode,
    kl_logistic_normal,
    kl_standard_normal,
    laplace_prior,
    multinomial_log_likelihood,
    pooled_admission_feature,
    sample_latent,
    topic_log_likelihood,
)
from gdvae.neural.gradcheck import numeric_gradient
from gdvae.neural.optim import NonFiniteError
from gdvae.neural.primitives import ShapeError, softmax_rows
from gdvae.trainer import admission_batch, make_biterm_documents, topic_batch
from tests.fixtures import tiny_model


def all_batches(corpus, graph):
    docs = make_biterm_documents(corpus, corpus.ids, 2, 3, np.random.default_rng(0))
    return {
        "T": topic_batch(docs),
        "R": admission_batch("R", corpus, graph, corpus.ids),
        "P": admission_batch("P", corpus, graph, corpus.ids),
    }


class TestPrior:
    """Test cases for the Laplace-approximated Dirichlet prior."""

    def test_symmetric_prior(self):
        """Test the variance for fifty topics at alpha 0.02."""
        prior = laplace_prior(np.full(50, 0.02))
        np.testing.assert_allclose(prior.mean, 0.0, atol=1e-12)
        np.testing.assert_allclose(prior.var, 49.0)
        assert prior.num_topics == 50

    def test_asymmetric_prior(self):
        """Test the mean and variance for alpha = (1, 2)."""
        prior = laplace_prior([1.0, 2.0])
        np.testing.assert_allclose(prior.mean, [-0.5 * math.log(2), 0.5 * math.log(2)])
        np.testing.assert_allclose(prior.var, [0.375, 0.375])

    @pytest.mark.parametrize("alpha", [[0.0, 1.0], [-1.0], [], [np.inf]])
    def test_invalid_alpha(self, alpha):
        """Test that nonpositive, empty or infinite alpha is rejected."""
        with pytest.raises(ValueError):
            laplace_prior(alpha)


class TestKL:
    """Test cases for the closed-form KL terms."""

    def test_standard_normal(self):
        """Test KL(N(1, 1) || N(0, 1)) and KL at the prior."""
        assert kl_standard_normal(np.array([1.0]), np.array([0.0])) == pytest.approx(0.5)
        assert kl_standard_normal(np.zeros((2, 3)), np.zeros((2, 3))) == pytest.approx(0.0)

    def test_logistic_normal_zero_at_prior(self):
        """Test that KL vanishes when the posterior equals the Laplace prior."""
        prior = laplace_prior([0.5, 1.0, 3.0])
        assert kl_logistic_normal(prior.mean, 0.5 * np.log(prior.var), prior) == pytest.approx(0.0, abs=1e-12)
        assert kl_logistic_normal(prior.mean + 1.0, 0.5 * np.log(prior.var), prior) > 0.0

    def test_nonnegative_over_random_inputs(self):
        """Test KL >= 0 for 10000 random posteriors and priors."""
        rng = np.random.default_rng(11)
        for _ in range(10000):
            size = int(rng.integers(2, 7))
            prior = laplace_prior(rng.uniform(0.05, 5.0, size=size))
            mu = 3.0 * rng.standard_normal(size)
            log_sigma = rng.uniform(-3.0, 2.0, size=size)
            assert kl_logistic_normal(mu, log_sigma, prior) >= 0.0
            assert kl_standard_normal(mu, log_sigma) >= 0.0


class TestSampling:
    """Test cases for reparameterized sampling and pooling helpers."""

    def test_frozen_noise(self):
        """Test that rng=None returns the mean, softmaxed for topics."""
        mu = np.array([[0.2, -0.4, 1.0]])
        np.testing.assert_array_equal(sample_latent(mu, np.zeros_like(mu), "R"), mu)
        np.testing.assert_allclose(sample_latent(mu, np.zeros_like(mu), "T"), softmax_rows(mu))

    def test_seeded_noise(self):
        """Test that equal seeds give equal draws and topic draws lie on the simplex."""
        mu = np.zeros((4, 3))
        a = sample_latent(mu, np.zeros_like(mu), "T", np.random.default_rng(5))
        b = sample_latent(mu, np.zeros_like(mu), "T", np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(a.sum(axis=1), 1.0)

    def test_pooled_feature(self):
        """Test columnwise max pooling of code embeddings."""
        embeddings = np.array([[1.0, -2.0], [0.0, 3.0], [9.0, 9.0]])
        np.testing.assert_array_equal(pooled_admission_feature(np.array([0, 1]), embeddings), [1.0, 3.0])

    def test_pooled_feature_empty(self):
        """Test that pooling an empty code set is an error."""
        with pytest.raises(ValueError, match="empty"):
            pooled_admission_feature(np.array([], dtype=np.int64), np.zeros((2, 2)))


class TestLikelihoods:
    """Test cases for the decoder likelihoods."""

    def test_topic_uniform(self):
        """Test one biterm under uniform topics over four codes."""
        beta = np.full((2, 4), 0.25)
        assert topic_log_likelihood([(0, 1)], np.array([0.5, 0.5]), beta) == pytest.approx(math.log(1 / 16))
        assert topic_log_likelihood([], np.array([0.5, 0.5]), beta) == 0.0

    def test_multinomial_uniform(self):
        """Test a one-hot target under uniform logits over five procedures."""
        counts = np.array([[1.0, 0.0, 0.0, 0.0, 0.0]])
        assert multinomial_log_likelihood(counts, np.zeros((1, 5))) == pytest.approx(math.log(1 / 5))

    def test_multinomial_rejects_empty_target(self):
        """Test that an all-zero target is rejected."""
        with pytest.raises(ValueError):
            multinomial_log_likelihood(np.zeros((1, 3)), np.zeros((1, 3)))

    def test_multinomial_invariant_to_logit_shift(self):
        """Test that adding a constant to every logit leaves the likelihood unchanged."""
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((4, 6))
        counts = rng.integers(0, 3, size=(4, 6)).astype(float)
        counts[:, 0] += 1.0
        expected = multinomial_log_likelihood(counts, logits)
        for shift in (-40.0, 3.5, 250.0):
            assert multinomial_log_likelihood(counts, logits + shift) == pytest.approx(expected, rel=1e-9)


class TestGCN:
    """Test cases for the two-layer graph convolution."""

    def setup_method(self):
        """Set up test fixtures."""
        self.identity = sp.identity(3, format="csr")
        self.x = np.array([[1.0, -2.0], [0.5, 0.0], [-1.0, 3.0]])
        self.eye = np.eye(2)

    def test_identity_graph_and_weights(self):
        """Test that identity A and W reduce both layers to ReLU."""
        h1, h2 = gcn_encode(self.identity, self.x, self.eye, self.eye, residual=False)
        np.testing.assert_array_equal(h1, np.maximum(self.x, 0.0))
        np.testing.assert_array_equal(h2, np.maximum(self.x, 0.0))

    def test_residual(self):
        """Test that the residual adds the first layer."""
        _, h2 = gcn_encode(self.identity, self.x, self.eye, self.eye, residual=True)
        np.testing.assert_array_equal(h2, 2.0 * np.maximum(self.x, 0.0))

    def test_zero_second_layer(self):
        """Test that W2 = 0 leaves H1 with the residual and zeros without it."""
        h1, h2 = gcn_encode(self.identity, self.x, self.eye, np.zeros((2, 2)), residual=True)
        np.testing.assert_array_equal(h2, h1)
        _, h2 = gcn_encode(self.identity, self.x, self.eye, np.zeros((2, 2)), residual=False)
        np.testing.assert_array_equal(h2, 0.0)

    def test_residual_width_mismatch(self):
        """Test that the residual needs equal layer widths."""
        with pytest.raises(ShapeError, match="residual"):
            gcn_encode(self.identity, self.x, self.eye, np.ones((2, 3)), residual=True)

    @pytest.mark.parametrize("residual", [True, False])
    def test_permutation_equivariance(self, residual):
        """Test that relabeling nodes permutes the encoder output the same way."""
        rng = np.random.default_rng(4)
        weights = rng.uniform(0.0, 1.0, size=(7, 7)) * (rng.uniform(size=(7, 7)) < 0.4)
        adjacency = sp.csr_matrix(np.triu(weights, 1) + np.triu(weights, 1).T + np.eye(7))
        x = rng.standard_normal((7, 3))
        w1, w2 = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
        perm = rng.permutation(7)

        _, h = gcn_encode(normalize_adjacency(adjacency), x, w1, w2, residual)
        permuted = sp.csr_matrix(adjacency[perm][:, perm])
        _, h_perm = gcn_encode(normalize_adjacency(permuted), x[perm], w1, w2, residual)
        np.testing.assert_allclose(h_perm, h[perm], atol=1e-12)


class TestGDVAE:
    """Test cases for model structure and inference."""

    def setup_method(self):
        """Set up test fixtures."""
        self.corpus, self.graph, self.model = tiny_model()

    def test_parameter_shapes(self):
        """Test that every parameter has its declared shape."""
        shapes = self.model.shapes()
        assert set(shapes) == set(self.model.params)
        for name, p in self.model.params.items():
            assert p.shape == shapes[name]
        assert shapes["X"] == (8, 4)
        assert shapes["rec.W2"] == (4, 3)
        assert shapes["cls.W"] == (3, 2)
        assert shapes["head.T.W"] == (4, 6)

    def test_initialization(self):
        """Test zero biases and deterministic weights."""
        assert np.all(self.model.params["head.R.b"].value == 0.0)
        _, _, other = tiny_model()
        for name in ("head.T.W", "rec.W1", "topic.B"):
            np.testing.assert_array_equal(self.model.params[name].value, other.params[name].value)

    def test_parameters_for_tasks(self):
        """Test the shared and per-task parameter selection."""
        names = [p.name for p in self.model.parameters(["R"])]
        assert names == list(SHARED_PARAMETERS) + list(TASK_PARAMETERS["R"])
        assert len(self.model.parameters()) == len(self.model.params)

    def test_encode_shapes(self):
        """Test node representation shapes per view."""
        assert self.model.encode("T").shape == (14, 4)
        assert self.model.encode("R").shape == (11, 4)
        np.testing.assert_array_equal(self.model.encode("P"), self.model.encode("T"))

    def test_zero_head_gives_standard_posterior(self):
        """Test that zero head weights give mu = 0 and log sigma = 0."""
        self.model.params["head.P.W"].value[:] = 0.0
        mu, log_sigma = self.model.infer_latent("P")
        np.testing.assert_array_equal(mu, np.zeros((6, 3)))
        np.testing.assert_array_equal(log_sigma, np.zeros((6, 3)))

    def test_infer_latent_for_documents(self):
        """Test topic posteriors for explicit code groups."""
        mu, log_sigma = self.model.infer_latent("T", doc_codes=[np.array([0, 5]), np.array([1, 2, 7])])
        assert mu.shape == (2, 3)
        assert log_sigma.shape == (2, 3)

    def test_infer_latent_for_admissions_under_topic_view(self):
        """Test that each admission is a topic document over its own codes."""
        mu, log_sigma = self.model.infer_latent("T")
        assert mu.shape == (6, 3)
        assert log_sigma.shape == (6, 3)
        expected, _ = self.model.infer_latent("T", doc_codes=self.model.groups["codes"])
        np.testing.assert_array_equal(mu, expected)

        subset, _ = self.model.infer_latent("T", positions=np.array([4, 1]))
        np.testing.assert_allclose(subset, expected[[4, 1]])

    def test_default_initialization_spreads_type_latents(self):
        """Test that a freshly initialized model gives type means of order one."""
        model = GDVAE(self.model.config, self.graph, num_labels=2, rng=np.random.default_rng(0))
        mu, _ = model.infer_latent("P")
        assert np.std(mu) > 0.05
        assert np.all(model.params["head.P.b"].value == 0.0)

    def test_rec_likelihood_invariant_to_logit_shift(self):
        """Test that shifting every procedure logit by a constant changes nothing."""
        z = np.array([0.3, -1.0, 2.0])
        counts = np.array([1.0, 0.0, 2.0])
        before = self.model.rec_log_likelihood(counts, z)
        self.model.params["rec.b2"].value += 6.0
        assert self.model.rec_log_likelihood(counts, z) == pytest.approx(before, rel=1e-9)

    def test_head_forward_matches_infer_latent(self):
        """Test that the head on encoded rows reproduces infer_latent."""
        h = self.model.encode("R")
        rows = self.model.views["diseases"].admission_rows[[1, 4]]
        mu, _ = self.model.head_forward(h, rows, "R")
        expected, _ = self.model.infer_latent("R", positions=np.array([1, 4]))
        np.testing.assert_allclose(mu, expected)

    def test_uniform_decoders(self):
        """Test decoder likelihoods with zeroed output layers."""
        for name in ("rec.W2", "rec.b2", "cls.W", "cls.b", "topic.B"):
            self.model.params[name].value[:] = 0.0
        z = np.array([0.3, -1.0, 2.0])

        assert self.model.rec_log_likelihood(np.array([0.0, 1.0, 0.0]), z) == pytest.approx(math.log(1 / 3))
        assert self.model.cls_log_likelihood(1, z) == pytest.approx(math.log(1 / 2))
        assert self.model.topic_log_likelihood([(0, 5)], np.array([0.2, 0.3, 0.5])) == pytest.approx(math.log(1 / 64))
        np.testing.assert_allclose(self.model.rec_probabilities(z), np.full((1, 3), 1 / 3))

    def test_label_out_of_range(self):
        """Test that an unknown label index is rejected."""
        with pytest.raises(ValueError, match="out of range"):
            self.model.cls_log_likelihood(2, np.zeros(3))

    def test_unknown_task(self):
        """Test that inference rejects unknown tasks."""
        with pytest.raises(ValueError, match="Unknown task"):
            self.model.infer_latent("Q")


class TestElboJoint:
    """Test cases for the joint objective and its gradients."""

    def setup_method(self):
        """Set up test fixtures."""
        self.corpus, self.graph, self.model = tiny_model()
        self.batches = all_batches(self.corpus, self.graph)

    def test_gradients_match_finite_differences(self):
        """Test backpropagated gradients of the full objective with frozen noise."""
        self.model.zero_grad()
        elbo_joint(self.batches, self.model, np.random.default_rng(7))
        analytic = {p.name: p.grad.copy() for p in self.model.parameters()}

        for p in self.model.parameters():
            original = p.value

            def loss(x, p=p):
                p.value = x
                return elbo_joint(self.batches, self.model, np.random.default_rng(7), backward=False).loss

            numeric = numeric_gradient(loss, original.copy())
            p.value = original
            np.testing.assert_allclose(analytic[p.name], numeric, rtol=1e-4, atol=1e-7, err_msg=p.name)

    def test_joint_loss_is_sum_of_task_losses(self):
        """Test that the joint loss with frozen noise is the sum of single-task losses."""
        joint = elbo_joint(self.batches, self.model, backward=False)
        singles = {t: elbo_joint({t: b}, self.model, backward=False).loss for t, b in self.batches.items()}

        assert joint.loss == pytest.approx(sum(singles.values()))
        for task, value in singles.items():
            assert joint.task_losses[task] == pytest.approx(value)
            assert joint.task_losses[task] == pytest.approx(-joint.reconstruction[task] + joint.kl[task])

    def test_deterministic_given_seed(self):
        """Test that equal noise seeds give equal losses."""
        a = elbo_joint(self.batches, self.model, np.random.default_rng(3), backward=False).loss
        b = elbo_joint(self.batches, self.model, np.random.default_rng(3), backward=False).loss
        assert a == b

    def test_inactive_heads_receive_no_gradient(self):
        """Test that a recommendation-only step leaves other heads untouched."""
        self.model.zero_grad()
        elbo_joint({"R": self.batches["R"]}, self.model, np.random.default_rng(1))

        for name in TASK_PARAMETERS["T"] + TASK_PARAMETERS["P"]:
            assert np.all(self.model.params[name].grad == 0.0), name
        for name in SHARED_PARAMETERS + TASK_PARAMETERS["R"]:
            assert np.any(self.model.params[name].grad != 0.0), name

    def test_no_backward_leaves_gradients(self):
        """Test that backward=False accumulates nothing."""
        self.model.zero_grad()
        elbo_joint(self.batches, self.model, backward=False)
        assert all(np.all(p.grad == 0.0) for p in self.model.parameters())

    def test_non_finite_loss_names_task(self):
        """Test that a NaN loss raises NonFiniteError naming the task."""
        self.model.params["cls.b"].value[0] = np.nan
        with pytest.raises(NonFiniteError, match="task P"):
            elbo_joint({"P": self.batches["P"]}, self.model)

    def test_empty_inputs(self):
        """Test that no tasks or an empty batch is rejected."""
        with pytest.raises(ValueError, match="at least one active task"):
            elbo_joint({}, self.model)
        with pytest.raises(ValueError, match="Empty batch"):
            elbo_joint({"R": TaskBatch(task="R")}, self.model)
