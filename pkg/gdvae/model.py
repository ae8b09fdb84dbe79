"""The graph-driven VAE: shared GCN encoder, per-task heads, decoders and the joint ELBO."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from .config import TASKS, TrainConfig
from .graph import AdmissionGraph, TaskView, task_view
from .neural import functional as F
from .neural.optim import NonFiniteError, Parameter
from .neural.primitives import BitermLogLikelihood, ShapeError, gaussian_kl, log_softmax_rows, softmax_rows
from .neural.tape import Tape, Variable

logger = logging.getLogger("gdvae.model")

SHARED_PARAMETERS = ("X", "gcn.W1", "gcn.W2")
TASK_PARAMETERS: Dict[str, Tuple[str, ...]] = {
    "T": ("head.T.W", "head.T.b", "topic.B"),
    "R": ("head.R.W", "head.R.b", "rec.W1", "rec.b1", "rec.W2", "rec.b2"),
    "P": ("head.P.W", "head.P.b", "cls.W", "cls.b"),
}
# Topic modeling and type prediction encode the same view
VIEW_OF_TASK = {"T": "codes", "R": "diseases", "P": "codes"}


@dataclass(frozen=True)
class LaplacePrior:
    """Logistic-normal approximation of a Dirichlet prior in logit space."""

    mean: np.ndarray
    var: np.ndarray

    @property
    def num_topics(self) -> int:
        return len(self.mean)


def laplace_prior(alpha: Sequence[float]) -> LaplacePrior:
    """Laplace approximation of Dir(alpha) as a diagonal Gaussian over softmax logits.

    mean_i = log a_i - mean_j log a_j, var_i = (1/a_i)(1 - 2/L) + (1/L^2) sum_j 1/a_j.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 1 or alpha.size == 0:
        raise ValueError(f"alpha must be a nonempty vector, got shape {alpha.shape}")
    if np.any(alpha <= 0) or not np.all(np.isfinite(alpha)):
        raise ValueError("alpha entries must be positive and finite")
    size = alpha.size
    log_alpha = np.log(alpha)
    mean = log_alpha - log_alpha.mean()
    var = (1.0 / alpha) * (1.0 - 2.0 / size) + np.sum(1.0 / alpha) / size**2
    return LaplacePrior(mean=mean, var=var)


def kl_standard_normal(mu: np.ndarray, log_sigma: np.ndarray) -> float:
    """KL(N(mu, sigma^2) || N(0, I)) summed over all entries."""
    mu = np.asarray(mu, dtype=np.float64)
    return float(np.sum(gaussian_kl(mu, np.asarray(log_sigma, dtype=np.float64), 0.0, 1.0)))


def kl_logistic_normal(mu: np.ndarray, log_sigma: np.ndarray, prior: LaplacePrior) -> float:
    """KL from a diagonal Gaussian in logit space to the Laplace prior, summed over all entries."""
    mu = np.asarray(mu, dtype=np.float64)
    return float(np.sum(gaussian_kl(mu, np.asarray(log_sigma, dtype=np.float64), prior.mean, prior.var)))


def sample_latent(
    mu: np.ndarray, log_sigma: np.ndarray, task: str, rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """Reparameterized draw; ``rng=None`` freezes the noise at zero.

    Topic proportions are the softmax of the Gaussian draw.
    """
    eps = np.zeros_like(mu) if rng is None else rng.standard_normal(np.shape(mu))
    z = mu + np.exp(log_sigma) * eps
    return softmax_rows(z) if task == "T" else z


def pooled_admission_feature(codes: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    """Columnwise maximum of the embedding rows named by ``codes``."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size == 0:
        raise ValueError("Cannot pool an empty code set")
    return embeddings[codes].max(axis=0)


def topic_log_likelihood(biterms: Sequence[Tuple[int, int]], z: np.ndarray, beta: np.ndarray) -> float:
    """Log-likelihood of a bag of biterms under topic proportions ``z`` and topics ``beta``."""
    if len(biterms) == 0:
        return 0.0
    pairs = np.asarray(biterms, dtype=np.int64)
    doc_index = np.zeros(len(pairs), dtype=np.int64)
    primitive = BitermLogLikelihood(doc_index, pairs[:, 0], pairs[:, 1], np.ones(len(pairs)), 1)
    out, _ = primitive.forward(np.atleast_2d(z), beta)
    return float(out[0])


def multinomial_log_likelihood(counts: np.ndarray, logits: np.ndarray) -> float:
    """sum_v y_v log softmax(logits)_v, multinomial coefficient dropped."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.sum() <= 0 or np.any(counts < 0):
        raise ValueError("Multinomial target must be nonnegative with at least one positive entry")
    return float(np.sum(counts * log_softmax_rows(np.asarray(logits, dtype=np.float64))))


def gcn_layers(
    normalized, features: Variable, w1: Variable, w2: Variable, residual: bool = True
) -> Tuple[Variable, Variable]:
    """Two graph convolutions, H1 = ReLU(A X W1) and H2 = ReLU(A H1 W2) [+ H1]."""
    h1 = F.relu(F.spmm(normalized, F.matmul(features, w1)))
    h2 = F.relu(F.spmm(normalized, F.matmul(h1, w2)))
    if residual:
        if h2.shape != h1.shape:
            raise ShapeError(f"residual needs equal layer widths, got {h1.shape} and {h2.shape}")
        h2 = F.add(h2, h1)
    return h1, h2


def gcn_encode(
    normalized, features: np.ndarray, w1: np.ndarray, w2: np.ndarray, residual: bool = True
) -> Tuple[np.ndarray, np.ndarray]:
    """Untracked two-layer GCN over plain arrays, returning (H1, H2)."""
    tape = Tape()
    h1, h2 = gcn_layers(normalized, tape.constant(features), tape.constant(w1), tape.constant(w2), residual)
    return h1.value, h2.value


@dataclass
class TaskBatch:
    """Encoder inputs and targets for one task in one step.

    Topic batches carry per-document code groups and flattened biterms; recommendation and
    prediction batches carry admission positions and their targets.
    """

    task: str
    positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    targets: np.ndarray = field(default_factory=lambda: np.zeros(0))
    doc_codes: List[np.ndarray] = field(default_factory=list)
    biterm_doc: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    biterm_left: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    biterm_right: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    biterm_count: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def size(self) -> int:
        return len(self.doc_codes) if self.task == "T" else len(self.positions)


@dataclass
class ElboResult:
    loss: float
    task_losses: Dict[str, float]
    reconstruction: Dict[str, float]
    kl: Dict[str, float]


class _Scope:
    """Parameter variables for one forward pass; trainable names are watched, the rest are constants."""

    def __init__(self, model: "GDVAE", trainable: Set[str]):
        self.tape = Tape()
        self.model = model
        self.trainable = trainable
        self.vars: Dict[str, Variable] = {}
        self.encoded: Dict[str, Variable] = {}

    def var(self, name: str) -> Variable:
        if name not in self.vars:
            param = self.model.params[name]
            if name in self.trainable:
                self.vars[name] = self.tape.watch(param)
            else:
                self.vars[name] = self.tape.constant(param.value)
        return self.vars[name]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class GDVAE:
    """Shared GCN encoder feeding topic, recommendation and type-prediction VAEs."""

    def __init__(
        self,
        config: TrainConfig,
        graph: AdmissionGraph,
        num_labels: int,
        rng: Optional[np.random.Generator] = None,
    ):
        """Initialize the model over a built graph.

        Args:
            config: Training configuration with model dimensions
            graph: Admission graph supplying node views and pooling groups
            num_labels: Number of admission types
            rng: Generator for weight initialization (seeded from config when None)
        """
        self.config = config
        self.graph = graph
        self.num_labels = num_labels
        self.num_topics = config.num_topics
        self.prior = laplace_prior(np.full(config.num_topics, config.alpha))
        self.views: Dict[str, TaskView] = {
            "codes": task_view(graph, "T"),
            "diseases": task_view(graph, "R"),
        }
        self.groups: Dict[str, List[np.ndarray]] = {key: view.pooling_groups(graph) for key, view in self.views.items()}
        self.params: Dict[str, Parameter] = {}
        self.initialize(rng if rng is not None else np.random.default_rng(config.seed))

    @property
    def num_codes(self) -> int:
        return self.graph.layout.num_codes

    @property
    def num_procedures(self) -> int:
        return self.graph.layout.num_procedures

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Expected parameter shapes for this model's config and graph."""
        c = self.config
        return {
            "X": (self.num_codes, c.d_emb),
            "gcn.W1": (c.d_emb, c.d_emb),
            "gcn.W2": (c.d_emb, c.d_emb),
            "head.T.W": (c.d_emb, 2 * c.num_topics),
            "head.T.b": (2 * c.num_topics,),
            "topic.B": (c.num_topics, self.num_codes),
            "head.R.W": (c.d_emb, 2 * c.d_latent),
            "head.R.b": (2 * c.d_latent,),
            "rec.W1": (c.d_latent, c.rec_hidden),
            "rec.b1": (c.rec_hidden,),
            "rec.W2": (c.rec_hidden, self.num_procedures),
            "rec.b2": (self.num_procedures,),
            "head.P.W": (c.d_emb, 2 * c.d_latent),
            "head.P.b": (2 * c.d_latent,),
            "cls.W": (c.d_latent, self.num_labels),
            "cls.b": (self.num_labels,),
        }

    def initialize(self, rng: np.random.Generator) -> None:
        """Standard-normal code embeddings, Glorot-uniform weights, zero biases."""
        self.params = {}
        for name, shape in self.shapes().items():
            if len(shape) == 1:
                value = np.zeros(shape)
            elif name == "X":
                value = rng.standard_normal(shape)
            else:
                value = _glorot(rng, *shape)
            self.params[name] = Parameter(name, value)
        logger.debug(f"Initialized {len(self.params)} parameters")

    def parameters(self, tasks: Optional[Sequence[str]] = None) -> List[Parameter]:
        """Shared encoder parameters plus the heads and decoders of ``tasks``, in a fixed order."""
        active = set(TASKS) if tasks is None else set(tasks)
        names = list(SHARED_PARAMETERS)
        for task in TASKS:
            if task in active:
                names.extend(TASK_PARAMETERS[task])
        return [self.params[name] for name in names]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # Forward pieces on a scope

    def _encode(self, scope: _Scope, view_key: str) -> Variable:
        if view_key not in scope.encoded:
            view = self.views[view_key]
            x = scope.var("X")
            features = F.concat_rows(F.gather_rows(x, view.code_nodes), F.max_pool(x, self.groups[view_key]))
            _, h = gcn_layers(view.normalized, features, scope.var("gcn.W1"), scope.var("gcn.W2"), self.config.residual)
            scope.encoded[view_key] = h
        return scope.encoded[view_key]

    def _head(self, scope: _Scope, rows: Variable, task: str) -> Tuple[Variable, Variable]:
        out = F.add(F.matmul(rows, scope.var(f"head.{task}.W")), scope.var(f"head.{task}.b"))
        dim = out.shape[1] // 2
        return F.slice_columns(out, 0, dim), F.slice_columns(out, dim, 2 * dim)

    def _head_input(self, scope: _Scope, batch: TaskBatch) -> Variable:
        view_key = VIEW_OF_TASK[batch.task]
        h = self._encode(scope, view_key)
        if batch.task == "T":
            return F.max_pool(h, batch.doc_codes)
        return F.gather_rows(h, self.views[view_key].admission_rows[batch.positions])

    def _sample(self, mu: Variable, log_sigma: Variable, task: str, rng: Optional[np.random.Generator]) -> Variable:
        eps = np.zeros(mu.shape) if rng is None else rng.standard_normal(mu.shape)
        z = F.add(mu, F.multiply(F.exp(log_sigma), eps))
        return F.row_softmax(z) if task == "T" else z

    def _rec_logits(self, scope: _Scope, z: Variable) -> Variable:
        hidden = F.tanh(F.add(F.matmul(z, scope.var("rec.W1")), scope.var("rec.b1")))
        return F.add(F.matmul(hidden, scope.var("rec.W2")), scope.var("rec.b2"))

    def _cls_logits(self, scope: _Scope, z: Variable) -> Variable:
        return F.add(F.matmul(z, scope.var("cls.W")), scope.var("cls.b"))

    def _task_terms(
        self, scope: _Scope, batch: TaskBatch, rng: Optional[np.random.Generator]
    ) -> Tuple[Variable, Variable]:
        """Mean reconstruction log-likelihood and mean KL for one task batch."""
        mu, log_sigma = self._head(scope, self._head_input(scope, batch), batch.task)
        z = self._sample(mu, log_sigma, batch.task, rng)
        if batch.task == "T":
            beta = F.row_softmax(scope.var("topic.B"))
            ll = F.biterm_log_likelihood(
                z, beta, batch.biterm_doc, batch.biterm_left, batch.biterm_right, batch.biterm_count
            )
            kl = F.gaussian_kl(mu, log_sigma, self.prior.mean, self.prior.var)
        else:
            if batch.task == "R":
                log_probs = F.row_log_softmax(self._rec_logits(scope, z))
                targets = batch.targets
            else:
                log_probs = F.row_log_softmax(self._cls_logits(scope, z))
                targets = np.eye(self.num_labels)[batch.targets.astype(np.int64)]
            ll = F.row_sum(F.multiply(log_probs, targets))
            kl = F.gaussian_kl(mu, log_sigma, np.zeros(mu.shape[1]), np.ones(mu.shape[1]))
        return F.mean(ll), F.mean(kl)

    # Untracked inference

    def encode(self, task: str) -> np.ndarray:
        """Node representations H for a task's view."""
        return self._encode(_Scope(self, set()), VIEW_OF_TASK[task]).value

    def pooled_feature(self, position: int, task: str) -> np.ndarray:
        """Max-pooled code embedding of one admission under a task's pooling rule."""
        codes = self.groups[VIEW_OF_TASK[task]][position]
        return pooled_admission_feature(codes, self.params["X"].value)

    def head_forward(self, h: np.ndarray, rows: np.ndarray, task: str) -> Tuple[np.ndarray, np.ndarray]:
        """(mu, log sigma) for the given rows of an encoded view."""
        scope = _Scope(self, set())
        mu, log_sigma = self._head(scope, scope.tape.constant(h[np.asarray(rows, dtype=np.int64)]), task)
        return mu.value, log_sigma.value

    def infer_latent(
        self, task: str, positions: Optional[np.ndarray] = None, doc_codes: Optional[List[np.ndarray]] = None
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Posterior (mu, log sigma) for admissions, or for merged code groups under the topic view."""
        if task not in TASKS:
            raise ValueError(f"Unknown task {task!r}")
        scope = _Scope(self, set())
        if doc_codes is None:
            if positions is None:
                positions = np.arange(self.graph.layout.num_admissions)
            positions = np.asarray(positions, dtype=np.int64)
            if task == "T":
                # An admission is a one-admission topic document over its codes
                doc_codes = [self.groups["codes"][p] for p in positions]
        if doc_codes is not None:
            batch = TaskBatch(task="T", doc_codes=list(doc_codes))
        else:
            batch = TaskBatch(task=task, positions=positions)
        mu, log_sigma = self._head(scope, self._head_input(scope, batch), task)
        return mu.value, log_sigma.value

    def topic_matrix(self) -> np.ndarray:
        """beta: row-softmax of the topic logits, one distribution over codes per topic."""
        return softmax_rows(self.params["topic.B"].value)

    def rec_probabilities(self, z: np.ndarray) -> np.ndarray:
        scope = _Scope(self, set())
        return softmax_rows(self._rec_logits(scope, scope.tape.constant(np.atleast_2d(z))).value)

    def cls_probabilities(self, z: np.ndarray) -> np.ndarray:
        scope = _Scope(self, set())
        return softmax_rows(self._cls_logits(scope, scope.tape.constant(np.atleast_2d(z))).value)

    def topic_log_likelihood(self, biterms: Sequence[Tuple[int, int]], z: np.ndarray) -> float:
        return topic_log_likelihood(biterms, z, self.topic_matrix())

    def rec_log_likelihood(self, counts: np.ndarray, z: np.ndarray) -> float:
        scope = _Scope(self, set())
        logits = self._rec_logits(scope, scope.tape.constant(np.atleast_2d(z))).value
        return multinomial_log_likelihood(np.atleast_2d(counts), logits)

    def cls_log_likelihood(self, label: int, z: np.ndarray) -> float:
        if not 0 <= label < self.num_labels:
            raise ValueError(f"Label index {label} out of range for {self.num_labels} labels")
        probs = self.cls_probabilities(z)[0]
        return float(np.log(max(probs[label], 1e-12)))


def elbo_joint(
    batches: Mapping[str, TaskBatch],
    model: GDVAE,
    rng: Optional[np.random.Generator] = None,
    backward: bool = True,
) -> ElboResult:
    """Negated joint ELBO over the active tasks, accumulating gradients into the model.

    Each task contributes -mean(reconstruction) + mean(KL) over its batch with one
    reparameterized sample per datum; noise is drawn in T, R, P order. ``rng=None`` freezes
    the noise at zero.

    Raises:
        NonFiniteError: If any task's loss is NaN or infinite
    """
    active = [t for t in TASKS if t in batches]
    if not active:
        raise ValueError("elbo_joint needs at least one active task")
    trainable = set(SHARED_PARAMETERS)
    for task in active:
        trainable.update(TASK_PARAMETERS[task])
    scope = _Scope(model, trainable if backward else set())

    total: Optional[Variable] = None
    task_losses: Dict[str, float] = {}
    recon: Dict[str, float] = {}
    kls: Dict[str, float] = {}
    for task in active:
        batch = batches[task]
        if batch.size == 0:
            raise ValueError(f"Empty batch for task {task}")
        ll, kl = model._task_terms(scope, batch, rng)
        loss = F.add(F.scale(ll, -1.0), kl)
        value = float(loss.value)
        if not np.isfinite(value):
            raise NonFiniteError(f"Non-finite loss in task {task}")
        task_losses[task] = value
        recon[task] = float(ll.value)
        kls[task] = float(kl.value)
        total = loss if total is None else F.add(total, loss)

    assert total is not None
    if backward:
        scope.tape.backward(total)
    return ElboResult(loss=float(total.value), task_losses=task_losses, reconstruction=recon, kl=kls)
