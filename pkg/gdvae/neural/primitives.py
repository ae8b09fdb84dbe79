"""Differentiable primitives: forward values and vector-Jacobian products."""

from abc import ABC, abstractmethod
from typing import Any, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy import special

Grads = Tuple[Optional[np.ndarray], ...]


class ShapeError(ValueError):
    """Raised when primitive inputs have incompatible shapes."""


class Primitive(ABC):
    """Abstract interface for a recorded operation."""

    name = "primitive"

    @abstractmethod
    def forward(self, *inputs: np.ndarray) -> Tuple[np.ndarray, Any]:
        """Compute the output and the context saved for the backward pass."""
        pass

    @abstractmethod
    def backward(self, grad: np.ndarray, saved: Any) -> Grads:
        """Map the upstream gradient to one gradient per input (None if not differentiable)."""
        pass


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(name: str, a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


class MatMul(Primitive):
    name = "matmul"

    def forward(self, *inputs: np.ndarray) -> Tuple[np.ndarray, Any]:
        a, b = inputs
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        return a @ b, (a, b)

    def backward(self, grad: np.ndarray, saved: Any) -> Grads:
        a, b = saved
        return grad @ b.T, a.T @ grad


class SpMM(Primitive):
    """Product of a constant sparse matrix with a dense input."""

    name = "spmm"

    def __init__(self, matrix: sp.spmatrix):
        self.matrix = sp.csr_matrix(matrix)

    def forward(self, *inputs: np.ndarray) -> Tuple[np.ndarray, Any]:
        (x,) = inputs
        if x.ndim != 2 or self.matrix.shape[1] != x.shape[0]:
            raise ShapeError(f"spmm: cannot multiply sparse {self.matrix.shape} by {x.shape}")
        return np.asarray(self.matrix @ x), None

    def backward(self, grad: np.ndarray, saved: Any) -> Grads:
        return (np.asarray(self.matrix.T @ grad),)


class Add(Primitive):
    name = "add"

    def forward(self, *inputs: np.ndarray) -> Tuple[np.ndarray, Any]:
        a, b = inputs
        _broadcast_shape(self.name, a, b)
        return a + b, (a.shape, b.shape)

    def backward(self, grad: np.ndarray, saved: Any) -> Grads:
        a_shape, b_shape = saved
        return _unbroadcast(grad, a_shape), _unbroadcast(grad, b_shape)


class Multiply(Primitive):
    name = "multiply"

    def forward(self, *inputs: np.ndarray) -> Tuple[np.ndarray, Any]:
        a, b = inputs
        _broadcast_shape(self.name, a, b)
        return a * b, (a, b)

    def backward(self, grad: np.ndarray, saved: Any) -> Grads:
        a, b = saved
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


class Scale(Primitive):
    name = "scale"

    def __init__(self, factor: float):
        self.factor = float(factor)

    def forward(self, *inputs: np.ndarray) -> Tuple[np.ndarray, Any]:
        (x,) = inputs
        return self.factor * x, None

    def backward(self, grad: np.ndarray, saved: Any) -> Grads:
        return (self.factor * grad,)


class Exp(Primitive):
    name = "exp"

    def forward(self, *inputs: np.ndarray) -> Tuple[np.ndarray, Any]:
        (x,) = inputs
        out = np.exp(x)
        return out, out

    def backward(self, grad: np.ndarray, saved: Any) -> Grads:
        return (grad * saved,)


class Relu(Primitive):
    name = "relu"

    def forward(self, *inputs: np.ndarray) -> Tuple[np.ndarray, Any]:
        (x,) = inputs
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, grad: np.ndarray, saved: Any) -> Grads:
        return (np.where(saved, grad, 0.0),)


class Tanh(Primitive):
    name = "tanh"

    def forward(self, *inputs: np.ndarray) -> Tuple[np.ndarray, Any]:
        (x,) = inputs
        out = np.tanh(x)
        return out, out

    def backward(self, grad: np.ndarray, saved: Any) -> Grads:
        return (grad * (1.0 - saved**2),)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    return special.softmax(x, axis=-1)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    return special.log_softmax(x, axis=-1)


class RowSoftmax(Primitive):
    name = "row_softmax"

    def forward(self, *inputs: np.ndarray) -> Tuple[np.ndarray, Any]:
        (x,) = inputs
        out = softmax_rows(x)
        return out, out

    def backward(self, grad: np.ndarray, saved: Any) -> Grads:
        s = saved
        return (s * (grad - (grad * s).sum(axis=-1, keepdims=True)),)


class RowLogSoftmax(Primitive):
    name = "row_log_softmax"

    def forward(self, *inputs: np.ndarray) -> Tuple[np.ndarray, Any]:
        (x,) = inputs
        out = log_softmax_rows(x)
        return out, out

    def backward(self, grad: np.ndarray, saved: Any) -> Grads:
        return (grad - np.exp(saved) * grad.sum(axis=-1, keepdims=True),)


class MaxPool(Primitive):
    """Columnwise maximum over groups of rows, one output row per group.

    Ties go to the lowest row index; an empty group yields a zero row with no gradient.
    """

    name = "max_pool"

    def __init__(self, groups: Sequence[np.ndarray]):
        self.groups = [np.unique(np.asarray(g, dtype=np.int64)) for g in groups]
        width = max((len(g) for g in self.groups), default=0)
        self.index = np.zeros((len(self.groups), max(width, 1)), dtype=np.int64)
        self.mask = np.zeros(self.index.shape, dtype=bool)
        for k, g in enumerate(self.groups):
            self.index[k, : len(g)] = g
            self.mask[k, : len(g)] = True
        self.nonempty = self.mask.any(axis=1)

    def forward(self, *inputs: np.ndarray) -> Tuple[np.ndarray, Any]:
        (x,) = inputs
        if x.ndim != 2:
            raise ShapeError(f"max_pool: expected a matrix, got shape {x.shape}")
        if self.mask.any() and self.index[self.mask].max() >= x.shape[0]:
            raise ShapeError(f"max_pool: row index {self.index[self.mask].max()} out of range for {x.shape}")
        vals = x[self.index]
        vals = np.where(self.mask[:, :, None], vals, -np.inf)
        slot = vals.argmax(axis=1)
        out = np.take_along_axis(vals, slot[:, None, :], axis=1)[:, 0, :]
        out[~self.nonempty] = 0.0
        rows = np.take_along_axis(self.index, slot, axis=1)
        return out, (x.shape, rows)

    def backward(self, grad: np.ndarray, saved: Any) -> Grads:
        shape, rows = saved
        dx = np.zeros(shape)
        cols = np.broadcast_to(np.arange(shape[1]), rows.shape)
        keep = self.nonempty
        np.add.at(dx, (rows[keep], cols[keep]), grad[keep])
        return (dx,)


class GatherRows(Primitive):
    name = "gather_rows"

    def __init__(self, indices: np.ndarray):
        self.indices = np.asarray(indices, dtype=np.int64)

    def forward(self, *inputs: np.ndarray) -> Tuple[np.ndarray, Any]:
        (x,) = inputs
        if len(self.indices) and (self.indices.max() >= x.shape[0] or self.indices.min() < -x.shape[0]):
            raise ShapeError(f"gather_rows: indices out of range for shape {x.shape}")
        return x[self.indices], x.shape

    def backward(self, grad: np.ndarray, saved: Any) -> Grads:
        dx = np.zeros(saved)
        np.add.at(dx, self.indices, grad)
        return (dx,)


class ConcatRows(Primitive):
    name = "concat_rows"

    def forward(self, *inputs: np.ndarray) -> Tuple[np.ndarray, Any]:
        widths = {x.shape[1:] for x in inputs}
        if len(widths) != 1:
            raise ShapeError(f"concat_rows: mismatched shapes {[x.shape for x in inputs]}")
        return np.concatenate(inputs, axis=0), np.cumsum([x.shape[0] for x in inputs])[:-1]

    def backward(self, grad: np.ndarray, saved: Any) -> Grads:
        return tuple(np.split(grad, saved, axis=0))


class SliceColumns(Primitive):
    name = "slice_columns"

    def __init__(self, start: int, stop: int):
        self.start = start
        self.stop = stop

    def forward(self, *inputs: np.ndarray) -> Tuple[np.ndarray, Any]:
        (x,) = inputs
        if not 0 <= self.start < self.stop <= x.shape[1]:
            raise ShapeError(f"slice_columns: [{self.start}, {self.stop}) out of range for {x.shape}")
        return x[:, self.start : self.stop], x.shape

    def backward(self, grad: np.ndarray, saved: Any) -> Grads:
        dx = np.zeros(saved)
        dx[:, self.start : self.stop] = grad
        return (dx,)


class RowSum(Primitive):
    name = "row_sum"

    def forward(self, *inputs: np.ndarray) -> Tuple[np.ndarray, Any]:
        (x,) = inputs
        return x.sum(axis=1), x.shape

    def backward(self, grad: np.ndarray, saved: Any) -> Grads:
        return (np.broadcast_to(grad[:, None], saved).copy(),)


class Sum(Primitive):
    name = "sum"

    def forward(self, *inputs: np.ndarray) -> Tuple[np.ndarray, Any]:
        (x,) = inputs
        return np.asarray(x.sum()), x.shape

    def backward(self, grad: np.ndarray, saved: Any) -> Grads:
        return (np.full(saved, float(grad)),)


class Mean(Primitive):
    name = "mean"

    def forward(self, *inputs: np.ndarray) -> Tuple[np.ndarray, Any]:
        (x,) = inputs
        if x.size == 0:
            raise ShapeError("mean: empty input")
        return np.asarray(x.mean()), x.shape

    def backward(self, grad: np.ndarray, saved: Any) -> Grads:
        return (np.full(saved, float(grad) / int(np.prod(saved))),)


class BitermLogLikelihood(Primitive):
    """Per-document log-likelihood of a bag of biterms under a topic mixture.

    For document d with topic proportions z_d and topic-code matrix beta, each biterm (i, j)
    with multiplicity c contributes c * log(sum_l z_dl beta_li beta_lj), the mixture floored
    at ``floor`` inside the log.
    """

    name = "biterm_log_likelihood"

    def __init__(self, doc_index: np.ndarray, left: np.ndarray, right: np.ndarray, counts: np.ndarray, num_docs: int):
        self.doc_index = np.asarray(doc_index, dtype=np.int64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.float64)
        self.num_docs = num_docs
        self.floor = 1e-12

    def forward(self, *inputs: np.ndarray) -> Tuple[np.ndarray, Any]:
        z, beta = inputs
        if z.ndim != 2 or beta.ndim != 2 or z.shape[1] != beta.shape[0] or z.shape[0] != self.num_docs:
            raise ShapeError(f"biterm_log_likelihood: topic shares {z.shape} do not match topics {beta.shape}")
        pair = beta[:, self.left] * beta[:, self.right]  # L x B
        mixture = np.einsum("bl,lb->b", z[self.doc_index], pair)
        floored = np.maximum(mixture, self.floor)
        out = np.zeros(self.num_docs)
        np.add.at(out, self.doc_index, self.counts * np.log(floored))
        return out, (z, beta, pair, mixture)

    def backward(self, grad: np.ndarray, saved: Any) -> Grads:
        z, beta, pair, mixture = saved
        active = mixture > self.floor
        coef = np.where(active, grad[self.doc_index] * self.counts / np.where(active, mixture, 1.0), 0.0)
        dz = np.zeros_like(z)
        np.add.at(dz, self.doc_index, coef[:, None] * pair.T)
        weighted = z[self.doc_index].T * coef  # L x B
        dbeta = np.zeros_like(beta)
        np.add.at(dbeta.T, self.left, (weighted * beta[:, self.right]).T)
        np.add.at(dbeta.T, self.right, (weighted * beta[:, self.left]).T)
        return dz, dbeta


def gaussian_kl(mu: np.ndarray, log_sigma: np.ndarray, prior_mean: np.ndarray, prior_var: np.ndarray) -> np.ndarray:
    """Rowwise KL(N(mu, diag(sigma^2)) || N(prior_mean, diag(prior_var)))."""
    var = np.exp(2.0 * log_sigma)
    terms = (var + (mu - prior_mean) ** 2) / prior_var - 1.0 + np.log(prior_var) - 2.0 * log_sigma
    return 0.5 * terms.sum(axis=-1)


class DiagonalGaussianKL(Primitive):
    """Rowwise KL from diagonal Gaussian posteriors (mu, log sigma) to a fixed diagonal prior."""

    name = "diagonal_gaussian_kl"

    def __init__(self, prior_mean: np.ndarray, prior_var: np.ndarray):
        self.prior_mean = np.asarray(prior_mean, dtype=np.float64)
        self.prior_var = np.asarray(prior_var, dtype=np.float64)

    def forward(self, *inputs: np.ndarray) -> Tuple[np.ndarray, Any]:
        mu, log_sigma = inputs
        if mu.shape != log_sigma.shape:
            raise ShapeError(f"diagonal_gaussian_kl: mean {mu.shape} and log sigma {log_sigma.shape} differ")
        return gaussian_kl(mu, log_sigma, self.prior_mean, self.prior_var), (mu, log_sigma)

    def backward(self, grad: np.ndarray, saved: Any) -> Grads:
        mu, log_sigma = saved
        g = grad[..., None]
        d_mu = g * (mu - self.prior_mean) / self.prior_var
        d_log_sigma = g * (np.exp(2.0 * log_sigma) / self.prior_var - 1.0)
        return d_mu, d_log_sigma
