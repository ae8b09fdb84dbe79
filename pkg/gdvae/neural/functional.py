"""Functional wrappers that record primitives on the tape of their inputs."""

from typing import Sequence, Union

import numpy as np
import scipy.sparse as sp

from . import primitives as P
from .tape import Tape, Variable

Operand = Union[Variable, np.ndarray, float]


def _tape_of(*args: Operand) -> Tape:
    for arg in args:
        if isinstance(arg, Variable):
            return arg.tape
    raise ValueError("At least one operand must be a tape variable")


def _lift(tape: Tape, arg: Operand) -> Variable:
    return arg if isinstance(arg, Variable) else tape.constant(arg)


def _apply(primitive: P.Primitive, *args: Operand) -> Variable:
    tape = _tape_of(*args)
    return tape.apply(primitive, *(_lift(tape, a) for a in args))


def matmul(a: Operand, b: Operand) -> Variable:
    return _apply(P.MatMul(), a, b)


def spmm(matrix: sp.spmatrix, x: Variable) -> Variable:
    return _apply(P.SpMM(matrix), x)


def add(a: Operand, b: Operand) -> Variable:
    return _apply(P.Add(), a, b)


def multiply(a: Operand, b: Operand) -> Variable:
    return _apply(P.Multiply(), a, b)


def scale(x: Variable, factor: float) -> Variable:
    return _apply(P.Scale(factor), x)


def exp(x: Variable) -> Variable:
    return _apply(P.Exp(), x)


def relu(x: Variable) -> Variable:
    return _apply(P.Relu(), x)


def tanh(x: Variable) -> Variable:
    return _apply(P.Tanh(), x)


def row_softmax(x: Variable) -> Variable:
    return _apply(P.RowSoftmax(), x)


def row_log_softmax(x: Variable) -> Variable:
    return _apply(P.RowLogSoftmax(), x)


def max_pool(x: Variable, groups: Sequence[np.ndarray]) -> Variable:
    return _apply(P.MaxPool(groups), x)


def gather_rows(x: Variable, indices: np.ndarray) -> Variable:
    return _apply(P.GatherRows(indices), x)


def concat_rows(*xs: Operand) -> Variable:
    return _apply(P.ConcatRows(), *xs)


def slice_columns(x: Variable, start: int, stop: int) -> Variable:
    return _apply(P.SliceColumns(start, stop), x)


def row_sum(x: Variable) -> Variable:
    return _apply(P.RowSum(), x)


def total(x: Variable) -> Variable:
    return _apply(P.Sum(), x)


def mean(x: Variable) -> Variable:
    return _apply(P.Mean(), x)


def biterm_log_likelihood(
    z: Variable,
    beta: Variable,
    doc_index: np.ndarray,
    left: np.ndarray,
    right: np.ndarray,
    counts: np.ndarray,
) -> Variable:
    return _apply(P.BitermLogLikelihood(doc_index, left, right, counts, z.shape[0]), z, beta)


def gaussian_kl(mu: Variable, log_sigma: Variable, prior_mean: np.ndarray, prior_var: np.ndarray) -> Variable:
    return _apply(P.DiagonalGaussianKL(prior_mean, prior_var), mu, log_sigma)
