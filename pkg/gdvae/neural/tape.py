"""Tape-based reverse-mode differentiation."""

import logging
from dataclasses import dataclass
from typing import Any, List, Optional, Sequence

import numpy as np

from .optim import Parameter
from .primitives import Primitive, ShapeError

logger = logging.getLogger("gdvae.neural.tape")


class Variable:
    """A value recorded on a tape, with its accumulated gradient after backward."""

    def __init__(
        self,
        tape: "Tape",
        value: np.ndarray,
        requires_grad: bool,
        parameter: Optional[Parameter] = None,
    ):
        """Initialize a tape variable."""
        self.tape = tape
        self.value = value
        self.requires_grad = requires_grad
        self.parameter = parameter
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return tuple(self.value.shape)

    def __repr__(self) -> str:
        name = self.parameter.name if self.parameter is not None else "var"
        return f"Variable({name}, shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Record:
    primitive: Primitive
    inputs: Sequence[Variable]
    output: Variable
    saved: Any


class Tape:
    """Ordered record of primitive applications.

    ``backward`` walks the records in exact reverse order and adds leaf gradients into the
    watched parameters.
    """

    def __init__(self) -> None:
        """Initialize an empty tape."""
        self.records: List[Record] = []
        self.leaves: List[Variable] = []

    def constant(self, value: Any) -> Variable:
        """Wrap a value that receives no gradient."""
        return Variable(self, np.asarray(value, dtype=np.float64), requires_grad=False)

    def watch(self, parameter: Parameter) -> Variable:
        """Wrap a parameter as a leaf whose gradient flows into ``parameter.grad``."""
        leaf = Variable(self, parameter.value, requires_grad=True, parameter=parameter)
        self.leaves.append(leaf)
        return leaf

    def apply(self, primitive: Primitive, *inputs: Variable) -> Variable:
        """Run a primitive forward and record it if any input needs a gradient."""
        for var in inputs:
            if var.tape is not self:
                raise ValueError(f"{primitive.name}: input recorded on a different tape")
        value, saved = primitive.forward(*(var.value for var in inputs))
        requires_grad = any(var.requires_grad for var in inputs)
        out = Variable(self, value, requires_grad)
        if requires_grad:
            self.records.append(Record(primitive, inputs, out, saved))
        return out

    def backward(self, output: Variable) -> None:
        """Backpropagate from a scalar output and accumulate parameter gradients."""
        if output.value.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
        if not output.requires_grad:
            logger.debug("backward called on an output with no trainable inputs")
            return
        output.grad = np.ones_like(output.value)

        for record in reversed(self.records):
            upstream = record.output.grad
            if upstream is None:
                continue
            grads = record.primitive.backward(upstream, record.saved)
            for var, grad in zip(record.inputs, grads):
                if grad is None or not var.requires_grad:
                    continue
                var.grad = grad if var.grad is None else var.grad + grad

        for leaf in self.leaves:
            if leaf.grad is not None and leaf.parameter is not None:
                leaf.parameter.accumulate(leaf.grad)
