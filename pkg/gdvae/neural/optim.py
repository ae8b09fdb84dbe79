"""Trainable parameters and the Adam optimizer."""

import logging
from threading import Lock
from typing import Iterable, List, Sequence

import numpy as np

logger = logging.getLogger("gdvae.neural.optim")


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient is NaN or infinite."""


class Parameter:
    """A trainable float64 array with its gradient and Adam state."""

    def __init__(self, name: str, value: np.ndarray):
        """Initialize a parameter, copying ``value`` to float64."""
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0
        self._lock = Lock()

    @property
    def shape(self) -> tuple:
        return tuple(self.value.shape)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def accumulate(self, grad: np.ndarray) -> None:
        """Add a gradient contribution; safe to call from several tapes."""
        if grad.shape != self.value.shape:
            raise ValueError(f"Gradient shape {grad.shape} does not match parameter {self.name} {self.shape}")
        with self._lock:
            self.grad = self.grad + grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def adam_step(
    params: Sequence[Parameter],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Apply one bias-corrected Adam update in place.

    Every gradient is checked before any parameter moves; a non-finite gradient aborts the
    whole step.

    Args:
        params: Parameters with populated gradients
        lr: Learning rate
        beta1: First-moment decay
        beta2: Second-moment decay
        eps: Denominator offset
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"Non-finite gradient in parameter {p.name}")

    for p in params:
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * p.grad
        p.v = beta2 * p.v + (1.0 - beta2) * p.grad**2
        m_hat = p.m / (1.0 - beta1**p.step)
        v_hat = p.v / (1.0 - beta2**p.step)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a fixed parameter list."""

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        """Initialize the optimizer."""
        self.params: List[Parameter] = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps)
