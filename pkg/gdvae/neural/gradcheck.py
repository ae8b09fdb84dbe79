"""Finite-difference gradient checking."""

import logging
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .optim import NonFiniteError, Parameter

logger = logging.getLogger("gdvae.neural.gradcheck")

LossFn = Callable[[Sequence[Parameter]], float]


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def gradient_check(
    loss_fn: LossFn,
    params: Sequence[Parameter],
    epsilon: float = 1e-5,
    max_coords: Optional[int] = 30,
    seed: int = 0,
) -> float:
    """Compare backpropagated gradients with central differences.

    ``loss_fn`` must be deterministic, run its own forward and backward pass, and return the
    scalar loss; gradients are zeroed before every call.

    Args:
        loss_fn: Callable evaluating the loss at the current parameter values
        params: Parameters to check
        epsilon: Perturbation size
        max_coords: Coordinates sampled per parameter (all when None)
        seed: Seed for the coordinate sample

    Returns:
        float: Maximum relative error over the checked coordinates
    """
    for p in params:
        p.zero_grad()
    loss_fn(params)
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        coords = _sample_coords(p, max_coords, rng)
        flat = p.value.reshape(-1)
        for k in coords:
            original = flat[k]
            flat[k] = original + epsilon
            f_plus = _evaluate(loss_fn, params)
            flat[k] = original - epsilon
            f_minus = _evaluate(loss_fn, params)
            flat[k] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"Loss is non-finite when perturbing {p.name}[{k}]")
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            error = relative_error(float(grad.reshape(-1)[k]), numeric)
            if error > worst:
                worst = error
                logger.debug(f"New worst error {error:.3e} at {p.name}[{k}]")

    for p, grad in zip(params, analytic):
        p.grad = grad
    return worst


def _sample_coords(p: Parameter, max_coords: Optional[int], rng: np.random.Generator) -> List[int]:
    size = p.value.size
    if max_coords is None or size <= max_coords:
        return list(range(size))
    return sorted(int(k) for k in rng.choice(size, size=max_coords, replace=False))


def _evaluate(loss_fn: LossFn, params: Sequence[Parameter]) -> float:
    for p in params:
        p.zero_grad()
    return float(loss_fn(params))


def numeric_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, epsilon: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, out = x.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        original = flat[k]
        flat[k] = original + epsilon
        f_plus = fn(x)
        flat[k] = original - epsilon
        f_minus = fn(x)
        flat[k] = original
        out[k] = (f_plus - f_minus) / (2.0 * epsilon)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> Tuple[float, int]:
    """Largest elementwise relative error and its flat index."""
    errors = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    k = int(np.argmax(errors)) if errors.size else 0
    return (float(errors.reshape(-1)[k]) if errors.size else 0.0), k
