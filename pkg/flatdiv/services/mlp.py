"""
Two-layer rectifier network with manual backpropagation.

Parameters are (W1, b1, W2, b2) for input → hidden → classes; the flat parameter vector
concatenates them in that order, row-major.
"""

import logging
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from flatdiv.core.error_handler import NonFiniteError, ShapeMismatchError
from flatdiv.services.numkernel import DenseVector, RngStream

logger = logging.getLogger(__name__)

BLOCK_NAMES = ("W1", "b1", "W2", "b2")


class ForwardBackward(NamedTuple):
    loss: float
    grad: DenseVector
    per_sample_grads: Optional[np.ndarray] = None


@dataclass(frozen=True)
class MlpModel:
    """Immutable parameter set of a d_in → hidden → classes network."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        d_in, hidden = self.W1.shape
        if self.b1.shape != (hidden,) or self.W2.shape[0] != hidden or self.b2.shape != (self.W2.shape[1],):
            raise ShapeMismatchError(
                f"inconsistent layer shapes W1 {self.W1.shape}, b1 {self.b1.shape}, "
                f"W2 {self.W2.shape}, b2 {self.b2.shape}"
            )

    @classmethod
    def initialize(cls, rng: RngStream, d_in: int, hidden: int, n_classes: int) -> 'MlpModel':
        """He-normal weights, zero biases."""
        gen = rng.generator()
        return cls(
            W1=gen.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, hidden)),
            b1=np.zeros(hidden),
            W2=gen.normal(0.0, np.sqrt(2.0 / hidden), size=(hidden, n_classes)),
            b2=np.zeros(n_classes),
        )

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.W1.shape[0], self.W1.shape[1], self.W2.shape[1]

    @property
    def n_params(self) -> int:
        d_in, hidden, c = self.dims
        return d_in * hidden + hidden + hidden * c + c

    def flat_params(self) -> DenseVector:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    def with_flat_params(self, theta: DenseVector) -> 'MlpModel':
        d_in, hidden, c = self.dims
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ShapeMismatchError(f"expected {self.n_params} parameters, got shape {theta.shape}")
        sizes = np.cumsum([d_in * hidden, hidden, hidden * c])
        w1, b1, w2, b2 = np.split(theta, sizes)
        return MlpModel(W1=w1.reshape(d_in, hidden).copy(), b1=b1.copy(),
                        W2=w2.reshape(hidden, c).copy(), b2=b2.copy())

    def logits(self, x: np.ndarray) -> np.ndarray:
        hidden = np.maximum(x @ self.W1 + self.b1, 0.0)
        return hidden @ self.W2 + self.b2

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.logits(x), axis=1)

    def sample_gradient(self, x: np.ndarray, y: int) -> DenseVector:
        """Loss gradient for a single example."""
        return mlp_forward_backward(self, x[None, :], np.array([y])).grad

    def sample_gradient_blocks(self, x: np.ndarray, y: int) -> Dict[str, DenseVector]:
        grad = self.sample_gradient(x, y)
        d_in, hidden, c = self.dims
        sizes = np.cumsum([d_in * hidden, hidden, hidden * c])
        return dict(zip(BLOCK_NAMES, np.split(grad, sizes)))


def _forward(model: MlpModel, x: np.ndarray, y: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] != model.dims[0]:
        raise ShapeMismatchError(f"batch inputs of shape {x.shape} do not match d_in={model.dims[0]}")
    if y.shape != (x.shape[0],):
        raise ShapeMismatchError(f"labels of shape {y.shape} do not match {x.shape[0]} inputs")

    pre = x @ model.W1 + model.b1
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ model.W2 + model.b2
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("non-finite activations in forward pass")
    log_probs = log_softmax(logits, axis=1)
    rows = np.arange(x.shape[0])
    losses = -log_probs[rows, y]

    # dL_i/dlogits = p - onehot
    delta_out = np.exp(log_probs)
    delta_out[rows, y] -= 1.0
    delta_hidden = (delta_out @ model.W2.T) * (pre > 0)
    return x, hidden, losses, delta_out, delta_hidden


def mlp_forward_backward(model: MlpModel, x: np.ndarray, y: np.ndarray, per_sample: bool = False) -> ForwardBackward:
    """
    Mean cross-entropy loss and its exact gradient.

    Args:
        model: Network
        x: Inputs (n, d_in)
        y: Integer labels (n,)
        per_sample: Also return one flat gradient per example, shape (n, n_params)

    Returns:
        ForwardBackward(loss, grad, per_sample_grads)
    """
    x, hidden, losses, delta_out, delta_hidden = _forward(model, x, y)
    n = x.shape[0]

    grad = np.concatenate([
        (x.T @ delta_hidden).ravel() / n,
        delta_hidden.sum(axis=0) / n,
        (hidden.T @ delta_out).ravel() / n,
        delta_out.sum(axis=0) / n,
    ])

    per_sample_grads = None
    if per_sample:
        per_sample_grads = np.concatenate([
            np.einsum('ni,nj->nij', x, delta_hidden).reshape(n, -1),
            delta_hidden,
            np.einsum('ni,nj->nij', hidden, delta_out).reshape(n, -1),
            delta_out,
        ], axis=1)

    loss = float(losses.mean())
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite loss or gradient in backward pass")
    return ForwardBackward(loss=loss, grad=grad, per_sample_grads=per_sample_grads)


def per_sample_fisher_traces(model: MlpModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """
    Squared norm of every per-example gradient without materializing the gradients.

    Each weight block gradient is an outer product, so ‖a bᵀ‖² = ‖a‖²‖b‖².
    """
    x, hidden, _, delta_out, delta_hidden = _forward(model, x, y)
    hidden_sq = np.sum(delta_hidden ** 2, axis=1)
    out_sq = np.sum(delta_out ** 2, axis=1)
    return (
        np.sum(x ** 2, axis=1) * hidden_sq
        + hidden_sq
        + np.sum(hidden ** 2, axis=1) * out_sq
        + out_sq
    )


def mean_loss(model: MlpModel, x: np.ndarray, y: np.ndarray) -> float:
    """Mean cross-entropy without the backward pass."""
    logits = model.logits(np.asarray(x, dtype=np.float64))
    log_probs = log_softmax(logits, axis=1)
    return float(-log_probs[np.arange(len(y)), np.asarray(y)].mean())
