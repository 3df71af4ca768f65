"""From-scratch dense layers with hand-derived gradients.

Everything operates on float64 numpy arrays. Layers cache their forward
inputs so `backward` can accumulate exact analytic gradients into
per-parameter buffers; `sgd_step` validates, applies, and zeroes those
buffers. `gradient_check` compares the analytic gradients of any
loss-bearing module against central finite differences and reports the
worst relative error, which is the ground truth every trainable module
in this package is held to.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

# (name, parameter array, gradient array); both arrays are mutated in place.
Param = tuple[str, np.ndarray, np.ndarray]


class TrainingError(RuntimeError):
    """Raised when training produces a non-finite loss or gradient."""


def xavier_uniform(n_out: int, n_in: int, rng: np.random.Generator) -> np.ndarray:
    """Weight init uniform in +-sqrt(6 / (n_in + n_out))."""
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis (max-subtracted exponentials)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("softmax of an empty vector")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits) against a class index.

    Args:
        logits: 1-D unnormalized scores.
        target: index of the true class.

    Returns:
        (loss, grad) where loss = -log softmax(logits)[target], computed
        via the shifted log-sum-exp, and grad = softmax(logits) - onehot.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size == 0:
        raise ValueError(f"expected a non-empty 1-D logit vector, got shape {logits.shape}")
    if not 0 <= int(target) < logits.shape[0]:
        raise IndexError(f"target {target} out of range for {logits.shape[0]} classes")
    shifted = logits - logits.max()
    lse = float(np.log(np.exp(shifted).sum()))
    loss = lse - float(shifted[int(target)])
    grad = np.exp(shifted - lse)
    grad[int(target)] -= 1.0
    return loss, grad


def softmax_cross_entropy_batch(
    logits: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch; the grad already carries the 1/n.

    Args:
        logits: (n, k) unnormalized scores.
        targets: (n,) integer class indices.

    Returns:
        (mean loss, grad of the mean loss w.r.t. logits, shape (n, k)).
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError(f"expected a non-empty (n, k) logit matrix, got shape {logits.shape}")
    if targets.shape != (logits.shape[0],):
        raise ValueError(f"targets shape {targets.shape} does not match batch {logits.shape[0]}")
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise IndexError(f"target out of range for {logits.shape[1]} classes")
    n = logits.shape[0]
    rows = np.arange(n)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    losses = lse - shifted[rows, targets]
    grad = np.exp(shifted - lse[:, None])
    grad[rows, targets] -= 1.0
    grad /= n
    return float(losses.mean()), grad


class LinearLayer:
    """Affine map y = x W^T + b with gradient buffers.

    `weight` has shape (n_out, n_in). `forward` accepts a single vector
    or an (n, n_in) batch and caches the input; `backward` accumulates
    grad_weight / grad_bias and returns the gradient w.r.t. the input.
    Passing rng=None zero-initializes (used when loading checkpoints).
    """

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        if n_in < 1 or n_out < 1:
            raise ValueError(f"invalid layer dims {n_in} -> {n_out}")
        if rng is None:
            self.weight = np.zeros((n_out, n_in))
        else:
            self.weight = xavier_uniform(n_out, n_in, rng)
        self.bias = np.zeros(n_out)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._x: np.ndarray | None = None

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[-1] != self.n_in:
            raise ValueError(f"input shape {x.shape} does not match n_in={self.n_in}")
        x2 = np.atleast_2d(x)
        self._x = x2
        y = x2 @ self.weight.T + self.bias
        return y[0] if x.ndim == 1 else y

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Forward without caching; safe to call from worker threads."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"input shape {x.shape} does not match n_in={self.n_in}")
        return x @ self.weight.T + self.bias

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("backward called before forward")
        grad_out = np.asarray(grad_out, dtype=np.float64)
        g = np.atleast_2d(grad_out)
        if g.shape != (self._x.shape[0], self.n_out):
            raise ValueError(
                f"upstream gradient shape {grad_out.shape} does not match "
                f"output ({self._x.shape[0]}, {self.n_out})"
            )
        self.grad_weight += g.T @ self._x
        self.grad_bias += g.sum(axis=0)
        gx = g @ self.weight
        return gx[0] if grad_out.ndim == 1 else gx

    def zero_grad(self) -> None:
        self.grad_weight[...] = 0.0
        self.grad_bias[...] = 0.0

    def named_parameters(self, prefix: str = "") -> Iterator[Param]:
        yield f"{prefix}weight", self.weight, self.grad_weight
        yield f"{prefix}bias", self.bias, self.grad_bias


class MLP:
    """Fully connected stack with ReLU between layers.

    The final layer stays linear (so outputs can be embeddings or
    logits) unless `relu_output` is set; `hidden_relu=False` makes the
    whole stack affine, which exists only for ablations.
    """

    def __init__(
        self,
        dims: Sequence[int],
        rng: np.random.Generator | None = None,
        hidden_relu: bool = True,
        relu_output: bool = False,
    ):
        if len(dims) < 2:
            raise ValueError("an MLP needs at least an input and an output dim")
        self.layers = [LinearLayer(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]
        self.hidden_relu = hidden_relu
        self.relu_output = relu_output
        self._pre: list[np.ndarray] | None = None

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def _relu_at(self, i: int) -> bool:
        last = i == len(self.layers) - 1
        return (self.relu_output if last else self.hidden_relu)

    def forward(self, x: np.ndarray) -> np.ndarray:
        pre: list[np.ndarray] = []
        h = x
        for i, layer in enumerate(self.layers):
            z = layer.forward(h)
            pre.append(z)
            h = relu(z) if self._relu_at(i) else z
        self._pre = pre
        return h

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Forward without caching; safe to call from worker threads."""
        h = x
        for i, layer in enumerate(self.layers):
            z = layer.apply(h)
            h = relu(z) if self._relu_at(i) else z
        return h

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._pre is None:
            raise RuntimeError("backward called before forward")
        g = np.asarray(grad_out, dtype=np.float64)
        for i in reversed(range(len(self.layers))):
            if self._relu_at(i):
                g = g * (self._pre[i] > 0)
            g = self.layers[i].backward(g)
        return g

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def named_parameters(self, prefix: str = "") -> Iterator[Param]:
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}{i}/")

    def activation_pattern(self) -> list[np.ndarray]:
        """Sign pattern of every ReLU input from the last forward pass."""
        if self._pre is None:
            raise RuntimeError("no forward pass cached")
        return [(self._pre[i] > 0) for i in range(len(self.layers)) if self._relu_at(i)]


def sgd_step(params: Iterable[Param], lr: float) -> None:
    """One vanilla SGD update: p <- p - lr * g, then zero the gradients.

    All gradients are validated for finiteness before any parameter is
    touched, so a bad batch never leaves the model half-updated.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    pairs = list(params)
    for name, _, grad in pairs:
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient in parameter '{name}'")
    for _, param, grad in pairs:
        param -= lr * grad
        grad[...] = 0.0


@dataclass
class GradReport:
    """Worst-case result of a finite-difference gradient comparison."""

    max_rel_error: float
    param_name: str
    analytic: float
    numeric: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def gradient_check(
    model,
    seed: int,
    step: float = 1e-5,
    n_checks: int = 120,
) -> GradReport:
    """Compare analytic gradients against central finite differences.

    `model` must provide `loss_and_grad()` (recomputes a deterministic
    loss and fills the gradient buffers) and `named_parameters()`. A
    random subset of at least `n_checks` parameter entries is perturbed
    by +-step; the relative error is |a - n| / max(|a|, |n|, 1e-8).
    """
    params = [(name, p, g) for name, p, g in model.named_parameters()]
    if not params:
        raise ValueError("model has no parameters")
    model.loss_and_grad()
    analytic = [g.copy() for _, _, g in params]

    sizes = np.array([p.size for _, p, _ in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    chosen = rng.choice(total, size=min(n_checks, total), replace=False)

    worst = GradReport(0.0, params[0][0], 0.0, 0.0, n_checked=len(chosen))
    for flat in np.sort(chosen):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        off = int(flat - offsets[k])
        name, p, _ = params[k]
        original = p.flat[off]
        p.flat[off] = original + step
        loss_plus = model.loss_and_grad()
        p.flat[off] = original - step
        loss_minus = model.loss_and_grad()
        p.flat[off] = original
        numeric = (loss_plus - loss_minus) / (2.0 * step)
        a = float(analytic[k].flat[off])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if rel > worst.max_rel_error:
            worst = GradReport(rel, name, a, float(numeric), n_checked=len(chosen))
    # Leave the model with gradients consistent with its parameters.
    model.loss_and_grad()
    return worst
