"""Dense numeric primitives: RNG, products, losses, RMSProp and gradient checks.

Dense matrices are plain 2-D ``float64`` numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError

DTYPE = np.float64


class Rng:
    """Counter-based random stream (Philox) with Box-Muller normals.

    Streams are addressed by ``(seed, *stream)`` so independent consumers
    (initialisation, batch ``k``, validation data) never share draws.
    """

    def __init__(self, seed: int, *stream: int):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        seq = np.random.SeedSequence([self.seed, *self.stream])
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *stream: int) -> "Rng":
        return Rng(self.seed, *self.stream, *stream)

    def uniform(self, size) -> np.ndarray:
        """Uniform draws on [0, 1)."""
        return self._gen.random(size, dtype=DTYPE)

    def normal(self, shape) -> np.ndarray:
        shape = (int(shape),) if np.isscalar(shape) else tuple(int(s) for s in shape)
        count = int(np.prod(shape, dtype=np.int64))
        pairs = (count + 1) // 2
        u = self.uniform((2, pairs))
        # 1 - u lies in (0, 1] so the log is finite
        radius = np.sqrt(-2.0 * np.log1p(-u[0]))
        angle = 2.0 * np.pi * u[1]
        z = np.empty(2 * pairs, dtype=DTYPE)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return z[:count].reshape(shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size, dtype=np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed left-to-right accumulation order.

    Each output entry is ``((0 + a[i,0]b[0,j]) + a[i,1]b[1,j]) + ...``,
    which is exactly what a naive triple loop computes.
    """
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=DTYPE)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def standard_normal_init(shape: Sequence[int], rng: Rng) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"shape must be positive, got {shape}")
    return rng.normal(shape)


INIT_SCHEMES = ("standard_normal", "scaled_normal")


def init_weights(shape: Sequence[int], rng: Rng, scheme: str = "standard_normal") -> np.ndarray:
    """Draw a weight matrix.

    ``standard_normal`` is N(0, 1) per entry. ``scaled_normal`` divides the
    same draws by ``sqrt(rows)`` (the fan-in), so both schemes consume the
    random stream identically.
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}; choose from {INIT_SCHEMES}")
    w = standard_normal_init(shape, rng)
    if scheme == "scaled_normal":
        w /= np.sqrt(w.shape[0])
    return w


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over rows and its gradient with respect to ``logits``.

    Parameters
    ----------
    logits : ndarray of shape (N, C)
    labels : int array of shape (N,), entries in ``[0, C)``

    Returns
    -------
    loss : float
        Mean negative log-probability of the true class.
    dlogits : ndarray of shape (N, C)
        ``(softmax - onehot) / N``.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if n == 0:
        return 0.0, np.zeros_like(logits)
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_prob = shifted - log_norm
    rows = np.arange(n)
    loss = float(-log_prob[rows, labels].mean())
    grad = np.exp(log_prob)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


@dataclass(eq=False)
class Parameter:
    """A trainable matrix with its gradient buffer and RMSProp accumulator."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    rms: np.ndarray = field(default=None)
    version: int = 0

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        if self.value.ndim != 2:
            raise DimensionError(f"{self.name}: parameters are 2-D, got {self.value.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.rms is None:
            self.rms = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape or self.rms.shape != self.value.shape:
            raise DimensionError(f"{self.name}: buffer shapes differ from value shape")

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.grad.fill(0.0)


def rmsprop_step(
    p: Parameter, lr: float = 1e-3, decay: float = 0.9, epsilon: float = 1e-8
) -> Parameter:
    """In-place RMSProp update; the gradient buffer is zeroed afterwards."""
    if not lr > 0 or not 0 <= decay < 1 or not epsilon > 0:
        raise ValueError("need lr > 0, 0 <= decay < 1, epsilon > 0")
    if not np.all(np.isfinite(p.grad)):
        raise NumericError(f"non-finite gradient in parameter {p.name!r}")
    p.rms *= decay
    p.rms += (1.0 - decay) * p.grad * p.grad
    p.value -= lr * p.grad / np.sqrt(p.rms + epsilon)
    p.grad.fill(0.0)
    p.version += 1
    return p


def finite_diff_check(
    f: Callable[[], float], params: Iterable[Parameter], h: float = 1e-5
) -> float:
    """Worst relative error between ``p.grad`` and central differences of ``f``.

    ``f`` takes no arguments and reads the current parameter values; the
    analytic gradient must already be stored in each ``p.grad``. Values are
    restored exactly after each probe.
    """
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        analytic = p.grad.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = f()
            flat[k] = orig - h
            down = f()
            flat[k] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(analytic[k] - numeric) / max(1e-12, abs(analytic[k]) + abs(numeric))
            worst = max(worst, err)
    return worst
