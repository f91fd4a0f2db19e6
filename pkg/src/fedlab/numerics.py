"""Dense float64 arithmetic, loss terms with analytic gradients, SGD and a
finite-difference gradient oracle.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Parameter sets
are :class:`ParamVector` instances: an ordered list of named arrays that can be
flattened into a single vector for aggregation and similarity.
"""

from __future__ import annotations

from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    DegenerateVectorError,
    DimensionError,
    InvariantError,
    LabelError,
    LayoutError,
    ParameterError,
)

DEGENERATE_NORM = 1e-12


def as_tensor(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64)


class ParamVector:
    """Ordered named segments of float64 arrays.

    Segment order is part of the layout: two vectors are compatible only if
    names and shapes agree position by position.
    """

    __slots__ = ("_names", "_arrays")

    def __init__(self, segments: Iterable[tuple[str, np.ndarray]]):
        names, arrays = [], []
        for name, arr in segments:
            names.append(str(name))
            arrays.append(np.array(arr, dtype=np.float64))
        if len(set(names)) != len(names):
            raise LayoutError(f"duplicate segment names in {names}")
        self._names = tuple(names)
        self._arrays = tuple(arrays)

    # -- layout -----------------------------------------------------------
    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return tuple((n, a.shape) for n, a in zip(self._names, self._arrays))

    @property
    def flat_len(self) -> int:
        return int(sum(a.size for a in self._arrays))

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(zip(self._names, self._arrays))

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._arrays[self._names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def arrays(self) -> tuple[np.ndarray, ...]:
        return self._arrays

    def check_layout(self, other: "ParamVector") -> None:
        if self.layout != other.layout:
            raise LayoutError(f"layout mismatch: {self.layout} vs {other.layout}")

    # -- conversion -------------------------------------------------------
    def flatten(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self._arrays])

    def unflatten(self, flat: np.ndarray) -> "ParamVector":
        """New vector with this layout and values taken from ``flat``."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.ndim != 1 or flat.size != self.flat_len:
            raise LayoutError(f"flat vector of size {flat.size} does not fit layout of {self.flat_len}")
        out, pos = [], 0
        for name, arr in self:
            out.append((name, flat[pos : pos + arr.size].reshape(arr.shape)))
            pos += arr.size
        return ParamVector(out)

    def zeros_like(self) -> "ParamVector":
        return ParamVector((n, np.zeros_like(a)) for n, a in self)

    def copy(self) -> "ParamVector":
        return ParamVector((n, a.copy()) for n, a in self)

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamVector":
        return ParamVector((n, fn(a)) for n, a in self)

    def combine(self, other: "ParamVector", fn) -> "ParamVector":
        self.check_layout(other)
        return ParamVector((n, fn(a, b)) for (n, a), b in zip(self, other._arrays))

    def bitwise_equal(self, other: "ParamVector") -> bool:
        if self.layout != other.layout:
            return False
        return all(
            a.tobytes() == b.tobytes() for a, b in zip(self._arrays, other._arrays)
        )

    def __repr__(self) -> str:
        return f"ParamVector({', '.join(f'{n}{s}' for n, s in self.layout)})"


# Gradients share the ParamVector layout of the parameters they belong to.
Gradients = ParamVector


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def affine_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    x = as_tensor(x)
    weight = as_tensor(weight)
    bias = as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise DimensionError(
            f"affine expects input[B,n], weight[n,m], bias[m]; got {x.shape}, {weight.shape}, {bias.shape}"
        )
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise DimensionError(
            f"affine shape mismatch: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    return x @ weight + bias


def affine_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    """Returns ``(grad_input, grad_weight, grad_bias)``."""
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    if not slope > 0:
        raise ParameterError(f"leaky_relu slope must be > 0, got {slope}")
    x = as_tensor(x)
    return np.where(x < 0, slope * x, x)


def leaky_relu_grad(x: np.ndarray, slope: float) -> np.ndarray:
    """Elementwise derivative; the value at exactly 0 is 1."""
    x = as_tensor(x)
    return np.where(x < 0, slope, 1.0)


# ---------------------------------------------------------------------------
# probabilities and losses
# ---------------------------------------------------------------------------

def log_softmax_temp(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    if not tau > 0:
        raise ParameterError(f"temperature must be > 0, got {tau}")
    z = as_tensor(logits) / tau
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_temp(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    if not tau > 0:
        raise ParameterError(f"temperature must be > 0, got {tau}")
    z = as_tensor(logits) / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, batch: int, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != batch:
        raise DimensionError(f"{labels.shape[0]} labels for a batch of {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelError(f"labels must lie in [0, {classes}); got range [{labels.min()}, {labels.max()}]")
    return labels


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Batch-mean cross entropy and its gradient w.r.t. ``logits``."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [B,C], got {logits.shape}")
    b, c = logits.shape
    labels = _check_labels(labels, b, c)
    if b == 0:
        return 0.0, np.zeros_like(logits)
    logp = log_softmax_temp(logits)
    rows = np.arange(b)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad / b


def kd_loss(teacher_logits: np.ndarray, student_logits: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """Batch-mean KL(p_teacher || p_student) at temperature ``tau``.

    The gradient is taken w.r.t. the student logits only.
    """
    t = as_tensor(teacher_logits)
    s = as_tensor(student_logits)
    if t.shape != s.shape or s.ndim != 2:
        raise DimensionError(f"kd_loss needs equal [B,C] shapes, got {t.shape} and {s.shape}")
    b = s.shape[0]
    if b == 0:
        return 0.0, np.zeros_like(s)
    log_pt = log_softmax_temp(t, tau)
    log_ps = log_softmax_temp(s, tau)
    pt = np.exp(log_pt)
    loss = float((pt * (log_pt - log_ps)).sum(axis=1).mean())
    grad = (np.exp(log_ps) - pt) / (tau * b)
    # KL is nonnegative; clip the rounding residue at identical inputs.
    return max(loss, 0.0), grad


def center_loss(features: np.ndarray, labels, anchors: Mapping[int, np.ndarray]) -> tuple[float, np.ndarray]:
    """Batch-mean squared distance from each feature row to its class anchor."""
    f = as_tensor(features)
    if f.ndim != 2:
        raise DimensionError(f"features must be [B,K], got {f.shape}")
    b = f.shape[0]
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != b:
        raise DimensionError(f"{labels.shape[0]} labels for a batch of {b}")
    if b == 0:
        return 0.0, np.zeros_like(f)
    try:
        targets = np.stack([np.asarray(anchors[int(y)], dtype=np.float64) for y in labels])
    except KeyError as exc:
        raise InvariantError(f"no anchor for class {exc.args[0]}") from None
    if targets.shape != f.shape:
        raise DimensionError(f"anchor width {targets.shape[1]} != feature width {f.shape[1]}")
    diff = f - targets
    loss = float((diff * diff).sum(axis=1).mean())
    return loss, 2.0 * diff / b


# ---------------------------------------------------------------------------
# parameter-space operations
# ---------------------------------------------------------------------------

def sgd_step(params: ParamVector, grads: Gradients, eta: float) -> ParamVector:
    if not eta >= 0:
        raise ParameterError(f"learning rate must be >= 0, got {eta}")
    return params.combine(grads, lambda p, g: p - eta * g)


def cosine_similarity(a: ParamVector | np.ndarray, b: ParamVector | np.ndarray) -> float:
    if isinstance(a, ParamVector) and isinstance(b, ParamVector):
        a.check_layout(b)
    va = a.flatten() if isinstance(a, ParamVector) else as_tensor(a).ravel()
    vb = b.flatten() if isinstance(b, ParamVector) else as_tensor(b).ravel()
    if va.shape != vb.shape:
        raise LayoutError(f"cosine of vectors of size {va.size} and {vb.size}")
    na = float(np.sqrt(va @ va))
    nb = float(np.sqrt(vb @ vb))
    if na < DEGENERATE_NORM or nb < DEGENERATE_NORM:
        raise DegenerateVectorError(f"cosine similarity undefined for norms {na:.3g}, {nb:.3g}")
    return float(np.clip((va @ vb) / (na * nb), -1.0, 1.0))


def finite_diff_grad(loss_fn: Callable[[ParamVector], float], params: ParamVector, eps: float = 1e-5) -> Gradients:
    """Central-difference gradient of a scalar function of ``params``."""
    if not 1e-7 <= eps <= 1e-3:
        raise ParameterError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    base = params.flatten()
    grad = np.empty_like(base)
    for i in range(base.size):
        orig = base[i]
        base[i] = orig + eps
        up = loss_fn(params.unflatten(base))
        base[i] = orig - eps
        down = loss_fn(params.unflatten(base))
        base[i] = orig
        grad[i] = (up - down) / (2.0 * eps)
    return params.unflatten(grad)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a-b| / max(|a|, |b|)`` (0 when both vanish)."""
    a = as_tensor(a).ravel()
    b = as_tensor(b).ravel()
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b)) / scale


def weighted_sum(vectors: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    """``sum_i w_i v_i`` for weights summing to 1, accumulated in the given order.

    Computed as ``v_0 + sum_i w_i (v_i - v_0)`` so identical inputs come back
    bit-exact and a single input is returned unchanged.
    """
    if not vectors:
        raise LayoutError("weighted_sum of no vectors")
    if len(vectors) != len(weights):
        raise LayoutError(f"{len(vectors)} vectors but {len(weights)} weights")
    first = vectors[0]
    acc = [np.zeros_like(a) for a in first.arrays()]
    for vec, w in zip(vectors[1:], weights[1:]):
        first.check_layout(vec)
        for slot, arr, ref in zip(acc, vec.arrays(), first.arrays()):
            slot += w * (arr - ref)
    return ParamVector((n, ref + slot) for n, ref, slot in zip(first.names, first.arrays(), acc))
