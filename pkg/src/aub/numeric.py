"""Parameter storage, optimizers and numerically stable helpers.

Every learnable array in the package is a view into the flat ``values`` array
of a :class:`ParameterStore`, so optimizers, checkpoints and the
finite-difference oracle all work on one contiguous buffer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

RNG_ALGORITHM = "PCG64"


class NonFiniteError(FloatingPointError):
    """Raised when a loss, gradient or output stops being finite."""


def make_rng(seed: int) -> np.random.Generator:
    """Return the package's seeded generator (PCG64) for ``seed``."""
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def log_sum_exp(values, axis=None):
    """Stable ``log(sum(exp(values)))`` via max-shift.

    With ``axis=None`` the input is flattened and a float is returned.
    """
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        raise ValueError("empty log_sum_exp")
    if axis is None:
        if not np.all(np.isfinite(a)):
            raise ValueError("log_sum_exp requires finite values")
        m = a.max()
        return float(m + np.log(np.exp(a - m).sum()))
    m = a.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.exp(a - m).sum(axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def softmax(logits, axis=-1):
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


class Parametric:
    """Base for anything that owns learnable arrays.

    Subclasses fill ``self.params`` (name -> initial array) in ``__init__`` and
    list sub-modules in ``self.children``.  Binding to a store replaces every
    array by a view into the store's flat buffers.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: list[tuple[str, Parametric]] = []

    def add_param(self, name: str, value: np.ndarray) -> None:
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def add_child(self, name: str, child: "Parametric") -> None:
        self.children.append((name, child))

    def named_leaves(self, prefix: str = "") -> Iterator[tuple[str, "Parametric", str]]:
        for name in self.params:
            yield prefix + name, self, name
        for cname, child in self.children:
            yield from child.named_leaves(f"{prefix}{cname}.")

    @property
    def n_params(self) -> int:
        return sum(owner.params[leaf].size for _, owner, leaf in self.named_leaves())


class ParameterStore:
    """Flat float64 buffers for values and gradients, with named segments."""

    def __init__(self, size: int = 0):
        self.values = np.zeros(size, dtype=np.float64)
        self.grads = np.zeros(size, dtype=np.float64)
        self.segments: list[tuple[str, int, int]] = []

    def __len__(self) -> int:
        return self.values.size

    @classmethod
    def attach(cls, modules: list[tuple[str, Parametric]]) -> "ParameterStore":
        """Build a store holding every leaf of ``modules`` and rebind them.

        Current parameter values are copied in, so modules may be moved from
        one store to another without losing state.
        """
        leaves = []
        for prefix, module in modules:
            pre = f"{prefix}." if prefix else ""
            leaves.extend(module.named_leaves(pre))
        total = sum(owner.params[leaf].size for _, owner, leaf in leaves)
        store = cls(total)
        offset = 0
        for full, owner, leaf in leaves:
            arr = owner.params[leaf]
            n = arr.size
            store.values[offset:offset + n] = arr.ravel()
            owner.params[leaf] = store.values[offset:offset + n].reshape(arr.shape)
            owner.grads[leaf] = store.grads[offset:offset + n].reshape(arr.shape)
            store.segments.append((full, offset, n))
            offset += n
        return store

    def segment_range(self, prefix: str) -> tuple[int, int]:
        """Half-open index range covered by segments whose name starts with ``prefix``."""
        hits = [(o, o + n) for name, o, n in self.segments if name.startswith(prefix)]
        if not hits:
            return (0, 0)
        return (min(h[0] for h in hits), max(h[1] for h in hits))

    def name_of(self, index: int) -> str:
        for name, o, n in self.segments:
            if o <= index < o + n:
                return f"{name}[{index - o}]"
        raise IndexError(index)

    def zero_grads(self, start: int = 0, stop: int | None = None) -> None:
        self.grads[start:stop] = 0.0

    def clone_values(self) -> np.ndarray:
        return self.values.copy()

    def load_values(self, values: np.ndarray) -> None:
        if values.shape != self.values.shape:
            raise ValueError(f"expected {self.values.shape[0]} values, got {values.shape}")
        self.values[:] = values


def finite_difference_gradient(
    loss_fn: Callable[[ParameterStore], float],
    params: ParameterStore,
    eps: float = 1e-5,
    indices=None,
) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` with respect to ``params.values``.

    ``loss_fn`` must be deterministic for fixed values. Every probed
    coordinate is restored bit-exactly.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    idx = np.arange(len(params)) if indices is None else np.asarray(indices)
    out = np.empty(idx.size, dtype=np.float64)
    for k, i in enumerate(idx):
        orig = params.values[i]
        params.values[i] = orig + eps
        f_plus = loss_fn(params)
        params.values[i] = orig - eps
        f_minus = loss_fn(params)
        params.values[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError(f"non-finite loss while probing coordinate {i} ({params.name_of(i)})")
        out[k] = (f_plus - f_minus) / (2.0 * eps)
    return out


def max_relative_error(analytic, numeric, abs_floor: float = 1e-3, abs_tol: float = 1e-6) -> float:
    """Largest relative disagreement, using an absolute test below ``abs_floor``.

    Coordinates where the analytic value is smaller than ``abs_floor`` count
    as agreeing when their absolute difference is within ``abs_tol``;
    otherwise they contribute the absolute difference scaled by ``abs_tol``
    so that any violation still exceeds a relative tolerance of 1e-4.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(a - n)
    small = np.abs(a) < abs_floor
    rel = np.where(small, 0.0, diff / np.maximum(np.abs(a), 1e-300))
    bad_small = small & (diff > abs_tol)
    if np.any(bad_small):
        return float(max(rel.max(initial=0.0), 1.0))
    return float(rel.max(initial=0.0))


@dataclass
class SGD:
    """Plain gradient descent on ``store.values[start:stop]``."""

    learning_rate: float
    start: int = 0
    stop: int | None = None
    step_count: int = 0
    kind: str = field(default="sgd", init=False)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    def step(self, store: ParameterStore) -> None:
        g = store.grads[self.start:self.stop]
        if not np.all(np.isfinite(g)):
            bad = self.start + int(np.flatnonzero(~np.isfinite(g))[0])
            raise NonFiniteError(f"non-finite gradient at {store.name_of(bad)}")
        store.values[self.start:self.stop] -= self.learning_rate * g
        g[:] = 0.0
        self.step_count += 1


@dataclass
class Adam:
    """Bias-corrected Adam on ``store.values[start:stop]``."""

    learning_rate: float = 1e-3
    start: int = 0
    stop: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    kind: str = field(default="adam", init=False)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    def step(self, store: ParameterStore) -> None:
        g = store.grads[self.start:self.stop]
        if not np.all(np.isfinite(g)):
            bad = self.start + int(np.flatnonzero(~np.isfinite(g))[0])
            raise NonFiniteError(f"non-finite gradient at {store.name_of(bad)}")
        if self.m is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.step_count += 1
        t = self.step_count
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * g * g
        m_hat = self.m / (1.0 - self.beta1 ** t)
        v_hat = self.v / (1.0 - self.beta2 ** t)
        store.values[self.start:self.stop] -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)
        g[:] = 0.0


def make_optimizer(kind: str, learning_rate: float, start: int = 0, stop: int | None = None):
    if kind == "adam":
        return Adam(learning_rate=learning_rate, start=start, stop=stop)
    if kind == "sgd":
        return SGD(learning_rate=learning_rate, start=start, stop=stop)
    raise ValueError(f"unknown optimizer {kind!r}")
