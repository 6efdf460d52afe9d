"""Invertible maps with exact inverses and log-abs-det Jacobians.

Convention: ``forward`` maps data ``x`` to latent ``z`` and returns the
per-row ``log|det dz/dx|``.  ``backward`` takes the gradient of a scalar loss
with respect to ``(z, logdet)``, accumulates parameter gradients and returns
the gradient with respect to ``x``.
"""

from __future__ import annotations

import numpy as np

from .numeric import NonFiniteError, ParameterStore, Parametric, make_rng


def _check_input(x, dim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"expected an (n, {dim}) matrix, got shape {x.shape}")
    return x


class Flow(Parametric):
    """Invertible map of R^dim.  Subclasses implement the cached passes."""

    dim: int

    def forward(self, x):
        z, logdet, _ = self.forward_cached(x)
        return z, logdet

    def forward_cached(self, x):
        raise NotImplementedError

    def inverse(self, z):
        raise NotImplementedError

    def backward(self, cache, grad_z, grad_logdet, accumulate=True):
        raise NotImplementedError

    def spec(self) -> dict:
        raise NotImplementedError

    def attach_store(self) -> ParameterStore:
        """Give this flow its own store (used when it is trained standalone)."""
        self.store = ParameterStore.attach([("", self)])
        return self.store


class IdentityFlow(Flow):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward_cached(self, x):
        x = _check_input(x, self.dim)
        return x.copy(), np.zeros(x.shape[0]), ()

    def inverse(self, z):
        return _check_input(z, self.dim).copy()

    def backward(self, cache, grad_z, grad_logdet, accumulate=True):
        if cache is None:
            raise RuntimeError("backward called without a forward cache")
        return np.array(grad_z, dtype=np.float64)

    def spec(self):
        return {"type": "identity", "dim": self.dim}


class AffineFlow(Flow):
    """Elementwise ``z = a * x + b`` with ``a`` stored directly (must stay nonzero)."""

    def __init__(self, dim: int, scale=None, shift=None):
        super().__init__()
        self.dim = dim
        self.add_param("scale", np.ones(dim) if scale is None else np.broadcast_to(scale, (dim,)))
        self.add_param("shift", np.zeros(dim) if shift is None else np.broadcast_to(shift, (dim,)))

    def forward_cached(self, x):
        x = _check_input(x, self.dim)
        a, b = self.params["scale"], self.params["shift"]
        z = x * a + b
        logdet = np.full(x.shape[0], np.sum(np.log(np.abs(a))))
        if not np.all(np.isfinite(z)) or not np.all(np.isfinite(logdet)):
            raise NonFiniteError("affine flow produced non-finite output")
        return z, logdet, (x,)

    def inverse(self, z):
        z = _check_input(z, self.dim)
        return (z - self.params["shift"]) / self.params["scale"]

    def backward(self, cache, grad_z, grad_logdet, accumulate=True):
        if cache is None:
            raise RuntimeError("backward called without a forward cache")
        (x,) = cache
        a = self.params["scale"]
        if accumulate:
            self.grads["scale"] += np.sum(grad_z * x, axis=0) + np.sum(grad_logdet) / a
            self.grads["shift"] += np.sum(grad_z, axis=0)
        return grad_z * a

    def spec(self):
        return {"type": "affine", "dim": self.dim}


class ElementwiseAffine(Flow):
    """Learned per-coordinate log-scale and shift, identity at initialization.

    Plays the role of the batch-normalization layer that follows every
    coupling layer in MAF-style RealNVP stacks, without batch statistics.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.add_param("log_scale", np.zeros(dim))
        self.add_param("shift", np.zeros(dim))

    def forward_cached(self, x):
        x = _check_input(x, self.dim)
        ls = self.params["log_scale"]
        scale = np.exp(ls)
        z = x * scale + self.params["shift"]
        return z, np.full(x.shape[0], ls.sum()), (x, scale)

    def inverse(self, z):
        z = _check_input(z, self.dim)
        return (z - self.params["shift"]) * np.exp(-self.params["log_scale"])

    def backward(self, cache, grad_z, grad_logdet, accumulate=True):
        if cache is None:
            raise RuntimeError("backward called without a forward cache")
        x, scale = cache
        if accumulate:
            self.grads["log_scale"] += np.sum(grad_z * x, axis=0) * scale + np.sum(grad_logdet)
            self.grads["shift"] += np.sum(grad_z, axis=0)
        return grad_z * scale

    def spec(self):
        return {"type": "elementwise_affine", "dim": self.dim}


class Permutation(Flow):
    """Fixed coordinate permutation (volume preserving, no parameters)."""

    def __init__(self, perm):
        super().__init__()
        self.perm = np.asarray(perm, dtype=np.int64)
        self.dim = self.perm.size
        self.inv_perm = np.argsort(self.perm)

    def forward_cached(self, x):
        x = _check_input(x, self.dim)
        return x[:, self.perm], np.zeros(x.shape[0]), ()

    def inverse(self, z):
        return _check_input(z, self.dim)[:, self.inv_perm]

    def backward(self, cache, grad_z, grad_logdet, accumulate=True):
        if cache is None:
            raise RuntimeError("backward called without a forward cache")
        return grad_z[:, self.inv_perm]

    def spec(self):
        return {"type": "permutation", "perm": self.perm.tolist()}


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda pre, post: 1.0 - post * post),
    "relu": (lambda a: np.maximum(a, 0.0), lambda pre, post: (pre > 0.0).astype(np.float64)),
}


class MLP(Parametric):
    """Fully connected net ``in -> hidden x (n_hidden + 1) -> out``.

    Hidden layers use ``activation``; the output layer is linear and
    zero-initialized so the net starts out returning exactly zero.
    """

    def __init__(self, n_in, hidden_dim, n_hidden, n_out, activation, rng):
        super().__init__()
        self.activation = activation
        self.act, self.dact = _ACTIVATIONS[activation]
        sizes = [n_in] + [hidden_dim] * (n_hidden + 1) + [n_out]
        self.n_layers = len(sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if i == self.n_layers - 1:
                w = np.zeros((fan_in, fan_out))
                b = np.zeros(fan_out)
            else:
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                b = rng.uniform(-bound, bound, size=fan_out)
            self.add_param(f"W{i}", w)
            self.add_param(f"b{i}", b)

    def forward(self, h):
        cache = [h]
        for i in range(self.n_layers):
            pre = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i < self.n_layers - 1:
                h = self.act(pre)
                cache.append((pre, h))
            else:
                h = pre
        return h, cache

    def backward(self, cache, grad_out, accumulate=True):
        g = grad_out
        for i in reversed(range(self.n_layers)):
            h_in = cache[0] if i == 0 else cache[i][1]
            if accumulate:
                self.grads[f"W{i}"] += h_in.T @ g
                self.grads[f"b{i}"] += g.sum(axis=0)
            g = g @ self.params[f"W{i}"].T
            if i > 0:
                pre, post = cache[i]
                g = g * self.dact(pre, post)
        return g


class AffineCouplingLayer(Flow):
    """RealNVP affine coupling: masked coordinates pass through, the rest are
    scaled and shifted by nets of the masked input.

    The scale net (tanh) output is squashed to ``(-clamp, clamp)`` by
    ``clamp * tanh(s / clamp)`` before exponentiation; the shift net uses ReLU.
    Both nets read the full masked vector, as in MAF's RealNVP.
    """

    def __init__(self, dim, mask, hidden_dim, n_hidden, rng, scale_clamp=5.0):
        super().__init__()
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (dim,) or mask.all() or not mask.any():
            raise ValueError("mask needs at least one pass-through and one transformed coordinate")
        self.dim = dim
        self.mask = mask
        self.hidden_dim = hidden_dim
        self.n_hidden = n_hidden
        self.scale_clamp = float(scale_clamp)
        self._maskf = mask.astype(np.float64)
        self.scale_net = MLP(dim, hidden_dim, n_hidden, dim, "tanh", rng)
        self.shift_net = MLP(dim, hidden_dim, n_hidden, dim, "relu", rng)
        self.add_child("s", self.scale_net)
        self.add_child("t", self.shift_net)

    def _scale_shift(self, xm):
        raw, s_cache = self.scale_net.forward(xm)
        squashed = np.tanh(raw / self.scale_clamp)
        s = self.scale_clamp * squashed
        t, t_cache = self.shift_net.forward(xm)
        return s, t, squashed, s_cache, t_cache

    def forward_cached(self, x):
        x = _check_input(x, self.dim)
        xm = x * self._maskf
        s, t, squashed, s_cache, t_cache = self._scale_shift(xm)
        es = np.exp(s)
        z = np.where(self.mask, x, x * es + t)
        logdet = np.sum(np.where(self.mask, 0.0, s), axis=1)
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(logdet))):
            raise NonFiniteError("coupling layer produced non-finite output")
        return z, logdet, (x, es, squashed, s_cache, t_cache)

    def inverse(self, z):
        z = _check_input(z, self.dim)
        zm = z * self._maskf
        s, t, *_ = self._scale_shift(zm)
        return np.where(self.mask, z, (z - t) * np.exp(-s))

    def backward(self, cache, grad_z, grad_logdet, accumulate=True):
        if cache is None:
            raise RuntimeError("backward called without a forward cache")
        x, es, squashed, s_cache, t_cache = cache
        free = 1.0 - self._maskf
        grad_s = free * (grad_z * x * es + grad_logdet[:, None])
        grad_t = free * grad_z
        grad_raw = grad_s * (1.0 - squashed * squashed)
        gxm = self.scale_net.backward(s_cache, grad_raw, accumulate)
        gxm = gxm + self.shift_net.backward(t_cache, grad_t, accumulate)
        return np.where(self.mask, grad_z + gxm, grad_z * es)

    def spec(self):
        return {
            "type": "coupling",
            "dim": self.dim,
            "mask": self.mask.astype(int).tolist(),
            "hidden_dim": self.hidden_dim,
            "n_hidden": self.n_hidden,
            "scale_clamp": self.scale_clamp,
        }


class FlowSequence(Flow):
    """Composition of flows; forward in order, inverse in reverse order."""

    def __init__(self, layers, meta=None):
        super().__init__()
        if not layers:
            raise ValueError("FlowSequence needs at least one layer")
        self.layers = list(layers)
        self.dim = self.layers[0].dim
        if any(layer.dim != self.dim for layer in self.layers):
            raise ValueError("all layers must share one dimension")
        self.meta = meta
        for i, layer in enumerate(self.layers):
            self.add_child(str(i), layer)

    def forward_cached(self, x):
        z = _check_input(x, self.dim)
        total = np.zeros(z.shape[0])
        caches = []
        for layer in self.layers:
            z, logdet, cache = layer.forward_cached(z)
            total = total + logdet
            caches.append(cache)
        return z, total, caches

    def inverse(self, z):
        x = _check_input(z, self.dim)
        for layer in reversed(self.layers):
            x = layer.inverse(x)
        return x

    def backward(self, cache, grad_z, grad_logdet, accumulate=True):
        if cache is None:
            raise RuntimeError("backward called without a forward cache")
        g = grad_z
        for layer, c in zip(reversed(self.layers), reversed(cache)):
            g = layer.backward(c, g, grad_logdet, accumulate)
        return g

    def spec(self):
        if self.meta is not None:
            return dict(self.meta)
        return {"type": "sequence", "layers": [layer.spec() for layer in self.layers]}


def alternating_mask(dim: int, layer_index: int) -> np.ndarray:
    """Layer 0 keeps odd indices and transforms even ones; parity flips per layer."""
    parity = np.arange(dim) % 2
    return parity == (1 - layer_index % 2)


def make_realnvp(dim, n_layers, hidden_dim, n_hidden, rng, scale_clamp=5.0, norm=True):
    """RealNVP stack of alternating-mask coupling layers.

    With ``norm=True`` each coupling layer is followed by an
    :class:`ElementwiseAffine` layer (2 * dim parameters).  ``rng`` may be a
    numpy Generator or an integer seed.
    """
    if dim < 2:
        raise ValueError("coupling layers need dim >= 2")
    if min(n_layers, hidden_dim) <= 0 or n_hidden < 0:
        raise ValueError("n_layers and hidden_dim must be positive, n_hidden non-negative")
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(int(rng))
    layers = []
    for i in range(n_layers):
        layers.append(AffineCouplingLayer(dim, alternating_mask(dim, i), hidden_dim, n_hidden, rng, scale_clamp))
        if norm:
            layers.append(ElementwiseAffine(dim))
    meta = {
        "type": "realnvp",
        "dim": dim,
        "n_layers": n_layers,
        "hidden_dim": hidden_dim,
        "n_hidden": n_hidden,
        "scale_clamp": scale_clamp,
        "norm": norm,
    }
    return FlowSequence(layers, meta=meta)


def realnvp_param_count(dim, n_layers, hidden_dim, n_hidden, norm=True) -> int:
    """Closed-form parameter count of :func:`make_realnvp`."""
    per_net = (dim * hidden_dim + hidden_dim) + n_hidden * (hidden_dim * hidden_dim + hidden_dim) + (hidden_dim * dim + dim)
    per_layer = 2 * per_net + (2 * dim if norm else 0)
    return n_layers * per_layer
