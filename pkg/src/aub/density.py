"""Density models for the shared latent space.

Each model exposes ``log_prob``, ``sample`` and an analytic ``backward``
that returns the gradient with respect to its input and (optionally)
accumulates parameter gradients.
"""

from __future__ import annotations

import math

import numpy as np

from .flows import Flow, make_realnvp
from .numeric import Parametric, log_sum_exp, softmax

LOG_2PI = math.log(2.0 * math.pi)
LOG_VAR_FLOOR = math.log(1e-6)


def _check_input(z, dim):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != dim:
        raise ValueError(f"expected an (n, {dim}) matrix, got shape {z.shape}")
    return z


class Density(Parametric):
    dim: int

    def log_prob(self, z):
        return self.log_prob_cached(z)[0]

    def log_prob_cached(self, z):
        raise NotImplementedError

    def backward(self, cache, grad_logp, accumulate=True):
        """Gradient of ``sum(grad_logp * log_prob(z))`` w.r.t. ``z``."""
        raise NotImplementedError

    def sample(self, n, rng):
        raise NotImplementedError

    def spec(self) -> dict:
        raise NotImplementedError


class FixedStandardNormal(Density):
    """N(0, I) with no parameters."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def log_prob_cached(self, z):
        z = _check_input(z, self.dim)
        return -0.5 * (np.sum(z * z, axis=1) + self.dim * LOG_2PI), (z,)

    def backward(self, cache, grad_logp, accumulate=True):
        if cache is None:
            raise RuntimeError("backward called without a forward cache")
        (z,) = cache
        return -z * grad_logp[:, None]

    def sample(self, n, rng):
        if n < 1:
            raise ValueError("n must be at least 1")
        return rng.standard_normal((n, self.dim))

    def entropy(self) -> float:
        return 0.5 * self.dim * (1.0 + LOG_2PI)

    def spec(self):
        return {"type": "standard_normal", "dim": self.dim}


class DiagonalGaussian(Density):
    """Gaussian with learnable mean and per-coordinate log-variance."""

    def __init__(self, dim: int, mean=None, log_var=None):
        super().__init__()
        self.dim = dim
        self.add_param("mean", np.zeros(dim) if mean is None else np.broadcast_to(mean, (dim,)))
        self.add_param("log_var", np.zeros(dim) if log_var is None else np.broadcast_to(log_var, (dim,)))

    def _log_var(self):
        return np.maximum(self.params["log_var"], LOG_VAR_FLOOR)

    def log_prob_cached(self, z):
        z = _check_input(z, self.dim)
        lv = self._log_var()
        inv_var = np.exp(-lv)
        diff = z - self.params["mean"]
        lp = -0.5 * (np.sum(diff * diff * inv_var, axis=1) + lv.sum() + self.dim * LOG_2PI)
        return lp, (diff, inv_var)

    def backward(self, cache, grad_logp, accumulate=True):
        if cache is None:
            raise RuntimeError("backward called without a forward cache")
        diff, inv_var = cache
        scaled = diff * inv_var
        if accumulate:
            g = grad_logp[:, None]
            self.grads["mean"] += np.sum(g * scaled, axis=0)
            active = self.params["log_var"] > LOG_VAR_FLOOR
            self.grads["log_var"] += np.where(active, 0.5 * np.sum(g * (diff * scaled - 1.0), axis=0), 0.0)
        return -scaled * grad_logp[:, None]

    def sample(self, n, rng):
        if n < 1:
            raise ValueError("n must be at least 1")
        sd = np.exp(0.5 * self._log_var())
        return self.params["mean"] + sd * rng.standard_normal((n, self.dim))

    def entropy(self) -> float:
        return float(0.5 * np.sum(1.0 + LOG_2PI + self._log_var()))

    def spec(self):
        return {"type": "diag_gaussian", "dim": self.dim}


class GaussianMixture(Density):
    """Mixture of K diagonal Gaussians; weights are a softmax of free logits."""

    def __init__(self, dim: int, n_components: int, rng=None, means=None, log_vars=None, logits=None):
        super().__init__()
        self.dim = dim
        self.n_components = n_components
        if means is None:
            if rng is None:
                raise ValueError("rng is required when means are not given")
            means = rng.standard_normal((n_components, dim))
        self.add_param("means", np.broadcast_to(means, (n_components, dim)))
        self.add_param("log_vars", np.zeros((n_components, dim)) if log_vars is None else np.broadcast_to(log_vars, (n_components, dim)))
        self.add_param("logits", np.zeros(n_components) if logits is None else np.broadcast_to(logits, (n_components,)))

    def weights(self):
        return softmax(self.params["logits"])

    def _log_vars(self):
        return np.maximum(self.params["log_vars"], LOG_VAR_FLOOR)

    def log_prob_cached(self, z):
        z = _check_input(z, self.dim)
        lv = self._log_vars()
        inv_var = np.exp(-lv)
        logits = self.params["logits"]
        log_w = logits - log_sum_exp(logits)
        diff = z[:, None, :] - self.params["means"][None, :, :]
        comp = -0.5 * (np.sum(diff * diff * inv_var, axis=2) + lv.sum(axis=1) + self.dim * LOG_2PI)
        joint = comp + log_w
        lp = log_sum_exp(joint, axis=1)
        resp = np.exp(joint - lp[:, None])
        return lp, (diff, inv_var, resp, np.exp(log_w))

    def backward(self, cache, grad_logp, accumulate=True):
        if cache is None:
            raise RuntimeError("backward called without a forward cache")
        diff, inv_var, resp, w = cache
        g = grad_logp[:, None]
        gr = g * resp
        scaled = diff * inv_var[None]
        if accumulate:
            self.grads["means"] += np.einsum("nk,nkd->kd", gr, scaled)
            active = self.params["log_vars"] > LOG_VAR_FLOOR
            glv = 0.5 * np.einsum("nk,nkd->kd", gr, diff * scaled - 1.0)
            self.grads["log_vars"] += np.where(active, glv, 0.0)
            self.grads["logits"] += gr.sum(axis=0) - grad_logp.sum() * w
        return -np.einsum("nk,nkd->nd", gr, scaled)

    def sample(self, n, rng):
        if n < 1:
            raise ValueError("n must be at least 1")
        labels = rng.choice(self.n_components, size=n, p=self.weights())
        sd = np.exp(0.5 * self._log_vars())
        eps = rng.standard_normal((n, self.dim))
        return self.params["means"][labels] + sd[labels] * eps

    def spec(self):
        return {"type": "mog", "dim": self.dim, "n_components": self.n_components}


class FlowDensity(Density):
    """Change-of-variables density ``N(flow(z); 0, I) |det J_flow(z)|``."""

    def __init__(self, flow: Flow):
        super().__init__()
        self.dim = flow.dim
        self.flow = flow
        self.base = FixedStandardNormal(flow.dim)
        self.add_child("flow", flow)

    def log_prob_cached(self, z):
        z = _check_input(z, self.dim)
        u, logdet, fcache = self.flow.forward_cached(z)
        base_lp, bcache = self.base.log_prob_cached(u)
        return base_lp + logdet, (fcache, bcache)

    def backward(self, cache, grad_logp, accumulate=True):
        if cache is None:
            raise RuntimeError("backward called without a forward cache")
        fcache, bcache = cache
        gu = self.base.backward(bcache, grad_logp)
        return self.flow.backward(fcache, gu, grad_logp, accumulate)

    def sample(self, n, rng):
        return self.flow.inverse(self.base.sample(n, rng))

    def spec(self):
        return {"type": "flow", "dim": self.dim, "flow": self.flow.spec()}


def make_flow_density(dim, n_layers, hidden_dim, n_hidden, rng, norm=True):
    """Identity-initialized RealNVP density."""
    return FlowDensity(make_realnvp(dim, n_layers, hidden_dim, n_hidden, rng, norm=norm))
