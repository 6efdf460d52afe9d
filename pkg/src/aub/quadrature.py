"""Deterministic quadrature oracles for the divergence and entropy identities.

Everything here works on analytic 1-D sources (normals, uniforms) pushed
through affine flows, or on 1-D/2-D densities evaluated on tensor grids.
Integrals use the composite trapezoid rule; discontinuities are handled by
splitting the range at breakpoints and evaluating each panel's end nodes at
one-sided limits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .flows import AffineFlow, IdentityFlow

LOG_2PI = math.log(2.0 * math.pi)


class QuadratureError(RuntimeError):
    pass


class BoundViolation(AssertionError):
    pass


@dataclass(frozen=True)
class Normal1D:
    mean: float
    sd: float

    def pdf(self, x):
        u = (np.asarray(x) - self.mean) / self.sd
        return np.exp(-0.5 * u * u) / (self.sd * math.sqrt(2.0 * math.pi))

    def logpdf(self, x):
        u = (np.asarray(x) - self.mean) / self.sd
        return -0.5 * u * u - math.log(self.sd) - 0.5 * LOG_2PI

    def entropy(self):
        return 0.5 * (1.0 + LOG_2PI) + math.log(self.sd)

    def support(self, width=12.0):
        return (self.mean - width * self.sd, self.mean + width * self.sd)

    def breakpoints(self):
        return ()

    def pushforward(self, a, b):
        return Normal1D(a * self.mean + b, abs(a) * self.sd)

    def sample(self, n, rng):
        return self.mean + self.sd * rng.standard_normal(n)


@dataclass(frozen=True)
class Uniform1D:
    lo: float
    hi: float

    def pdf(self, x):
        x = np.asarray(x)
        return np.where((x >= self.lo) & (x <= self.hi), 1.0 / (self.hi - self.lo), 0.0)

    def logpdf(self, x):
        with np.errstate(divide="ignore"):
            return np.log(self.pdf(x))

    def entropy(self):
        return math.log(self.hi - self.lo)

    def support(self, width=None):
        return (self.lo, self.hi)

    def breakpoints(self):
        return (self.lo, self.hi)

    def pushforward(self, a, b):
        ends = sorted((a * self.lo + b, a * self.hi + b))
        return Uniform1D(ends[0], ends[1])

    def sample(self, n, rng):
        return rng.uniform(self.lo, self.hi, n)


class Grid1D:
    """Composite trapezoid nodes over ``[lo, hi]`` split at ``breakpoints``."""

    def __init__(self, lo, hi, n_per_panel=20001, breakpoints=()):
        if not hi > lo:
            raise ValueError("grid needs hi > lo")
        edges = sorted({lo, hi, *[b for b in breakpoints if lo < b < hi]})
        self.lo, self.hi = lo, hi
        self.n_per_panel = int(n_per_panel)
        self.breakpoints = tuple(edges[1:-1])
        nodes, weights = [], []
        for a, b in zip(edges[:-1], edges[1:]):
            t = np.linspace(a, b, self.n_per_panel)
            h = (b - a) / (self.n_per_panel - 1)
            w = np.full(self.n_per_panel, h)
            w[0] = w[-1] = 0.5 * h
            # one-sided limits at panel ends so jumps do not leak across panels
            nudge = 1e-12 * max(1.0, abs(a), abs(b))
            t[0] = a + nudge
            t[-1] = b - nudge
            nodes.append(t)
            weights.append(w)
        self.nodes = np.concatenate(nodes)
        self.weights = np.concatenate(weights)

    def refined(self):
        return Grid1D(self.lo, self.hi, 2 * self.n_per_panel - 1, self.breakpoints)

    def integrate(self, values):
        return float(np.dot(self.weights, values))


class Grid2D:
    """Tensor-product trapezoid grid over a box."""

    def __init__(self, x_range, y_range, nx=801, ny=801):
        self.x_range, self.y_range = tuple(x_range), tuple(y_range)
        self.nx, self.ny = int(nx), int(ny)
        gx = np.linspace(*self.x_range, self.nx)
        gy = np.linspace(*self.y_range, self.ny)
        wx = np.full(self.nx, gx[1] - gx[0])
        wx[[0, -1]] *= 0.5
        wy = np.full(self.ny, gy[1] - gy[0])
        wy[[0, -1]] *= 0.5
        xx, yy = np.meshgrid(gx, gy, indexing="ij")
        self.nodes = np.column_stack([xx.ravel(), yy.ravel()])
        self.weights = np.outer(wx, wy).ravel()

    def refined(self):
        return Grid2D(self.x_range, self.y_range, 2 * self.nx - 1, 2 * self.ny - 1)

    def integrate(self, values):
        return float(np.dot(self.weights, values))


def _xlogy(x, y):
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = x[pos] * np.log(y[pos])
    return out


def gjsd_forms(densities, weights, grid):
    """Both definitions of the generalized JSD under quadrature.

    Returns ``(kl_form, entropy_form)`` where ``kl_form = sum_j w_j KL(P_j, mix)``
    and ``entropy_form = H(mix) - sum_j w_j H(P_j)``.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(densities),) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ValueError("weights must be a probability vector matching the densities")
    pts = grid.nodes
    p = np.stack([np.asarray(d(pts), dtype=np.float64) for d in densities])
    for j, pj in enumerate(p):
        mass = grid.integrate(pj)
        if abs(mass - 1.0) > 1e-6:
            raise QuadratureError(f"grid captures mass {mass:.9f} of density {j}; widen or refine it")
    mix = w @ p
    kl_terms = [grid.integrate(_xlogy(pj, np.divide(pj, mix, out=np.ones_like(pj), where=pj > 0))) for pj in p]
    kl_form = float(np.dot(w, kl_terms))
    h_mix = -grid.integrate(_xlogy(mix, mix))
    h_each = np.array([-grid.integrate(_xlogy(pj, pj)) for pj in p])
    entropy_form = float(h_mix - np.dot(w, h_each))
    return kl_form, entropy_form


def gjsd_quadrature(densities, weights, grid, tol=1e-6, refine_tol=1e-7):
    """Generalized Jensen-Shannon divergence of pointwise-evaluable densities.

    Checks that the KL-sum and entropy forms agree within ``tol`` and that
    refining the grid changes the value by at most ``refine_tol``.
    """
    kl_form, entropy_form = gjsd_forms(densities, weights, grid)
    if abs(kl_form - entropy_form) > tol:
        raise QuadratureError(f"GJSD forms disagree: {kl_form!r} vs {entropy_form!r}")
    fine, _ = gjsd_forms(densities, weights, grid.refined())
    if abs(fine - kl_form) > refine_tol:
        raise QuadratureError(f"grid too coarse: refinement moved GJSD by {abs(fine - kl_form):.3e}")
    return kl_form


def _affine_params(flow):
    if isinstance(flow, IdentityFlow):
        return 1.0, 0.0
    if isinstance(flow, AffineFlow):
        return float(flow.params["scale"][0]), float(flow.params["shift"][0])
    raise TypeError(f"analytic bound check needs affine or identity flows, got {type(flow).__name__}")


def grid_for(sources, n_per_panel=20001):
    lows, highs, breaks = [], [], []
    for s in sources:
        lo, hi = s.support()
        lows.append(lo)
        highs.append(hi)
        breaks.extend(s.breakpoints())
    return Grid1D(min(lows), max(highs), n_per_panel, breaks)


@dataclass
class BoundCheck:
    upper_bound: float
    gjsd: float
    gap: float


def bound_check(model, sources, n_per_panel=20001, tol=1e-6) -> BoundCheck:
    """Verify the variational upper bound and its gap on an analytic case.

    ``sources`` are the k 1-D data distributions (:class:`Normal1D` or
    :class:`Uniform1D`); every flow must be affine or the identity so the
    latents stay in closed form.  The upper bound is computed through the
    model in data space, ``sum_j w_j (E[-logdet - log Q(T_j x)] - H(X_j))``,
    while the divergence and the gap ``KL(mix, Q)`` are integrated in latent
    space.  Raises :class:`BoundViolation` if either identity fails.
    """
    if model.dim != 1 or len(sources) != model.k:
        raise ValueError("bound_check needs a 1-D model with one source per flow")
    w = model.weights
    latents = []
    for flow, src in zip(model.flows, sources):
        if not isinstance(src, (Normal1D, Uniform1D)):
            raise TypeError("sources must be Normal1D or Uniform1D")
        a, b = _affine_params(flow)
        latents.append(src.pushforward(a, b))

    upper = 0.0
    for j, (flow, src) in enumerate(zip(model.flows, sources)):
        g = grid_for([src], n_per_panel)
        x = g.nodes[:, None]
        z, logdet = flow.forward(x)
        integrand = src.pdf(g.nodes) * (-logdet - model.density.log_prob(z))
        upper += w[j] * (g.integrate(integrand) - src.entropy())

    zg = grid_for(latents, n_per_panel)
    gjsd = gjsd_quadrature([lat.pdf for lat in latents], w, zg, tol=tol)
    mix = sum(wj * lat.pdf(zg.nodes) for wj, lat in zip(w, latents))
    log_q = model.density.log_prob(zg.nodes[:, None])
    gap = zg.integrate(_xlogy(mix, np.where(mix > 0, mix, 1.0)) - mix * log_q)

    latent_upper = -zg.integrate(mix * log_q) - float(np.dot(w, [lat.entropy() for lat in latents]))
    if abs(latent_upper - upper) > tol:
        raise BoundViolation(f"data-space and latent-space bounds differ: {upper!r} vs {latent_upper!r}")
    if upper < gjsd - tol:
        raise BoundViolation(f"upper bound {upper!r} below GJSD {gjsd!r}")
    if abs(upper - gjsd - gap) > tol:
        raise BoundViolation(f"bound gap mismatch: {upper - gjsd!r} vs KL {gap!r}")
    return BoundCheck(float(upper), float(gjsd), float(gap))


def _image_box(flow, lo, hi, n_edge=4001, margin=0.02):
    """Bounding box of ``flow`` applied to the box ``[lo, hi]`` (via its boundary)."""
    d = len(lo)
    if d == 1:
        z, _ = flow.forward(np.array([[lo[0]], [hi[0]]]))
        a, b = float(z.min()), float(z.max())
        return [a], [b]
    t = np.linspace(0.0, 1.0, n_edge)
    x0, y0, x1, y1 = lo[0], lo[1], hi[0], hi[1]
    edges = np.concatenate([
        np.column_stack([x0 + (x1 - x0) * t, np.full_like(t, y0)]),
        np.column_stack([x0 + (x1 - x0) * t, np.full_like(t, y1)]),
        np.column_stack([np.full_like(t, x0), y0 + (y1 - y0) * t]),
        np.column_stack([np.full_like(t, x1), y0 + (y1 - y0) * t]),
    ])
    z, _ = flow.forward(edges)
    zlo, zhi = z.min(axis=0), z.max(axis=0)
    pad = margin * (zhi - zlo)
    return list(zlo - pad), list(zhi + pad)


def entropy_cov_check(flow, base, n_samples, rng, n_grid=None, width=10.0):
    """Entropy change of variables: quadrature vs. H(P_X) + E[logdet].

    ``base`` is a Gaussian density model (``FixedStandardNormal`` or
    ``DiagonalGaussian``) of dimension 1 or 2.  The left side integrates
    ``-p_Z log p_Z`` over the flow's image of a ``width``-sigma box, with
    ``p_Z(z) = p_X(x) exp(-logdet(x))`` and ``x = T^{-1}(z)``.  The right
    side is the closed-form base entropy plus a Monte-Carlo mean of the
    log-determinant.  Returns ``(lhs, rhs, abs_err)``.
    """
    d = base.dim
    if d not in (1, 2) or flow.dim != d:
        raise ValueError("entropy_cov_check supports 1-D and 2-D flows only")
    mean = np.asarray(base.params.get("mean", np.zeros(d)), dtype=np.float64)
    sd = np.exp(0.5 * np.maximum(base.params["log_var"], -50)) if "log_var" in base.params else np.ones(d)
    lo, hi = list(mean - width * sd), list(mean + width * sd)
    zlo, zhi = _image_box(flow, lo, hi)

    def lhs_on(grid):
        pts = grid.nodes if d == 2 else grid.nodes[:, None]
        x = flow.inverse(pts)
        _, logdet = flow.forward(x)
        log_pz = base.log_prob(x) - logdet
        pz = np.exp(log_pz)
        mass = grid.integrate(pz)
        return -grid.integrate(pz * log_pz), mass

    if d == 1:
        grid = Grid1D(zlo[0], zhi[0], n_grid or 200001)
    else:
        grid = Grid2D((zlo[0], zhi[0]), (zlo[1], zhi[1]), n_grid or 1201, n_grid or 1201)
    lhs, mass = lhs_on(grid)
    if not np.isfinite(lhs) or abs(mass - 1.0) > 1e-3:
        raise QuadratureError(f"pushforward density integrates to {mass:.6f}")
    x = base.sample(n_samples, rng)
    _, logdet = flow.forward(x)
    rhs = base.entropy() + float(np.mean(logdet))
    return float(lhs), float(rhs), float(abs(lhs - rhs))
