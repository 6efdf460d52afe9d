import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from aub.alignment import AlignmentModel
from aub.density import DiagonalGaussian, FixedStandardNormal, GaussianMixture
from aub.flows import AffineCouplingLayer, AffineFlow, FlowSequence, IdentityFlow, alternating_mask
from aub.numeric import make_rng
from aub.quadrature import (
    BoundViolation,
    Grid1D,
    Normal1D,
    QuadratureError,
    Uniform1D,
    bound_check,
    entropy_cov_check,
    gjsd_forms,
    gjsd_quadrature,
    grid_for,
)

# GJSD of N(0,1) and N(4,1) with equal weights, produced by gjsd_quadrature
# and confirmed by scipy.integrate.quad to 1e-15 (see test below)
GJSD_N0_N4 = 0.632720193736867


def test_identical_densities_zero():
    n = Normal1D(1.0, 2.0)
    assert abs(gjsd_quadrature([n.pdf, n.pdf, n.pdf], [0.2, 0.3, 0.5], grid_for([n]))) < 1e-9


def test_disjoint_uniforms_ln2():
    a, b = Uniform1D(0.0, 1.0), Uniform1D(2.0, 5.0)
    assert gjsd_quadrature([a.pdf, b.pdf], [0.5, 0.5], grid_for([a, b])) == pytest.approx(math.log(2), abs=1e-6)


def test_gaussian_pair_golden():
    a, b = Normal1D(0.0, 1.0), Normal1D(4.0, 1.0)
    assert gjsd_quadrature([a.pdf, b.pdf], [0.5, 0.5], grid_for([a, b])) == pytest.approx(GJSD_N0_N4, abs=1e-9)


def test_golden_against_scipy_quad():
    a, b = Normal1D(0.0, 1.0), Normal1D(4.0, 1.0)

    def integrand(x):
        p, q = a.pdf(x), b.pdf(x)
        m = 0.5 * (p + q)
        return 0.5 * p * math.log(p / m) + 0.5 * q * math.log(q / m)

    value, _ = integrate.quad(integrand, -30, 34, points=[0, 2, 4], epsabs=1e-14, epsrel=1e-13, limit=500)
    assert value == pytest.approx(GJSD_N0_N4, abs=1e-12)


def test_coarse_grid_detected():
    a, b = Normal1D(0.0, 0.05), Normal1D(4.0, 1.0)
    with pytest.raises(QuadratureError):
        gjsd_quadrature([a.pdf, b.pdf], [0.5, 0.5], Grid1D(-12.0, 16.0, 41))


def test_bad_weights():
    n = Normal1D(0.0, 1.0)
    with pytest.raises(ValueError):
        gjsd_forms([n.pdf, n.pdf], [0.6, 0.6], grid_for([n]))


@given(st.integers(0, 2 ** 32 - 1))
def test_forms_agree_random_gaussians(seed):
    rng = make_rng(seed)
    k = int(rng.integers(2, 4))
    comps = [Normal1D(float(rng.uniform(-3, 3)), float(rng.uniform(0.3, 2.0))) for _ in range(k)]
    w = rng.dirichlet(np.ones(k))
    kl, ent = gjsd_forms([c.pdf for c in comps], w, grid_for(comps))
    assert abs(kl - ent) <= 1e-6
    assert -1e-9 <= kl <= -np.sum(w * np.log(w)) + 1e-9


# --- bound check ---------------------------------------------------------------

def affine_model(a_list, b_list, q):
    return AlignmentModel([AffineFlow(1, a, b) for a, b in zip(a_list, b_list)], q)


def test_tight_bound_when_q_is_the_mixture_latent():
    # both domains map onto N(0,1), so P_Zmix = N(0,1) = Q
    model = affine_model([1.0, 0.5], [0.0, -1.0], FixedStandardNormal(1))
    bc = bound_check(model, [Normal1D(0.0, 1.0), Normal1D(2.0, 2.0)])
    assert abs(bc.gap) < 1e-9
    assert bc.upper_bound == pytest.approx(bc.gjsd, abs=1e-9)


def test_random_affine_bounds():
    rng = make_rng(4)
    for _ in range(5):
        q = DiagonalGaussian(1, rng.standard_normal(1), rng.uniform(-1, 1, 1))
        model = affine_model(rng.uniform(0.5, 2, 2) * rng.choice([-1, 1], 2), rng.standard_normal(2), q)
        bc = bound_check(model, [Normal1D(0.0, 1.0), Uniform1D(-1.0, 2.0)])
        assert bc.upper_bound >= bc.gjsd - 1e-6
        assert bc.gap > 0


def test_alignflow_q_positive_gap():
    model = affine_model([1.0, 1.0], [0.0, 0.0], FixedStandardNormal(1))
    bc = bound_check(model, [Normal1D(0.0, 1.0), Normal1D(4.0, 1.0)])
    assert bc.gap > 0.1
    assert bc.gjsd == pytest.approx(GJSD_N0_N4, abs=1e-8)


def test_bound_check_rejects_coupling():
    model = AlignmentModel([IdentityFlow(2)], FixedStandardNormal(2))
    with pytest.raises(ValueError):
        bound_check(model, [Normal1D(0, 1)])


def test_bound_violation_is_assertion():
    assert issubclass(BoundViolation, AssertionError)


# --- entropy change of variables ---------------------------------------------

def test_identity_entropy_exact(rng):
    lhs, rhs, err = entropy_cov_check(IdentityFlow(1), FixedStandardNormal(1), 1000, rng)
    assert rhs == pytest.approx(0.5 * math.log(2 * math.pi * math.e), abs=1e-15)
    assert err < 1e-6


def test_affine_entropy(rng):
    lhs, rhs, err = entropy_cov_check(AffineFlow(1, 2.0, 0.0), FixedStandardNormal(1), 1000, rng)
    assert rhs == pytest.approx(0.5 * math.log(2 * math.pi * math.e) + math.log(2), abs=1e-12)
    assert err < 1e-6


def test_affine_2d_entropy(rng):
    flow = AffineFlow(2, np.array([0.5, -3.0]), np.array([1.0, 2.0]))
    _, _, err = entropy_cov_check(flow, DiagonalGaussian(2, np.zeros(2), np.array([0.2, -0.4])), 1000, rng)
    assert err < 1e-6


def test_coupling_entropy(rng):
    layers = [AffineCouplingLayer(2, alternating_mask(2, i), 8, 1, rng) for i in range(2)]
    flow = FlowSequence(layers)
    store = flow.attach_store()
    store.values[:] = 0.3 * rng.standard_normal(len(store))
    _, _, err = entropy_cov_check(flow, FixedStandardNormal(2), 100_000, rng)
    assert err <= 0.02


def test_entropy_check_rejects_3d(rng):
    with pytest.raises(ValueError):
        entropy_cov_check(IdentityFlow(3), FixedStandardNormal(3), 10, rng)


def test_pushforward_closed_forms():
    assert Normal1D(1.0, 2.0).pushforward(-3.0, 1.0) == Normal1D(-2.0, 6.0)
    assert Uniform1D(0.0, 1.0).pushforward(-2.0, 1.0) == Uniform1D(-1.0, 1.0)
    assert Uniform1D(0.0, 4.0).entropy() == pytest.approx(math.log(4.0))


def test_mixture_q_equal_to_latent_mixture_is_tight():
    q = GaussianMixture(1, 2, means=np.array([[0.0], [3.0]]), log_vars=np.zeros((2, 1)))
    model = affine_model([1.0, 1.0], [0.0, 0.0], q)
    bc = bound_check(model, [Normal1D(0.0, 1.0), Normal1D(3.0, 1.0)])
    assert abs(bc.gap) < 1e-9
    assert bc.upper_bound == pytest.approx(bc.gjsd, abs=1e-9)
