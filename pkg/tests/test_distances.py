"""Kernel constant, field evaluators, and the exact identities."""

import math

import numpy as np
import pytest

from urlab.distances import (
    distance_gradient,
    divergence_check,
    evaluate_fields,
    fd_gradient_check,
    field_decomposition,
    kernel_constant,
    ratio_gradient,
    regularized_distance,
    riesz_field,
    smoothed_density,
)
from urlab.exceptions import ParameterError, ResolutionError
from urlab.geometry import DiscreteMeasure, make_plane_set


def _ring_probes(count, dist, x_range=0.4, seed=0):
    """Probes at fixed distance from the x1-axis, spread along it."""
    rng = np.random.default_rng(seed)
    x1 = rng.uniform(-x_range, x_range, size=count)
    theta = rng.uniform(0.0, 2.0 * math.pi, size=count)
    return np.column_stack([x1, dist * np.cos(theta), dist * np.sin(theta)])


@pytest.fixture(scope="module")
def longline3d():
    # the half-exponent kernel tail decays like sqrt(dist/reach), so plane
    # statements routed through the smoothed density need a long support
    return make_plane_set(3, 1, extent=120.0, spacing=0.01)


# -- kernel constant ----------------------------------------------------------

def test_kernel_constant_reference_values():
    assert kernel_constant(1, 1.0) == pytest.approx(math.pi, rel=1e-8)
    assert kernel_constant(1, 3.0) == pytest.approx(math.pi / 2.0, rel=1e-8)


def test_kernel_constant_gamma_closed_form():
    # oracle: pi^{d/2} Gamma(beta/2) / Gamma((d+beta)/2), via the Beta integral
    for d in (1, 2, 3):
        for beta in (0.5, 1.0, 1.7, 2.0, 3.0):
            want = math.pi ** (d / 2.0) * math.gamma(beta / 2.0) \
                / math.gamma((d + beta) / 2.0)
            assert kernel_constant(d, beta) == pytest.approx(want, rel=1e-8)


def test_kernel_constant_recursion():
    # (beta + d) c_{beta+2} = beta c_beta
    for d in (1, 2):
        for beta in (0.5, 1.0, 2.0):
            lhs = (beta + d) * kernel_constant(d, beta + 2.0)
            rhs = beta * kernel_constant(d, beta)
            assert lhs == pytest.approx(rhs, rel=1e-8)


def test_kernel_constant_rejects_bad_args():
    with pytest.raises(ParameterError):
        kernel_constant(0, 1.0)
    with pytest.raises(ParameterError):
        kernel_constant(1, 0.0)


# -- plane closed forms (beta=2: light tails, truncation negligible) ---------

def test_distance_plane_value(line3d):
    beta = 2.0
    probes = _ring_probes(20, 0.05)
    want = kernel_constant(1, beta) ** (-1.0 / beta) * 0.05
    got = regularized_distance(line3d, probes, beta)
    assert np.allclose(got, want, rtol=0.01)


def test_field_plane_value(line3d):
    beta = 2.0
    u = 0.05
    probes = _ring_probes(20, u, seed=3)
    got = riesz_field(line3d, probes, beta)
    normal = probes.copy()
    normal[:, 0] = 0.0
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    want = kernel_constant(1, beta + 1.0) * u ** (-beta) * normal
    err = np.linalg.norm(got - want, axis=1)
    assert np.all(err <= 0.02 * np.linalg.norm(want, axis=1))


def test_gradient_plane_value(line3d):
    beta = 2.0
    probes = _ring_probes(20, 0.06, seed=4)
    got = distance_gradient(line3d, probes, beta)
    normal = probes.copy()
    normal[:, 0] = 0.0
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    want = kernel_constant(1, beta) ** (-1.0 / beta) * normal
    err = np.linalg.norm(got - want, axis=1)
    assert np.all(err <= 0.01 * np.linalg.norm(want, axis=1))


def test_field_bounded_by_distance_power(line3d, graph02):
    beta = 1.5
    for sigma in (line3d, graph02):
        probes = _ring_probes(30, 0.2, seed=5) + np.array([0.0, 0.1, 0.0])
        h = riesz_field(sigma, probes, beta)
        d = regularized_distance(sigma, probes, beta)
        assert np.all(np.linalg.norm(h, axis=1)
                      <= d ** (-beta) * (1.0 + 1e-12))


def test_homogeneity_exact(line3d):
    lam = 2.0
    probes = _ring_probes(8, 0.07, seed=6)
    base_d = regularized_distance(line3d, probes, 2.0)
    base_g = distance_gradient(line3d, probes, 2.0)
    scaled = DiscreteMeasure(3, 1, lam * line3d.points, lam * line3d.weights,
                             lam * line3d.spacing, "scaled")
    got_d = regularized_distance(scaled, lam * probes, 2.0)
    got_g = distance_gradient(scaled, lam * probes, 2.0)
    assert np.allclose(got_d, lam * base_d, rtol=1e-12)
    assert np.allclose(got_g, base_g, rtol=1e-10, atol=1e-14)


# -- identities by finite differences ----------------------------------------

@pytest.mark.parametrize("beta", [0.7, 1.0, 2.0])
def test_fd_gradient_check_line(line3d, beta):
    for probe in _ring_probes(5, 0.08, seed=7):
        rep = fd_gradient_check(line3d, probe, beta)
        assert rep["rel_err"] <= 1e-4
        assert rep["richardson_ok"]


def test_fd_gradient_check_graph(graph02):
    probes = _ring_probes(5, 0.1, seed=8) + np.array([0.0, 0.08, 0.0])
    for probe in probes:
        rep = fd_gradient_check(graph02, probe, 2.0)
        assert rep["rel_err"] <= 1e-4


def test_divergence_free_middle_exponent(line3d, graph02):
    for sigma in (line3d, graph02):
        for probe in _ring_probes(4, 0.12, seed=9) + np.array([0.0, 0.06, 0.0]):
            rep = divergence_check(sigma, probe)
            assert rep["ratio"] <= 1e-3


# -- smoothed density and decompositions -------------------------------------

def test_smoothed_density_near_one_on_long_line(longline3d):
    vals = smoothed_density(longline3d, _ring_probes(10, 0.025, x_range=0.5))
    assert np.all(np.abs(vals - 1.0) <= 0.03)


def test_decomposition_identity_exact(line3d, graph02):
    # field(alpha) * D^alpha == b*grad(D_beta) + V by independent evaluation
    alpha, beta = 1.0, 2.0
    for sigma in (line3d, graph02):
        probes = _ring_probes(10, 0.09, seed=10) + np.array([0.0, 0.05, 0.0])
        pair = field_decomposition(sigma, probes, alpha, beta)
        h = riesz_field(sigma, probes, alpha)
        dval = regularized_distance(sigma, probes, beta)
        grad = distance_gradient(sigma, probes, beta)
        lhs = h * (dval ** alpha)[:, None]
        rhs = pair.b[:, None] * grad + pair.v
        assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-12)


def test_remainder_small_on_plane(longline3d):
    alpha, beta = 1.0, 2.0
    probes = _ring_probes(10, 0.025, x_range=0.5, seed=11)
    pair = field_decomposition(longline3d, probes, alpha, beta)
    grad = distance_gradient(longline3d, probes, beta)
    scale = np.abs(pair.b) * np.linalg.norm(grad, axis=1)
    assert np.all(np.linalg.norm(pair.v, axis=1) <= 0.05 * scale)


def test_ratio_gradient_small_on_plane(longline3d):
    probes = _ring_probes(10, 0.025, x_range=0.5, seed=12)
    vals = ratio_gradient(longline3d, probes, 1.0, 2.0)
    assert np.all(vals <= 0.05)


def test_ratio_gradient_sees_graph_corners(graph02):
    # probes straddling a sawtooth corner: the ratio gradient wakes up
    probes = np.array([[0.125, 0.08, 0.0], [0.375, 0.07, 0.02]])
    vals = ratio_gradient(graph02, probes, 1.0, 2.0)
    assert np.all(vals > 1e-3)


# -- guards -------------------------------------------------------------------

def test_resolution_guard_fires(line3d):
    with pytest.raises(ResolutionError):
        regularized_distance(line3d, np.array([0.0, 0.015, 0.0]), 2.0)


def test_evaluate_fields_flags_instead(line3d):
    probes = np.array([[0.0, 0.015, 0.0], [0.0, 0.1, 0.0]])
    fs = evaluate_fields(line3d, probes, 2.0)
    assert fs.reliable.tolist() == [False, True]
    assert fs.distance.shape == (2,)
    assert fs.field.shape == (2, 3)
