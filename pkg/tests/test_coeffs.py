"""Coefficient fields, parameter functions, soil laws, coercivity."""

import math

import numpy as np
import pytest

from rblod.coeffs import (
    RICHARDS_SOILS,
    brooks_corey_kr,
    brooks_corey_theta,
    coercivity_lower_bound,
    get_problem,
    model_problem_1,
    model_problem_2,
    theta_q_richards,
    theta_q_richards_derivative,
)
from rblod.errors import CoercivityError, InvalidArgumentError


def test_mp1_theta_reference_values():
    mp1 = model_problem_1()
    rng = np.random.default_rng(7)
    for mu in [0.0, 1.0, 2.012, 5.0, *rng.uniform(0, 5, 5)]:
        got = mp1.theta(mu)
        root = math.sqrt(abs(mu))
        expected = [
            2.0 + math.sin(4 * mu),
            2.0 + mu * mu - math.cos(root),
            2.0 + math.cos(root),
            1.0 + root + abs(mu) ** 1.5 / 10.0,
        ]
        np.testing.assert_allclose(got, expected, rtol=1e-14)


def test_mp1_theta_vectorized():
    mp1 = model_problem_1()
    mus = np.array([0.0, 1.5, 3.0])
    batch = mp1.theta(mus)
    assert batch.shape == (4, 3)
    for s, mu in enumerate(mus):
        np.testing.assert_array_equal(batch[:, s], mp1.theta(mu))


def test_component_a1_at_origin():
    mp1 = model_problem_1()
    fields = mp1.component_fields(np.array([[0.0, 0.0]]))
    assert fields.shape == (4, 1, 2, 2)
    np.testing.assert_allclose(fields[0, 0, 0, 0], 5.0 / (6.0 * math.pi**2))
    np.testing.assert_allclose(fields[0, 0, 1, 1], 7.5 / (4.0 * math.pi))
    assert fields[0, 0, 0, 1] == 0.0


def test_component_ranges_and_positivity():
    mp1 = model_problem_1()
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 1, size=(10000, 2))
    fields = mp1.component_fields(pts)
    # all components are diagonal here; check spd via diagonal entries
    diag = np.stack([fields[..., 0, 0], fields[..., 1, 1]])
    assert np.all(diag > 0)
    a2 = fields[1, :, 0, 0]
    assert np.all(a2 >= 1 / 100 - 1e-12) and np.all(a2 <= 19 / 100 + 1e-12)
    a3 = fields[2, :, 0, 0]
    assert np.all(a3 > 0.02) and np.all(a3 < 0.22)


def test_component_a4_piecewise_law():
    # reference: recompute c_eps by scalar loops and apply each branch
    mp1 = model_problem_1()
    rng = np.random.default_rng(11)
    pts = rng.uniform(0, 1, size=(200, 2))
    fields = mp1.component_fields(pts)
    eps = 0.1
    for p, a4 in zip(pts, fields[3, :, 0, 0]):
        x1, x2 = p
        c = 1.0
        for j in range(5):
            for i in range(j + 1):
                arg = (
                    math.floor(i * x2 - x1 / (1 + i))
                    + math.floor(i * x1 / eps)
                    + math.floor(x2 / eps)
                )
                c += 0.1 * (2.0 / (j + 1)) * math.cos(arg)
        if 0.5 < c < 1.0:
            expected = c**4
        elif 1.0 < c < 1.5:
            expected = c**1.5
        else:
            expected = c
        assert a4 == pytest.approx(expected, rel=1e-13), (x1, x2)
        assert a4 > 0


def test_brooks_corey_theta_anchor():
    soil = RICHARDS_SOILS[0]
    assert brooks_corey_theta(2 * soil.p_b, soil) == pytest.approx(0.58)
    assert brooks_corey_theta(soil.p_b, soil) == soil.theta_M
    assert brooks_corey_theta(-0.01, soil) == soil.theta_M
    # decays towards residual saturation
    assert brooks_corey_theta(-50.0, soil) == pytest.approx(soil.theta_m, abs=2e-2)


def test_brooks_corey_theta_monotone():
    for soil in RICHARDS_SOILS:
        p = np.linspace(-2.0, soil.p_b, 300)
        th = brooks_corey_theta(p, soil)
        assert np.all(np.diff(th) > 0)
        assert np.all(th >= soil.theta_m) and np.all(th <= soil.theta_M)


def test_brooks_corey_kr_endpoints_and_domain():
    for soil in RICHARDS_SOILS:
        assert brooks_corey_kr(soil.theta_M, soil) == 1.0
        assert brooks_corey_kr(soil.theta_m, soil) == 0.0
        with pytest.raises(InvalidArgumentError):
            brooks_corey_kr(soil.theta_m - 0.05, soil)
        with pytest.raises(InvalidArgumentError):
            brooks_corey_kr(soil.theta_M + 0.05, soil)


def test_theta_q_composite_identity():
    rng = np.random.default_rng(5)
    for soil in RICHARDS_SOILS:
        p = rng.uniform(-2.0, soil.p_b, 100)
        composite = brooks_corey_kr(brooks_corey_theta(p, soil), soil)
        np.testing.assert_allclose(theta_q_richards(p, soil), composite, rtol=1e-12)
        assert theta_q_richards(soil.p_b / 2, soil) == 1.0
    soil = RICHARDS_SOILS[0]
    assert theta_q_richards(2 * soil.p_b, soil) == pytest.approx(2.0 ** -5.0)


def test_theta_q_derivative_vs_central_difference():
    for soil in RICHARDS_SOILS:
        for p in [-1.7, -0.9, 2 * soil.p_b, -0.3]:
            if p >= soil.p_b - 1e-3:
                continue
            d = 1e-6
            fd = (theta_q_richards(p + d, soil) - theta_q_richards(p - d, soil)) / (2 * d)
            got = theta_q_richards_derivative(p, soil)
            assert got == pytest.approx(fd, rel=1e-6)


def test_theta_q_derivative_kink():
    soil = RICHARDS_SOILS[2]
    c = 3 * soil.lam + 2
    assert theta_q_richards_derivative(soil.p_b, soil) == pytest.approx(-c / soil.p_b)
    assert theta_q_richards_derivative(soil.p_b + 1e-9, soil) == 0.0
    assert theta_q_richards_derivative(-0.01, soil) == 0.0
    assert theta_q_richards_derivative(-1.0, soil) > 0  # kr grows with pressure


def test_mp2_subdomain_membership():
    mp2 = model_problem_2()
    probes = {
        (0.25, 0.25): [0],
        (0.9, 0.1): [1],
        (0.1, 0.9): [2],
        (0.9, 0.9): [3],
        (0.5, 0.5): [0, 1, 2, 3],
        (0.45, 0.2): [0, 1],
        (0.2, 0.45): [0, 2],
    }
    pts = np.array(list(probes.keys()))
    fields = mp2.component_fields(pts)
    for row, (pt, active) in enumerate(probes.items()):
        for q in range(4):
            norm = np.abs(fields[q, row]).max()
            if q in active:
                assert norm > 0, (pt, q)
            else:
                assert norm == 0.0, (pt, q)


def test_mp2_field_is_masked_mp1_field():
    mp1, mp2 = model_problem_1(), model_problem_2()
    pts = np.array([[0.25, 0.25], [0.55, 0.55], [0.9, 0.2]])
    f1 = mp1.component_fields(pts)
    f2 = mp2.component_fields(pts)
    # inside a subdomain the mp2 term equals the bare permeability component
    np.testing.assert_array_equal(f2[0, 0], f1[0, 0])
    np.testing.assert_array_equal(f2[3, 1], f1[3, 1])
    np.testing.assert_array_equal(f2[1, 2], f1[1, 2])
    assert np.all(f2[3, 2] == 0)


def test_mp2_theta_saturated_at_upper_bound():
    mp2 = model_problem_2()
    hi = mp2.parameter_range[1]
    np.testing.assert_array_equal(mp2.theta(hi), np.ones(4))
    th = mp2.theta(-2.0)
    assert np.all(th > 0) and np.all(th < 1e-3)
    prime = mp2.theta_prime(-1.0)
    assert prime.shape == (4,)
    assert np.all(prime > 0)


def test_get_problem():
    assert get_problem("mp1").name == "mp1"
    assert get_problem("mp2").name == "mp2"
    with pytest.raises(InvalidArgumentError):
        get_problem("mp3")


def test_coercivity_identity():
    fields = np.eye(2)[None, None].repeat(50, axis=1)
    assert coercivity_lower_bound(fields, np.ones(1)) == pytest.approx(1.0)


def test_coercivity_scalar_field():
    rng = np.random.default_rng(2)
    c = rng.uniform(0.5, 3.0, 40)
    fields = c[None, :, None, None] * np.eye(2)[None, None]
    got = coercivity_lower_bound(fields, np.ones(1))
    assert got == pytest.approx(c.min())


def test_coercivity_detects_indefinite():
    fields = np.eye(2)[None, None].repeat(3, axis=1).copy()
    fields[0, 1] = np.array([[1.0, 2.0], [2.0, 1.0]])  # eigenvalues -1, 3
    pts = np.array([[0.0, 0.0], [0.5, 0.5], [1.0, 1.0]])
    with pytest.raises(CoercivityError) as err:
        coercivity_lower_bound(fields, np.ones(1), points=pts, mus=np.array([0.0]))
    np.testing.assert_array_equal(err.value.x, [0.5, 0.5])


def test_coercivity_mp1_positive():
    mp1 = model_problem_1()
    rng = np.random.default_rng(9)
    pts = rng.uniform(0, 1, size=(2000, 2))
    fields = mp1.component_fields(pts)
    mus = np.linspace(0, 5, 30)
    alpha = coercivity_lower_bound(fields, mp1.theta(mus))
    assert 0 < alpha < 1.0


def test_coercivity_mp2_tiny_but_positive():
    mp2 = model_problem_2()
    rng = np.random.default_rng(4)
    pts = rng.uniform(0, 1, size=(2000, 2))
    fields = mp2.component_fields(pts)
    alpha = coercivity_lower_bound(fields, mp2.theta(np.array([-2.0, -1.0, -0.0726])))
    assert 0 < alpha < 1e-4
