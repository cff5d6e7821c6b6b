import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rfmkit.errors import DomainError, InvalidArgument
from rfmkit.geometry import (SPD, Euclidean, ManifoldDescriptor, Sphere, divergence_fd,
                             jacobi_closed_form, make_manifold, model_function_s, sym_eigh)
from rfmkit.bridge.fields import FunctionField, LinearField, ZeroField
from rfmkit.oracle import numeric_jacobi, numeric_transport, geodesic_path

import oracle_values as ov

E1, E2, E3 = np.eye(3)
seeds = st.integers(min_value=0, max_value=2 ** 32 - 1)


def _pair(m, rng):
    x = m.random_point(rng)
    if isinstance(m, Sphere):
        v = m.random_tangent(rng, x)
        v *= rng.uniform(0.0, 3.0) / max(np.linalg.norm(v), 1e-12)
        return x, m.exp(x, v)
    return x, m.random_point(rng)


MANIFOLDS = [Sphere(2), Sphere(3), Sphere(4), SPD(2), SPD(3), Euclidean(3)]


# --- exp / log ----------------------------------------------------------------------------------

def test_sphere_exp_examples():
    S = Sphere(2)
    assert np.array_equal(S.exp(E3, np.zeros(3)), E3)
    np.testing.assert_allclose(S.exp(E3, math.pi / 2 * E1), E1, atol=1e-15)


def test_sphere_log_examples():
    S = Sphere(2)
    assert np.array_equal(S.log(E3, E3), np.zeros(3))
    np.testing.assert_allclose(S.log(E3, E1), math.pi / 2 * E1, atol=1e-15)


def test_sphere_log_rejects_antipode():
    with pytest.raises(DomainError):
        Sphere(2).log(E3, -E3)


def test_spd_exp_log_diagonal():
    m = SPD(2)
    np.testing.assert_allclose(m.exp(np.eye(2), np.diag([math.log(2), 0.0])), np.diag([2.0, 1.0]),
                               atol=1e-15)
    np.testing.assert_allclose(m.log(np.eye(2), np.diag([4.0, 1.0])), np.diag([ov.LOG_4, 0.0]),
                               atol=1e-15)
    assert m.dist(np.eye(2), np.diag([math.e ** 2, 1.0])) == pytest.approx(2.0, abs=1e-14)


@pytest.mark.parametrize("m", MANIFOLDS, ids=repr)
@settings(max_examples=40, deadline=None)
@given(seed=seeds)
def test_exp_log_roundtrip(m, seed):
    rng = np.random.default_rng(seed)
    x, y = _pair(m, rng)
    back = m.exp(x, m.log(x, y))
    assert np.max(np.abs(back - y)) <= 1e-9 * max(1.0, np.max(np.abs(y)))


@pytest.mark.parametrize("m", MANIFOLDS, ids=repr)
@settings(max_examples=30, deadline=None)
@given(seed=seeds)
def test_distance_axioms(m, seed):
    rng = np.random.default_rng(seed)
    x, y = _pair(m, rng)
    z = m.random_point(rng)
    assert m.dist(x, x) == pytest.approx(0.0, abs=1e-7)
    assert m.dist(x, y) == pytest.approx(m.dist(y, x), rel=1e-9, abs=1e-12)
    assert m.dist(x, y) == pytest.approx(m.norm(x, m.log(x, y)), rel=1e-9, abs=1e-12)
    assert m.dist(x, z) <= m.dist(x, y) + m.dist(y, z) + 1e-9


def test_sphere_antipodal_distance():
    assert Sphere(2).dist(E3, -E3) == pytest.approx(math.pi)


def test_batched_matches_single():
    rng = np.random.default_rng(3)
    m = SPD(3)
    x, y = m.random_point(rng, 5), m.random_point(rng, 5)
    batched = m.log(x, y)
    for i in range(5):
        np.testing.assert_allclose(batched[i], m.log(x[i], y[i]), atol=1e-12)


# --- transport ---------------------------------------------------------------------------------

@pytest.mark.parametrize("m", MANIFOLDS, ids=repr)
@settings(max_examples=30, deadline=None)
@given(seed=seeds)
def test_transport_isometry(m, seed):
    rng = np.random.default_rng(seed)
    x, y = _pair(m, rng)
    u, v = m.random_tangent(rng, x), m.random_tangent(rng, x)
    pu, pv = m.transport(x, y, u), m.transport(x, y, v)
    assert m.inner(y, pu, pv) == pytest.approx(m.inner(x, u, v), rel=1e-10, abs=1e-10)


def test_transport_identity_and_autoparallel():
    S = Sphere(2)
    rng = np.random.default_rng(0)
    x, y = _pair(S, rng)
    v = S.random_tangent(rng, x)
    np.testing.assert_allclose(S.transport(x, x, v), v, atol=1e-15)
    # the geodesic's own velocity is carried to -Log_y(x)
    np.testing.assert_allclose(S.transport(x, y, S.log(x, y)), -S.log(y, x), atol=1e-12)


def test_spd_transport_matches_ode_oracle():
    m = SPD(2)
    x, y = np.eye(2), np.diag([4.0, 1.0])
    v = np.array([[0.0, 1.0], [1.0, 0.0]])
    oracle = numeric_transport(m, geodesic_path(m, x, y, 256), v, method="ode")
    np.testing.assert_allclose(m.transport(x, y, v), oracle, atol=1e-7)


# --- geodesics and bridge velocities ------------------------------------------------------------

def test_geodesic_endpoints_and_third():
    S = Sphere(2)
    np.testing.assert_allclose(S.geodesic(E3, E1, 0.0), E3, atol=1e-15)
    np.testing.assert_allclose(S.geodesic(E3, E1, 1.0), E1, atol=1e-9)
    sin6, cos6 = ov.GEODESIC_THIRD
    np.testing.assert_allclose(S.geodesic(E3, E1, 1 / 3), [sin6, 0.0, cos6], atol=1e-15)


@pytest.mark.parametrize("m", MANIFOLDS, ids=repr)
@settings(max_examples=30, deadline=None)
@given(seed=seeds, t=st.floats(0.0, 0.95))
def test_bridge_velocity_dual_formulas(m, seed, t):
    rng = np.random.default_rng(seed)
    x0, x1 = _pair(m, rng)
    a = m.bridge_velocity(x0, x1, t, formula="transport")
    b = m.bridge_velocity(x0, x1, t, formula="log")
    assert np.max(np.abs(a - b)) <= 1e-8 * max(1.0, np.max(np.abs(a)))
    xt = m.geodesic(x0, x1, t)
    assert m.norm(xt, a) == pytest.approx(m.dist(x0, x1), rel=1e-9, abs=1e-12)


def test_bridge_velocity_degenerate_and_domain():
    S = Sphere(2)
    assert np.allclose(S.bridge_velocity(E3, E3, 0.3), 0.0)
    with pytest.raises(DomainError):
        S.bridge_velocity(E3, E1, 1.0)


# --- frames -------------------------------------------------------------------------------------

def test_frame_examples():
    f = Sphere(2).frame(E3)
    assert {tuple(np.round(np.abs(r), 12)) for r in f} == {(1.0, 0.0, 0.0), (0.0, 1.0, 0.0)}
    basis = SPD(2).frame(np.eye(2))
    expected = [np.diag([1.0, 0.0]), np.diag([0.0, 1.0]),
                np.array([[0.0, 1.0], [1.0, 0.0]]) / math.sqrt(2)]
    for b, e in zip(basis, expected):
        np.testing.assert_allclose(b, e, atol=1e-15)


@pytest.mark.parametrize("m", MANIFOLDS, ids=repr)
@settings(max_examples=25, deadline=None)
@given(seed=seeds)
def test_frame_is_orthonormal(m, seed):
    x = m.random_point(np.random.default_rng(seed))
    np.testing.assert_allclose(m.gram(x, m.frame(x)), np.eye(m.dim), atol=1e-10)


# --- descriptors --------------------------------------------------------------------------------

def test_descriptors():
    s = Sphere(3).descriptor
    assert (s.k_min, s.k_max, s.l_r, s.inj_radius, s.dim) == (1.0, 1.0, 1.0, math.pi, 3)
    p = SPD(3).descriptor
    assert (p.k_min, p.k_max, p.l_r, p.inj_radius, p.dim) == (-0.5, 0.0, 0.5, math.inf, 6)
    assert make_manifold("euclidean", 3).descriptor.l_r == 0.0
    with pytest.raises(InvalidArgument):
        ManifoldDescriptor("sphere", 2, 1.0, 1.0, 0.5, math.pi)
    with pytest.raises(InvalidArgument):
        make_manifold("torus", 2)


def test_nonfinite_input_rejected():
    with pytest.raises(InvalidArgument):
        Sphere(2).exp(E3, np.array([np.nan, 0.0, 0.0]))


# --- model functions and Jacobi fields ----------------------------------------------------------

def test_model_function_examples():
    assert model_function_s(0.0, 1.7)[0] == 1.7
    assert model_function_s(-1.0, 1.0)[0] == pytest.approx(ov.SINH_1, rel=1e-15)
    assert abs(model_function_s(1.0, math.pi)[0]) < 1e-15


def test_jacobi_examples():
    assert jacobi_closed_form(0.0, 2.5, 1.0, 0.4) == pytest.approx(2.0)
    assert jacobi_closed_form(1.0, math.pi / 2, 1.0, 0.0) == pytest.approx(0.0, abs=1e-15)
    assert jacobi_closed_form(-1.0, 1.0, 0.0, 1.0) == pytest.approx(ov.SINH_1, rel=1e-15)


@settings(max_examples=60, deadline=None)
@given(c=st.floats(-2.0, 2.0), t=st.floats(0.0, 3.0), j0=st.floats(0.0, 2.0), dj0=st.floats(0.0, 2.0))
def test_jacobi_closed_form_matches_ode(c, t, j0, dj0):
    assert abs(jacobi_closed_form(c, t, j0, dj0) - numeric_jacobi(c, t, j0, dj0)) <= 1e-6


# --- divergence by finite differences -----------------------------------------------------------

def test_divergence_linear_field():
    A = np.array([[1.0, 2.0, 0.0], [0.5, -3.0, 1.0], [0.0, 0.2, 0.7]])
    m = Euclidean(3)
    x = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_allclose(divergence_fd(m, LinearField(m, A), 0.0, x, 1e-4), np.trace(A), atol=1e-8)
    assert np.allclose(divergence_fd(m, ZeroField(m), 0.0, x, 1e-4), 0.0)


@pytest.mark.parametrize("d,r,expected", [(2, 1.0, ov.DIV_LOG_D2_1), (4, 2.5, ov.DIV_LOG_D4_2P5)])
def test_divergence_of_log_field(d, r, expected):
    S = Sphere(d)
    x1 = np.eye(d + 1)[0]
    x = np.cos(r) * x1 + np.sin(r) * np.eye(d + 1)[1]
    field = FunctionField(S, lambda t, y: S.log(y, x1))
    assert divergence_fd(S, field, 0.0, x, 1e-4) == pytest.approx(expected, abs=1e-5)


# --- symmetric eigensolver ----------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(seed=seeds, scale=st.floats(1e-3, 1e3))
def test_sym_eigh_2x2_matches_lapack(seed, scale):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((8, 2, 2)) * scale
    a = a + np.swapaxes(a, -1, -2)
    w, U = sym_eigh(a)
    np.testing.assert_allclose(w, np.linalg.eigvalsh(a), atol=1e-12 * scale)
    np.testing.assert_allclose(U @ (w[..., None] * np.swapaxes(U, -1, -2)), a, atol=1e-12 * scale)
