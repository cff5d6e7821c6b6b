import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rfmkit import rng as rngmod
from rfmkit.bridge import (AtomicSphereBridge, AtomicTarget, HarmonicSphereBridge, HarmonicTarget,
                           SphereBridge, SpherePopulationField, UniformTarget, VMFTarget,
                           make_sphere_bridge, perturb_field, psi_map, spd_conditional_log_density,
                           spd_log_Jt, spd_log_jacobian, sphere_constants, sphere_jacobian_Jt)
from rfmkit.bridge.spd import RiemannianGaussianPrior, SpdImportanceField, WishartTarget
from rfmkit.errors import DomainError, InvalidArgument
from rfmkit.geometry import SPD, Sphere, covariant_jacobian_fd, divergence_fd
from rfmkit.metrics import SphereCellPartition
from rfmkit.oracle import (ball_conditional_cells, bridge_rejection_histogram, numeric_dexp_det)
from rfmkit.bridge.sphere import UniformSpherePrior
from rfmkit.quadrature import cap_fraction, sphere_rule

import oracle_values as ov

seeds = st.integers(0, 2 ** 32 - 1)


def _at_distance(d, r):
    e = np.eye(d + 1)
    return e[0], math.cos(r) * e[0] + math.sin(r) * e[1]


# --- J_t ----------------------------------------------------------------------------------------

@pytest.mark.parametrize("d,t,r,expected", [
    (3, 0.5, math.pi / 4, ov.JT_D3_HALF_PI4),
    (4, 0.25, 1e-9, ov.JT_D4_QUARTER_LIMIT),
    (4, 0.25, 0.0, ov.JT_D4_QUARTER_LIMIT),
    (2, 0.3, 1.2, ov.JT_D2_0P3_1P2),
    (5, 0.6, 0.9, ov.JT_D5_0P6_0P9),
])
def test_jacobian_jt_values(d, t, r, expected):
    assert sphere_jacobian_Jt(d, t, r) == pytest.approx(expected, rel=1e-8)


@settings(max_examples=50)
@given(d=st.integers(2, 6), t=st.floats(0.0, 0.95), f=st.floats(1.0, 1.5))
def test_jacobian_jt_support(d, t, f):
    assert sphere_jacobian_Jt(d, t, min(f * (1 - t) * math.pi, math.pi)) == 0.0


def test_jacobian_jt_domain():
    with pytest.raises(DomainError):
        sphere_jacobian_Jt(3, 1.0, 0.1)


# --- conditional and marginal densities ------------------------------------------------------

def _bridges(d):
    harm = HarmonicTarget.two_bump(d)
    vmf = VMFTarget(d, np.eye(d + 1)[0], 3.0)
    return [HarmonicSphereBridge(harm), SphereBridge(harm), SphereBridge(vmf)]


@pytest.mark.parametrize("d", [2, 3])
def test_conditional_at_t0_is_target(d):
    for br in _bridges(d):
        x, x1 = _at_distance(d, 1.1)
        assert br.conditional_density(0.0, x, x1) == pytest.approx(br.target.density(x1), rel=1e-6)


@pytest.mark.parametrize("d", [2, 3])
def test_conditional_support(d):
    for br in _bridges(d):
        x, x1 = _at_distance(d, 0.6 * math.pi)
        assert br.conditional_density(0.5, x, x1) == 0.0


@pytest.mark.parametrize("d", [2, 3])
def test_marginal_normalisation_and_t0(d):
    y, w = sphere_rule(d, {2: 60, 3: 12}[d])
    vol = Sphere(d).volume()
    for br in _bridges(d):
        assert br.marginal_density(0.0, y[:5]) == pytest.approx(np.full(5, 1 / vol), rel=1e-6)
        for t in (0.3, 0.8):
            assert np.sum(w * br.marginal_density(t, y)) == pytest.approx(1.0, abs=1e-3)


def test_uniform_target_is_stationary():
    br = SphereBridge(UniformTarget(3))
    x = Sphere(3).random_point(np.random.default_rng(0), 6)
    for t in (0.2, 0.7):
        np.testing.assert_allclose(br.marginal_density(t, x), 1 / Sphere(3).volume(), rtol=1e-6)
        assert np.max(np.abs(br.velocity(t, x))) < 1e-6
        assert np.max(np.abs(br.score(t, x))) < 1e-6


def test_conditional_matches_rejection_histogram_vmf_d3():
    d, t, radius = 3, 0.5, 0.35
    br = SphereBridge(VMFTarget(d, np.eye(d + 1)[0], 4.0))
    S = Sphere(d)
    rng = rngmod.stream(5, rngmod.ORACLE)
    part = SphereCellPartition(d, 10, n_nodes=200_000, seed=1)
    center = S.exp(np.eye(d + 1)[0], 0.4 * np.eye(d + 1)[1])
    emp = bridge_rejection_histogram(br.target, UniformSpherePrior(d), t, center, radius, part, 600_000, rng)
    exact, exact_se = ball_conditional_cells(br, t, center, radius, part, rng, n_ball=150)
    se = np.sqrt(exact * (1 - exact) / emp.n_accepted + exact_se ** 2)
    z = np.abs(emp.probs - exact) / np.maximum(se, 1.0 / emp.n_accepted)
    assert emp.n_accepted > 2000
    assert np.max(z) < 3.0


def test_marginal_matches_simulated_ball_mass():
    # box-kernel density estimate of simulated X_t against the integral of p_t over the ball
    d, t, radius = 3, 0.7, 0.4
    br = HarmonicSphereBridge(HarmonicTarget.two_bump(d))
    S = Sphere(d)
    rng = rngmod.stream(6, rngmod.ORACLE)
    n = 400_000
    x0, x1 = S.random_point(rng, n), br.target.sample(rng, n)
    ok = S.dist(x0, x1) < math.pi - 1e-9
    xt = S.geodesic(x0[ok], x1[ok], t)
    center = np.eye(d + 1)[0]
    p_hat = np.mean(S.dist(xt, center) < radius)
    se = math.sqrt(p_hat * (1 - p_hat) / ok.sum())
    ball = S.random_point(rng, 2_000_000)
    inside = S.dist(ball, center) < radius
    p_exact = np.mean(br.marginal_density(t, ball[inside])) * cap_fraction(d, radius) * S.volume()
    assert abs(p_hat - p_exact) < 3 * se + 2e-4


# --- velocity and score ----------------------------------------------------------------------

def test_closed_form_and_quadrature_routes_agree():
    d = 3
    target = HarmonicTarget.two_bump(d)
    closed, quad = HarmonicSphereBridge(target), SphereBridge(target, tol=1e-7, max_doublings=4)
    x = Sphere(d).random_point(np.random.default_rng(1), 10)
    for t in (0.1, 0.5, 0.85):
        np.testing.assert_allclose(quad.velocity(t, x), closed.velocity(t, x), atol=1e-5)
        np.testing.assert_allclose(quad.score(t, x), closed.score(t, x), atol=1e-4)


def test_quadrature_velocity_against_finer_rule():
    d = 3
    target = VMFTarget(d, np.eye(d + 1)[1], 2.0)
    base = SphereBridge(target, n_radial=48, n_angular=12, max_doublings=0)
    fine = SphereBridge(target, n_radial=192, n_angular=48, max_doublings=0)
    x = Sphere(d).random_point(np.random.default_rng(2), 12)
    for t in (0.2, 0.6, 0.9):
        a, b = base.velocity(t, x), fine.velocity(t, x)
        assert np.max(np.linalg.norm(a - b, axis=-1)) <= 1e-3 * np.max(np.linalg.norm(b, axis=-1))


def test_single_atom_gives_conditional_field():
    S = Sphere(2)
    a = np.array([0.0, 0.6, 0.8])
    br = AtomicSphereBridge(AtomicTarget(2, a[None]))
    x = S.random_point(np.random.default_rng(0), 50)
    t = 0.4
    keep = S.dist(x, a) < (1 - t) * math.pi - 1e-6
    np.testing.assert_allclose(br.velocity(t, x[keep]), S.log(x[keep], a) / (1 - t), atol=1e-12)


def test_concentrated_vmf_approaches_conditional_field():
    d = 2
    mu = np.eye(3)[0]
    br = SphereBridge(VMFTarget(d, mu, 400.0), n_radial=96, n_angular=24, max_doublings=0)
    S = Sphere(d)
    x = S.exp(mu, 0.8 * np.eye(3)[1])
    v = br.velocity(0.3, x)
    np.testing.assert_allclose(v, S.log(x, mu) / 0.7, atol=0.02)


def _fd_score(br, t, x, step=1e-5):
    S = br.sphere
    frame = S.frame(x)
    g = np.zeros_like(x)
    for i in range(frame.shape[-2]):
        e = frame[..., i, :]
        lp = np.log(br.marginal_density(t, S.exp(x, step * e)))
        lm = np.log(br.marginal_density(t, S.exp(x, -step * e)))
        g = g + ((lp - lm) / (2 * step))[..., None] * e
    return g


@pytest.mark.parametrize("d", [2, 4])
def test_score_is_gradient_of_log_marginal(d):
    br = HarmonicSphereBridge(HarmonicTarget.two_bump(d))
    x = Sphere(d).random_point(np.random.default_rng(d), 8)
    for t in (0.25, 0.6, 0.9):
        np.testing.assert_allclose(br.score(t, x), _fd_score(br, t, x), atol=1e-4)


def test_score_second_moment_below_bound():
    d, t = 4, 0.5
    target = HarmonicTarget(d, np.diag([0.2, 0.2, -0.1, -0.15, -0.15]))
    br = HarmonicSphereBridge(target)
    S = Sphere(d)
    rng = rngmod.stream(8, rngmod.ORACLE)
    x0, x1 = S.random_point(rng, 20000), target.sample(rng, 20000)
    xt = S.geodesic(x0, x1, t)
    bound = 8 * (d - 1) ** 2 / (1 - t) ** 2 * target.ratio
    assert np.mean(np.sum(br.score(t, xt) ** 2, axis=-1)) <= bound
    assert sphere_constants(2.0, 4, 0.5).L_score == pytest.approx(ov.L_SCORE_D4_HALF_RATIO2)


def test_harmonic_velocity_jacobian_matches_fd():
    d = 3
    br = HarmonicSphereBridge(HarmonicTarget.two_bump(d))
    x = Sphere(d).random_point(np.random.default_rng(4), 5)
    t, h = 0.6, 1e-6
    J = br.velocity_jacobian(t, x)
    for k in range(d + 1):
        e = np.zeros(d + 1)
        e[k] = h
        fd = (br.velocity(t, x + e) - br.velocity(t, x - e)) / (2 * h)
        np.testing.assert_allclose(J[..., :, k], fd, atol=1e-6)


def test_velocity_respects_pi_bound():
    br = HarmonicSphereBridge(HarmonicTarget.two_bump(3))
    x = Sphere(3).random_point(np.random.default_rng(0), 500)
    for t in (0.0, 0.5, 0.95):
        assert np.max(np.linalg.norm(br.velocity(t, x), axis=-1)) <= math.pi


# --- atomic targets ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def atomic():
    return AtomicSphereBridge(AtomicTarget.cluster(2, 4, 50.0, seed=3))


def _interior(br, t, x, margin=0.05):
    r = br.sphere.dist(x[:, None], br.target.atoms[None])
    return np.all(r < (1 - t) * math.pi - margin, axis=1)


def test_atomic_marginal_normalised(atomic):
    y, w = sphere_rule(2, 400)
    for t in (0.3, 0.7):
        assert np.sum(w * atomic.marginal_density(t, y)) == pytest.approx(1.0, abs=2e-3)


def test_atomic_score_and_jacobian_match_fd(atomic):
    x = Sphere(2).random_point(np.random.default_rng(7), 40)
    t = 0.4
    x = x[_interior(atomic, t, x)]
    np.testing.assert_allclose(atomic.score(t, x), _fd_score(atomic, t, x), atol=1e-5)
    h = 1e-6
    J = atomic.velocity_jacobian(t, x)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (atomic.velocity(t, x + e) - atomic.velocity(t, x - e)) / (2 * h)
        np.testing.assert_allclose(J[..., :, k], fd, atol=1e-5)


def test_atomic_continuity_equation(atomic):
    S = Sphere(2)
    field = SpherePopulationField(atomic)
    x = S.random_point(np.random.default_rng(8), 30)
    t, dt = 0.35, 1e-5
    x = x[_interior(atomic, t, x, margin=0.1)]
    p = atomic.marginal_density(t, x)
    dp = (atomic.marginal_density(t + dt, x) - atomic.marginal_density(t - dt, x)) / (2 * dt)
    div = divergence_fd(S, field, t, x, 1e-5)
    res = dp + p * (np.sum(atomic.score(t, x) * atomic.velocity(t, x), axis=-1) + div)
    assert np.max(np.abs(res)) <= 1e-3 * np.max(p)


# --- population field -------------------------------------------------------------------------

def test_make_sphere_bridge_routes():
    assert isinstance(make_sphere_bridge(HarmonicTarget.two_bump(2)), HarmonicSphereBridge)
    assert isinstance(make_sphere_bridge(VMFTarget(2, np.eye(3)[0], 1.0)), SphereBridge)
    assert isinstance(make_sphere_bridge(AtomicTarget.cluster(2, 3, 100.0)), AtomicSphereBridge)


def test_population_field_time_domain():
    field = SpherePopulationField(HarmonicSphereBridge(HarmonicTarget.two_bump(2)))
    with pytest.raises(DomainError):
        field(1.0, np.eye(3)[0])


def test_two_bump_density_bounds():
    target = HarmonicTarget.two_bump(3)
    vol = Sphere(3).volume()
    assert (target.m1 * vol, target.M1 * vol) == pytest.approx((0.5, 2.0))
    x = Sphere(3).random_point(np.random.default_rng(0), 5000)
    p = target.density(x)
    assert np.all(p >= target.m1 - 1e-12) and np.all(p <= target.M1 + 1e-12)
    with pytest.raises(InvalidArgument):
        HarmonicTarget(2, np.diag([1.0, 1.0, 1.0]))


# --- perturbations -------------------------------------------------------------------------------

def test_zero_perturbation_is_bit_identical():
    base = SpherePopulationField(HarmonicSphereBridge(HarmonicTarget.two_bump(3)))
    x = Sphere(3).random_point(np.random.default_rng(0), 20)
    for mode in ("uniform_rotation", "uniform_additive", "mean_square"):
        assert np.array_equal(perturb_field(base, 0.0, mode)(0.4, x), base(0.4, x))


@pytest.mark.parametrize("d", [2, 3, 4])
def test_uniform_additive_sup_norm(d):
    base = SpherePopulationField(HarmonicSphereBridge(HarmonicTarget.two_bump(d)))
    eps = 0.07
    field = perturb_field(base, eps, "uniform_additive")
    x = Sphere(d).random_point(np.random.default_rng(1), 4000)
    x = x[x[:, -1] > -0.99]        # the even-d template is singular at one point
    dev = np.linalg.norm(field(0.3, x) - base(0.3, x), axis=-1)
    assert 0.99 * eps <= dev.max() <= 1.01 * eps
    assert dev.min() >= 0.99 * eps


def test_mean_square_perturbation_rms():
    d = 2
    base = SpherePopulationField(HarmonicSphereBridge(HarmonicTarget.two_bump(d)))
    field = perturb_field(base, 0.1, "mean_square", seed=4)
    x = Sphere(d).random_point(np.random.default_rng(2), 200_000)
    rms = math.sqrt(np.mean(np.sum((field(0.5, x) - base(0.5, x)) ** 2, axis=-1)))
    assert rms == pytest.approx(0.1, rel=0.01)


def test_unknown_perturbation_mode():
    base = SpherePopulationField(HarmonicSphereBridge(HarmonicTarget.two_bump(2)))
    with pytest.raises(InvalidArgument):
        perturb_field(base, 0.1, "sideways")


# --- regularity constants ------------------------------------------------------------------------

def test_sphere_constants_examples():
    assert sphere_constants(1.0, 4, 0.0).L_score == pytest.approx(ov.L_SCORE_D4_T0)
    target = HarmonicTarget.two_bump(3)
    scaled = [sphere_constants(target, 3, t).L_div_x * (1 - t) ** 3 for t in (0.0, 0.4, 0.9)]
    assert scaled == pytest.approx([scaled[0]] * 3, rel=1e-12)
    for t in (0.0, 0.5, 0.99):
        assert sphere_constants(target, 3, t).L_v == math.pi
    with pytest.raises(DomainError):
        sphere_constants(target, 3, 1.0)


# --- SPD -----------------------------------------------------------------------------------------

def test_spd_log_jacobian_zero_vector():
    assert spd_log_jacobian(np.eye(3), np.zeros((3, 3))) == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=40)
@given(seed=seeds, scale=st.floats(0.0, 3.0))
def test_spd_log_jacobian_nonnegative(seed, scale):
    m = SPD(3)
    rng = np.random.default_rng(seed)
    x1 = m.random_point(rng)
    assert spd_log_jacobian(x1, m.random_tangent(rng, x1, scale)) >= 0.0


@pytest.mark.parametrize("seed", range(4))
def test_spd_log_jacobian_matches_fd(seed):
    m = SPD(2)
    rng = np.random.default_rng(seed)
    x1 = m.random_point(rng)
    v = m.random_tangent(rng, x1, 0.9)
    det = numeric_dexp_det(m, x1, v, 1e-4)
    assert det >= 1.0
    assert spd_log_jacobian(x1, v) == pytest.approx(math.log(det), abs=1e-5)


def test_spd_conditional_degenerate_cases():
    n = 2
    target, prior = WishartTarget(n, 30.0), RiemannianGaussianPrior(n)
    m = SPD(n)
    rng = np.random.default_rng(0)
    x, x1 = m.random_point(rng, scale=0.3), m.random_point(rng, scale=0.3)
    at0 = spd_conditional_log_density(target, prior, 0.0, x, x1)
    assert at0 == pytest.approx(target.log_density(x1) + prior.log_density(x), abs=1e-10)
    t = 0.6
    assert spd_log_Jt(n, t, x1, x1) == pytest.approx(-3 * math.log(1 - t), abs=1e-12)
    np.testing.assert_allclose(psi_map(t, x1, x1), x1, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_spd_Jt_is_change_of_variables(seed):
    # J_t(x | x1) = |det d psi(x)| in orthonormal frames at x and psi(x)
    n, t, h = 2, 0.5, 1e-5
    m = SPD(n)
    rng = np.random.default_rng(seed)
    x1, x = m.random_point(rng, scale=0.5), m.random_point(rng, scale=0.5)
    y = psi_map(t, x1, x)
    fx, fy = m.frame(x), m.frame(y)
    cols = []
    for e in fx:
        d = (m.log(y, psi_map(t, x1, m.exp(x, h * e))) - m.log(y, psi_map(t, x1, m.exp(x, -h * e)))) / (2 * h)
        cols.append(m.to_frame_coords(y, d, fy))
    fd = abs(np.linalg.det(np.array(cols).T))
    assert math.exp(spd_log_Jt(n, t, x1, x)) == pytest.approx(fd, rel=1e-4)


def test_spd_importance_kernel_matches_generic_route():
    field = SpdImportanceField(WishartTarget(2, 500.0), RiemannianGaussianPrior(2), n_bank=600, seed=1)
    x = field.target.sample(np.random.default_rng(3), 7)
    for t in (0.2, 0.8):
        a, b = field(t, x), field(t, x, compiled=False)
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_spd_prior_sampler_matches_density():
    # radial law of d(X, I): compare the sample mean of d^2 with quadrature of the density
    prior = RiemannianGaussianPrior(2)
    x = prior.sample(rngmod.stream(0, rngmod.PRIOR), 40000)
    lam = np.linalg.eigvalsh(x)
    d2 = np.sum(np.log(lam) ** 2, axis=-1)
    # in log-eigenvalue coordinates the volume density is prop. to sinh(|l1 - l2| / 2)
    g = np.linspace(-4, 4, 801)
    l1, l2 = np.meshgrid(g, g)
    w = np.exp(-prior.beta * (l1 ** 2 + l2 ** 2)) * np.sinh(np.abs(l1 - l2) / 2)
    expected = np.sum(w * (l1 ** 2 + l2 ** 2)) / np.sum(w)
    assert d2.mean() == pytest.approx(expected, rel=0.02)


def test_spd_velocity_gradient_near_minus_identity():
    # concentrated target: grad v ~ -I / (1 - t) at early times
    field = SpdImportanceField(WishartTarget(2, 5000.0), RiemannianGaussianPrior(2), n_bank=2000, seed=0)
    x = field.target.sample(np.random.default_rng(0), 4)
    J = covariant_jacobian_fd(field.manifold, field, 0.3, x, 1e-4)
    np.testing.assert_allclose(J, -np.eye(3) / 0.7 * np.ones((4, 1, 1)), atol=0.15 / 0.7)
