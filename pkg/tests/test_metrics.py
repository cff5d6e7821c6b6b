import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rfmkit import rng as rngmod
from rfmkit.bridge import HarmonicSphereBridge, HarmonicTarget, SpherePopulationField, perturb_field
from rfmkit.errors import DomainError, InvalidArgument
from rfmkit.geometry import Sphere
from rfmkit.metrics import (RateRow, SphereCellPartition, binned_noise_floor, energy_distance,
                            lemma1_diagnostic, loglog_fit, rate_regress, read_rate_table, spd2_cells,
                            tv_binned, tv_histograms, tv_pushforward, w1_from_tv,
                            w1_lower_bound_sliced, write_rate_table)
from rfmkit.quadrature import sphere_volume


@pytest.fixture(scope="module")
def part96():
    return SphereCellPartition(2, 96)


def _uniform(x):
    return np.full(len(x), 1 / sphere_volume(2))


def test_partition_areas(part96):
    assert part96.areas.sum() == pytest.approx(4 * math.pi, rel=1e-6)
    assert part96.areas.max() / part96.areas.min() < 2.0


def test_partition_higher_dimension():
    part = SphereCellPartition(3, 40, n_nodes=100_000, seed=2)
    assert part.areas.sum() == pytest.approx(sphere_volume(3), rel=1e-9)
    assert part.n_cells == 40 and np.all(part.areas > 0)


def test_tv_disjoint_supports(part96):
    x = np.tile(part96.centers[0], (500, 1))
    mass = np.zeros(part96.n_cells)
    mass[1] = 1.0
    tv, _ = tv_binned(x, None, part96, cell_mass=mass)
    assert tv == 1.0


def test_tv_self_sampling_null(part96):
    # plug-in binned TV of exact draws sits at its own noise floor
    n = 100_000
    x = Sphere(2).random_point(rngmod.stream(1, rngmod.PRIOR), n)
    mass = part96.cell_mass(_uniform)
    tv, se = tv_binned(x, None, part96, cell_mass=mass)
    floor = binned_noise_floor(mass, n)
    assert abs(tv - floor) <= 3 * se
    assert tv < 0.02


def test_tv_shrinks_with_sample_size(part96):
    mass = part96.cell_mass(_uniform)
    g = rngmod.stream(2, rngmod.PRIOR)
    small = tv_binned(Sphere(2).random_point(g, 2000), None, part96, cell_mass=mass)[0]
    big = tv_binned(Sphere(2).random_point(g, 200_000), None, part96, cell_mass=mass)[0]
    assert big < small / 5


def test_tv_rotation_invariance():
    # rotating samples and density together leaves the estimate within noise
    target = HarmonicTarget.two_bump(2)
    part = SphereCellPartition(2, 48)
    g = rngmod.stream(3, rngmod.TARGET)
    x = target.sample(g, 50_000)
    Q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((3, 3)))
    tv_a, se_a = tv_binned(x, target.density, part)
    tv_b, se_b = tv_binned(x @ Q.T, lambda y: target.density(y @ Q), part)
    assert abs(tv_a - tv_b) < 3 * math.hypot(se_a, se_b)


def test_tv_coarser_partition_not_larger():
    g = rngmod.stream(4, rngmod.PRIOR)
    x = Sphere(2).random_point(g, 50_000)
    x = x[x[:, 2] > -0.5]
    target = HarmonicTarget.two_bump(2)
    fine, coarse = SphereCellPartition(2, 192), SphereCellPartition(2, 12)
    tf, sf = tv_binned(x, target.density, fine)
    tc, sc = tv_binned(x, target.density, coarse)
    assert tc <= tf + 3 * math.hypot(sf, sc)


def test_tv_errors(part96):
    with pytest.raises(InvalidArgument):
        tv_binned(np.empty((0, 3)), _uniform, part96)
    with pytest.raises(InvalidArgument):
        tv_pushforward([])


def test_tv_histograms():
    tv, se = tv_histograms([0, 0, 1, 1], [2, 2, 2, 3], 4)
    assert tv == 1.0
    tv, _ = tv_histograms(np.arange(1000) % 10, np.arange(1000) % 10, 10)
    assert tv == 0.0


def test_tv_pushforward_matches_analytic():
    # q = N(0, 1), p = N(mu, 1): TV = 2 Phi(mu/2) - 1
    from scipy.stats import norm
    mu = 0.3
    y = np.random.default_rng(0).standard_normal(400_000)
    lr = norm.logpdf(y, mu) - norm.logpdf(y)
    tv, se = tv_pushforward(lr)
    assert abs(tv - (2 * norm.cdf(mu / 2) - 1)) < 3 * se
    assert tv_pushforward(np.zeros(10)) == (0.0, 1e-300)


def test_w1_from_tv():
    assert w1_from_tv(0.0, math.pi) == 0.0
    assert w1_from_tv(0.1, math.pi) == pytest.approx(0.1 * math.pi)
    with pytest.raises(DomainError):
        w1_from_tv(0.1, math.inf)


@pytest.mark.parametrize("seed", range(3))
def test_w1_bound_dominates_sliced_proxy(seed):
    part = SphereCellPartition(2, 48)
    target = HarmonicTarget.two_bump(2)
    g = rngmod.stream(seed, rngmod.TARGET)
    a = target.sample(g, 40_000)
    b = Sphere(2).random_point(g, 40_000)
    tv, _ = tv_binned(b, target.density, part)
    assert w1_from_tv(tv, math.pi) >= w1_lower_bound_sliced(a, b, seed=seed)


def test_energy_distance_separates():
    S = Sphere(2)
    g = np.random.default_rng(0)
    a, b = S.random_point(g, 800), S.random_point(g, 800)
    c = HarmonicTarget.two_bump(2, 1.0).sample(g, 800)
    same, diff = energy_distance(a, b, S.dist), energy_distance(a, c, S.dist)
    assert abs(same) < diff


def test_spd2_cells_range():
    from rfmkit.geometry import SPD
    x = SPD(2).random_point(np.random.default_rng(0), 500)
    edges = np.linspace(-3, 3, 7)
    c = spd2_cells(x, edges, edges, 4)
    assert c.min() >= 0 and c.max() < 6 * 6 * 4


# --- rate regression ---------------------------------------------------------------------------

def _rows(hs, tvs, axis="h"):
    out = []
    for h, tv in zip(hs, tvs):
        kw = dict(h=h, eps=0.0) if axis == "h" else dict(h=1e-3, eps=h)
        out.append(RateRow(N=int(round(1 / kw["h"])), eta=0.0, T=0.9, d=3, tv_hat=tv, std_err=tv / 1e4,
                           n_samples=1000, seed=0, **kw))
    return out


@pytest.mark.parametrize("power", [1.0, 2.0])
def test_rate_regress_planted_slopes(power):
    hs = np.array([0.1, 0.05, 0.025, 0.0125, 0.00625])
    fit = rate_regress(_rows(hs, 0.5 * hs ** power), "h")
    assert fit.slope == pytest.approx(power, abs=1e-9)
    assert fit.r2 == pytest.approx(1.0)
    assert fit.slope_ci[0] <= fit.slope <= fit.slope_ci[1]


@settings(max_examples=30)
@given(power=st.floats(0.5, 2.5), c=st.floats(0.01, 10.0), seed=st.integers(0, 1000))
def test_rate_regress_noisy_recovery(power, c, seed):
    hs = np.geomspace(0.1, 0.001, 6)
    noise = np.exp(0.005 * np.random.default_rng(seed).standard_normal(6))
    tv = np.minimum(c * hs ** power * noise, 1.0)
    fit = rate_regress(_rows(hs, tv, "eps"), "eps")
    if np.all(tv < 1.0):
        assert fit.slope == pytest.approx(power, abs=0.02)


def test_rate_regress_errors():
    hs = [0.1, 0.05, 0.025, 0.0125]
    with pytest.raises(InvalidArgument):
        rate_regress(_rows(hs, [0.1] * 4), "N")
    rows = _rows(hs, [0.1, 0.05, 0.02, 0.01])
    rows[0] = RateRow(10, 0.1, 0.0, 0.0, 0.9, 3, 0.1, 0.05, 1000, 0)
    with pytest.raises(InvalidArgument):
        rate_regress(rows, "h")
    with pytest.raises(InvalidArgument):
        loglog_fit([1.0, 1.0], [1.0, 2.0])


def test_rate_row_validation():
    with pytest.raises(InvalidArgument):
        RateRow(1, 0.1, 0.0, 0.0, 0.9, 3, 1.5, 0.1, 10, 0)
    with pytest.raises(InvalidArgument):
        RateRow(1, 0.1, 0.0, 0.0, 0.9, 3, 0.5, 0.0, 10, 0)


def test_rate_table_roundtrip(tmp_path):
    rows = _rows([0.1, 0.05], [0.3, 0.15])
    write_rate_table(tmp_path / "r.csv", rows)
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "N,h,eta,eps,T,d,tv_hat,std_err,n_samples,seed"
    assert read_rate_table(tmp_path / "r.csv") == rows


# --- TV-derivative diagnostic --------------------------------------------------------------------

@pytest.fixture(scope="module")
def s2_field():
    bridge = HarmonicSphereBridge(HarmonicTarget.two_bump(2))
    return bridge, SpherePopulationField(bridge)


def test_tv_derivative_identical_fields(s2_field):
    bridge, v = s2_field
    rep = lemma1_diagnostic(v, v, bridge, 0.5, n_mc=4000)
    # only Euler error over the short window remains
    assert abs(rep.lhs_fd) < 1e-4 and rep.rhs_bound == 0.0


def test_tv_derivative_perturbed_inequality(s2_field):
    bridge, v = s2_field
    vt = perturb_field(v, 0.1, "mean_square", seed=0)
    rep = lemma1_diagnostic(v, vt, bridge, 0.5, n_mc=20000)
    assert rep.holds
    assert rep.lhs_fd > 0
    assert rep.score_term <= rep.cauchy_schwarz * (1 + 1e-12)
