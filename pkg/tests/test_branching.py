import math
import warnings

import numpy as np
import pytest

from contourgas.branching import (Bounds, DomainError, PopulationExplosion, alpha, alpha0,
                                  alpha0_truncated, alpha_upper, beta_star, bound_report,
                                  coupled_domination_check, generation_means, mean_matrix,
                                  neighbor_sum, offspring_mean, simulate_branching)
from contourgas.clans import explore_clan
from contourgas.field import FieldRealization
from contourgas.lattice import Plaquette, TailDiverges, X, get_catalog, unit_square


@pytest.fixture(scope="module")
def cat8():
    return get_catalog(8)


@pytest.fixture(scope="module")
def cat12():
    return get_catalog(12)


def test_alpha0_leading_order(cat12):
    beta = 6.0
    a0, tail = alpha0(beta, cat12)
    # two unit squares contain a fixed plaquette
    assert a0 == pytest.approx(2 * 4 * math.exp(-4 * beta), rel=1e-3)
    assert tail < 1e-20


def test_alpha0_decreasing(cat12):
    vals = [alpha0_truncated(b, cat12) for b in np.linspace(0.5, 4.0, 15)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_alpha0_rejects_nonpositive_beta(cat12):
    with pytest.raises(TailDiverges):
        alpha0(0.0, cat12)
    with pytest.raises(TailDiverges):
        alpha(-1.0, cat12)


def test_alpha0_tail_diverges_below_log4(cat12):
    with pytest.raises(TailDiverges):
        alpha0(1.2, cat12)


def test_alpha_bracket_ordered(cat12):
    for beta in np.linspace(0.6, 3.0, 13):
        br = alpha(float(beta), cat12)
        # exact sup over catalog classes lies inside the bracket
        exact = max(neighbor_sum(float(beta), cat12, c.id) / c.length for c in cat12.classes)
        assert br.lower <= exact + 1e-12
        assert exact <= br.upper + 1e-12


def test_alpha_bracket_contains_longer_catalog(cat8, cat12):
    # the L=8 bracket plus its tail bound covers the L=12 truncated value
    for beta in (1.5, 2.0, 3.0):
        assert alpha(beta, cat12).upper <= alpha(beta, cat8).upper_certified
        assert alpha(beta, cat8).upper <= alpha(beta, cat12).upper


def test_beta_star_bracket(cat12):
    lo, hi = beta_star(cat12, tol=1e-6)
    assert hi - lo <= 1e-6
    assert alpha_upper(hi, cat12) < 1 <= alpha_upper(lo, cat12)
    # frozen regression value of the truncated bracket
    assert lo == pytest.approx(0.99528, abs=1e-4)


def test_beta_star_contracts_with_refinement(cat12):
    wide = beta_star(cat12, tol=1e-2)
    narrow = beta_star(cat12, tol=1e-5)
    assert wide[0] <= narrow[0] and narrow[1] <= wide[1]
    with pytest.raises(ValueError):
        beta_star(cat12, tol=0)


def test_beta_star_grows_with_catalog():
    vals = [beta_star(get_catalog(L))[1] for L in (6, 8, 10, 12)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_offspring_mean(cat8):
    sq = unit_square()
    assert offspring_mean(sq, sq.translate(1, 1), 2.0) == pytest.approx(math.exp(-8))
    assert offspring_mean(sq, sq.translate(2, 0), 2.0) == 0.0
    g = cat8.instance(sq)
    assert offspring_mean(g, (g[0], 1, 0), 2.0, cat8) == pytest.approx(math.exp(-8))
    with pytest.raises(ValueError):
        offspring_mean(g, g, 2.0)


def test_mean_matrix_entries(cat8):
    K = mean_matrix(1.5, cat8)
    sq = cat8.instance(unit_square())[0]
    assert K[sq, sq] == pytest.approx(9 * math.exp(-6))


@pytest.mark.parametrize("beta", [1.0, 1.5, 2.0])
def test_weighted_generation_masses_bounded(cat8, beta):
    """Sum over generation-n descendants of |h| is at most |g| alpha^n."""
    a = alpha(beta, cat8).upper
    gm = generation_means(beta, cat8, 3)
    for n in (1, 2, 3):
        assert np.all(gm[n] <= cat8.lengths * a ** n * (1 + 1e-12))


def test_simulated_generation_means(cat8):
    beta = 1.0
    root = cat8.instance(unit_square())
    gm = generation_means(beta, cat8, 3, weighted=False)
    runs = [simulate_branching(root, 3, beta, cat8, seed=s) for s in range(4000)]
    sizes = np.array([r.sizes for r in runs], dtype=float)
    for n in (1, 2, 3):
        m, se = sizes[:, n].mean(), sizes[:, n].std(ddof=1) / math.sqrt(len(sizes))
        assert abs(m - gm[n][root[0]]) < 3.5 * se + 1e-9


def test_simulate_branching_edge_cases(cat8):
    root = cat8.instance(unit_square())
    r = simulate_branching(root, 0, 1.0, cat8, seed=1)
    assert r.sizes == [1] and r.masses == [4]
    with pytest.raises(ValueError):
        simulate_branching(root, -1, 1.0, cat8, seed=1)
    with pytest.raises(PopulationExplosion):
        simulate_branching(root, 40, 0.3, cat8, seed=1, node_cap=50)
    a = simulate_branching(root, 3, 1.0, cat8, seed=9, keep_nodes=True)
    b = simulate_branching(root, 3, 1.0, cat8, seed=9, keep_nodes=True)
    assert a == b


def test_extinction_more_likely_at_larger_beta(cat8):
    root = cat8.instance(unit_square())
    ext = []
    for beta in (0.8, 1.5):
        alive = sum(simulate_branching(root, 3, beta, cat8, seed=s).sizes[3] > 0 for s in range(1500))
        ext.append(1 - alive / 1500)
    assert ext[0] < ext[1]


@pytest.mark.parametrize("beta", [0.8, 1.2])
def test_coupled_domination_contains_clans(cat8, beta):
    w = [Plaquette(0, 0, X)]
    failures = 0
    for s in range(150):
        f = FieldRealization(cat8, beta, s)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            clan = explore_clan(w, f)
        r = coupled_domination_check(clan, f, seed=s)
        failures += not r.contained
        assert len(r.branching_sizes) >= len(r.clan_sizes)
    assert failures == 0


def test_bound_report_values(cat12):
    r = bound_report(1.5, cat12)
    assert r.subcritical
    assert r.rho == pytest.approx((1 - r.alpha_upper) / (2 - r.alpha_upper))
    assert r.M3 == pytest.approx(1.5 - r.beta_tilde)
    assert r.M2 == pytest.approx(1 / (1 - r.alpha_tilde))
    assert r.beta_star[1] < r.beta_tilde < 1.5
    assert "alpha_upper" in r.as_text()
    with pytest.raises(DomainError):
        bound_report(1.5, cat12, beta_tilde=2.0)


def test_bound_report_supercritical(cat12):
    r = bound_report(0.9, cat12)
    assert not r.subcritical and r.rho is None and r.M2 is None
    with pytest.raises(DomainError):
        Bounds(r, cat12).tl_tail(1.0)


def test_bounds_relations(cat12):
    b = Bounds(bound_report(1.5, cat12), cat12)
    r = b.r
    assert b.tl_tail(0.0) == pytest.approx(r.alpha0)
    for t in (1.0, 3.0):
        assert b.tl_tail_gamma(t) / b.tl_tail(t) == pytest.approx(1 / (r.alpha_upper * (1 - r.alpha_upper)))
        assert b.r_t(4, t) == pytest.approx(4 * math.exp((r.alpha_upper - 1) * t))
    # the exponential moment bound tends to the mean bound as a -> 0
    a = 1e-4
    assert b.sw_mgf(a) == pytest.approx(b.sw_mean, rel=1e-2)
    assert b.sw_mgf(a) > b.sw_mean
    with pytest.raises(DomainError):
        b.sw_mgf(1.5)
    assert b.sw_tail(0.0) == pytest.approx(r.alpha0_tilde / (1 - r.alpha_tilde))
    assert b.sw_tail(10.0) < b.sw_tail(5.0)
    with pytest.raises(DomainError):
        b.sw_tail(3.0, beta_tilde=0.5)
    assert b.time_conv(0.0, 4) == pytest.approx(8 * r.alpha0 / r.rho)
    d = [1.0, 2.0]
    assert b.space_conv(d) == pytest.approx(
        2 * r.alpha0_tilde * r.M2 * sum(math.exp(-r.M3 * x) for x in d))
    assert b.mixing([3.0]) == pytest.approx(2 * r.M2 ** 2 * 3.0 * math.exp(-r.M3 * 3.0))
