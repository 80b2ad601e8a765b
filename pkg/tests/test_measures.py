import json

import numpy as np
import pytest
from scipy import stats

from recoup.density import GridDensity, grid_nodes
from recoup.dynamics import preimages_of_half
from recoup.measures import (DeficitError, TowerQuadrature, check_regularity, m_tail,
                             mu_from_half, mu_tail, sample_initial, spec_custom,
                             spec_lebesgue, spec_mu, tau_bar)
from recoup.regen import RegularityError, mu_cdf


def test_tau_bar_doubling(doubling):
    assert tau_bar(doubling.map, doubling.h, 60) == pytest.approx(2.0, abs=1e-9)


def test_tau_bar_lsv_converges(lsv):
    a = tau_bar(lsv.map, lsv.h, 10**4)
    b = tau_bar(lsv.map, lsv.h, 10**5)
    assert a == pytest.approx(b, rel=0.01)
    # without the remainder estimate the truncated sum falls short
    assert tau_bar(lsv.map, lsv.h, 10**4, tail_correction=False) < b


def test_tau_bar_matches_tower_quadrature(lsv):
    # the tower quadrature sums mu(tau > k) pointwise over Y, an independent
    # route to the same mean
    q = TowerQuadrature.build(lsv.map, lsv.h, K=4096)
    truncated = tau_bar(lsv.map, lsv.h, 4097, tail_correction=False)
    assert q.mass == pytest.approx(truncated, rel=1e-3)


def test_return_tail_slopes(lsv):
    n = np.unique(np.geomspace(10, 10**4, 40).astype(int))
    for tail in (mu_tail(lsv.map, lsv.h, n), m_tail(lsv.map, n)):
        slope = np.polyfit(np.log(n), np.log(tail), 1)[0]
        assert slope == pytest.approx(-2.0, abs=0.15)


def test_mu_from_half_small_s():
    h = GridDensity(np.ones(11))
    assert mu_from_half(h, 1e-20) == pytest.approx(2e-20, rel=1e-12)


def test_spec_mu(lsv):
    s = spec_mu(lsv.map)
    assert s.jump_pmf(0) == 1.0 and s.jump_tail(1) == 0.0
    assert len(s) == 1


def test_spec_lebesgue_weights(lsv):
    s = spec_lebesgue(lsv.map, 1000)
    assert s.weights.sum() + s.deficit == pytest.approx(1.0, abs=1e-12)
    first = s.components(limit=1)[0]
    assert first.kind == "lebesgue_left"
    assert first.support == (float(preimages_of_half(lsv.map, 1)[1]), 0.5)
    assert s.jump_pmf(0) == 0.0


def test_spec_acip_jump_law(lsv):
    s = lsv.spec("acip")
    tb = s.meta["tau_bar"]
    # kappa(r = 1) = mu(tau >= 1) / tau_bar
    assert s.jump_pmf(1) == pytest.approx(1 / tb, rel=1e-6)
    assert s.jump_pmf(0) == 0.0
    assert s.deficit < 1e-5


def test_spec_acip_doubling_is_lebesgue(doubling):
    s = doubling.spec("acip")
    assert s.meta["tau_bar"] == pytest.approx(2.0, abs=1e-9)
    nodes = s.tower_nodes()
    assert nodes[0].jump == 1 and nodes[0].weight == pytest.approx(0.25)


def test_spec_summary_json(lsv):
    d = json.loads(lsv.spec("lebesgue").to_json())
    assert d["name"] == "lebesgue" and d["components"] == 2 * 10**5


def test_check_regularity(lsv):
    e = lsv.engine
    assert check_regularity(lsv.spec("lebesgue"), e) <= 1.05 * e.c.R_prime
    big = spec_lebesgue(lsv.map, 10**5)
    assert big.max_index <= e.tau_max


def test_spec_beyond_engine(doubling):
    s = spec_lebesgue(doubling.map, 64)
    small = type(s)(s.name, s.map, s.kinds, s.idxs + 10, s.nlev, s.weights, s.deficit)
    with pytest.raises(DeficitError):
        sample_initial(small, doubling.engine, 10, 0)


def test_spec_custom(lsv):
    x = grid_nodes(64)
    s = spec_custom(lsv.map, GridDensity(1 + 0.2 * x, "mu"), lsv.engine)
    assert s.jump_pmf(0) == 1.0
    with pytest.raises(RegularityError):
        spec_custom(lsv.map, GridDensity(np.exp(40 * x), "mu"), lsv.engine)


def test_sample_initial_mu(lsv):
    out = sample_initial(spec_mu(lsv.map), lsv.engine, 50000, seed=1)
    assert out.discarded == 0
    ks = stats.kstest(out.x, lambda y: mu_cdf(lsv.h, y)).statistic
    assert ks < 0.01


def test_sample_initial_lebesgue(lsv):
    out = sample_initial(lsv.spec("lebesgue"), lsv.engine, 50000, seed=2)
    assert stats.kstest(out.x, "uniform").statistic < 0.01
    assert np.all(out.jump >= 1)


def test_sample_initial_acip_doubling(doubling):
    out = sample_initial(doubling.spec("acip"), doubling.engine, 50000, seed=3)
    assert stats.kstest(out.x, "uniform").statistic < 0.01
    assert out.jump.mean() == pytest.approx(2.0, rel=0.03)


def test_sample_initial_deterministic(lsv):
    a = sample_initial(lsv.spec("lebesgue"), lsv.engine, 100, seed=9).x
    b = sample_initial(lsv.spec("lebesgue"), lsv.engine, 100, seed=9).x
    np.testing.assert_array_equal(a, b)
