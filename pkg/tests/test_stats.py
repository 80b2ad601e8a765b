import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recoup.dynamics import MapSpec
from recoup.stats import (DegenerateSample, Observable, birkhoff, bound_params, hill,
                          levy_prokhorov, loglinear_r2, lp_within_sqrt_w1, normal_ks, survival,
                          tail_exponent, trend_vs_log, tv_geometric, tv_noise_floor,
                          wasserstein_p, z_stabilized)

DBL = MapSpec.doubling()


@pytest.fixture(scope="module")
def pareto2():
    rng = np.random.default_rng(2024)
    return (1 - rng.random(10**5)) ** -0.5


def test_observable_centered():
    v = Observable.centered(0.3)
    assert v(0.3) == pytest.approx(0.0)
    assert v(1.0) == pytest.approx(0.7)
    assert v.v_inf == pytest.approx(0.7)
    with pytest.raises(ValueError):
        Observable.from_grid([1.0, np.nan])


def test_birkhoff_doubling():
    v = Observable.centered(0.5)
    # orbit 0.3, 0.6, 0.2
    np.testing.assert_allclose(birkhoff(v, 0.3, 3, DBL), [0.0, -0.2, -0.1, -0.4], atol=1e-12)
    np.testing.assert_array_equal(birkhoff(v, 0.3, 0, DBL), [0.0])
    with pytest.raises(ValueError):
        birkhoff(v, 0.3, -1, DBL)


def test_survival():
    x, S = survival([3.0, 1.0, 2.0, 2.0])
    np.testing.assert_array_equal(x, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(S, [1.0, 0.75, 0.25])


def test_hill_pareto(pareto2):
    rep = tail_exponent(pareto2)
    assert rep.hill == pytest.approx(2.0, abs=0.15)
    assert rep.ci[0] < rep.hill < rep.ci[1]
    assert not rep.non_polynomial
    assert rep.loglog == pytest.approx(2.0, abs=0.3)


def test_hill_small_shift(pareto2):
    # a shift biases Hill by about alpha c / u_k, small against the CI here
    rep = tail_exponent(pareto2)
    assert rep.ci[0] <= hill(pareto2 + 0.5) <= rep.ci[1]


def test_exponential_flagged():
    s = np.random.default_rng(5).exponential(size=10**5)
    assert tail_exponent(s).non_polynomial
    r2, slope = loglinear_r2(s)
    assert r2 >= 0.98 and slope == pytest.approx(-1.0, abs=0.1)


def test_tail_exponent_degenerate():
    with pytest.raises(DegenerateSample):
        tail_exponent(np.ones(20000))
    with pytest.raises(DegenerateSample):
        tail_exponent(np.arange(10.0))
    with pytest.raises(DegenerateSample):
        hill(np.zeros(1000))


def test_wasserstein_examples():
    assert wasserstein_p([0.0, 1.0], [1.0, 2.0]) == pytest.approx(1.0)
    u = np.random.default_rng(0).random(10**5)
    assert wasserstein_p(u, u + 0.3, p=2) == pytest.approx(0.3, abs=0.01)
    assert wasserstein_p(u, u[: 5 * 10**4]) < 0.01
    with pytest.raises(ValueError):
        wasserstein_p(u, u, p=0.5)
    with pytest.raises(ValueError):
        wasserstein_p(np.zeros((3, 2)), np.zeros((3, 2)))


@settings(max_examples=30, deadline=None)
@given(c=st.floats(-5, 5), n=st.integers(1, 50))
def test_wasserstein_translation(c, n):
    a = np.linspace(0, 1, n)
    assert wasserstein_p(a, a + c) == pytest.approx(abs(c), abs=1e-12)


def test_levy_prokhorov_examples():
    assert levy_prokhorov([0.0] * 5, [0.0] * 5) == 0.0
    assert levy_prokhorov([0.0], [0.2]) == pytest.approx(0.2, abs=1e-5)
    assert levy_prokhorov([0.0], [1.0]) == 1.0
    # shifted uniforms: F(x) <= F(x - (c - eps)) + eps first holds at eps = c/2
    u = np.random.default_rng(1).random(10**5)
    lp, w1, ok = lp_within_sqrt_w1(u, u + 0.05)
    assert ok and lp == pytest.approx(0.025, abs=0.002)


def test_tv_geometric():
    xi = 0.01
    rng = np.random.default_rng(3)
    s = rng.geometric(xi, 10**5) - 1
    tv = tv_geometric(s, xi)
    floor = tv_noise_floor(xi, s.size)
    assert 0.5 * floor < tv < 2 * floor
    # a wrong rate is far above the floor
    assert tv_geometric(rng.geometric(2 * xi, 10**5) - 1, xi) > 0.2


def test_tv_noise_floor_scaling():
    assert tv_noise_floor(0.01, 4 * 10**4) == pytest.approx(tv_noise_floor(0.01, 10**4) / 2,
                                                            rel=1e-9)


def test_trend_vs_log():
    rows = np.random.default_rng(2).normal(size=(500, 4))
    ns = [10, 100, 1000, 10000]
    slope, ci, base = trend_vs_log(ns, lambda r: rows[r].mean(axis=0), 500, n_boot=100)
    assert ci[0] <= 0 <= ci[1]
    slope, ci, _ = trend_vs_log(ns, lambda r: np.log(ns) + rows[r].mean(axis=0), 500, n_boot=100)
    assert slope == pytest.approx(1.0, abs=0.1) and ci[0] > 0


def test_normal_ks():
    z = np.random.default_rng(4).normal(0, 3, 10**4)
    ks, loc, scale = normal_ks(z)
    assert ks < 0.02 and scale == pytest.approx(3, rel=0.03)


def test_z_stabilized():
    assert z_stabilized([1, 2, 3, 4], [1, 2, 5, 4]) == 0.75


def test_bound_params(doubling, lsv):
    d = bound_params(doubling.map, doubling.h, doubling.engine.c)
    assert d["kind"] == "stretched_exp" and d["alpha"] == pytest.approx(math.log(2))
    assert d["C_tau"] == pytest.approx(2.0, rel=1e-6)
    p = bound_params(lsv.map, lsv.h, lsv.engine.c)
    assert p["kind"] == "weak_poly" and p["beta"] == pytest.approx(2.0)
