"""End-to-end acceptance checks. Each test records a PASS/FAIL line in the
terminal summary before asserting; tolerances are pinned below."""
import time

import numpy as np
import pytest
from scipy import stats as sps

from conftest import ACCEPTANCE
from recoup import _engine as eng
from recoup.coupling import orbit_consistency, sample_joints, sample_pair, sample_pairs
from recoup.density import invariant_density
from recoup.dynamics import MapSpec
from recoup.measures import m_tail, mu_tail, sample_initial, tau_bar
from recoup.regen import mu_cdf
from recoup.stats import (Observable, bound_params, clt_check, discrepancy_Z, hill,
                          loglinear_r2, lp_within_sqrt_w1, shift_tail_bound, tail_exponent,
                          trend_vs_log, tv_geometric, tv_noise_floor, wasserstein_p)

SAMPLES = 10**5

# 1: doubling ground truth
DOUBLING_H_SUP = 1e-6
KAC_REL = 0.01
GROUND_TRUTH_SECONDS = 10
# 2: return tails
TAIL_RANGE = (10, 10**4)
TAIL_SLOPE = -2.0
TAIL_SLOPE_TOL = 0.15
TAIL_SECONDS = 60
# 3: regeneration law
TV_MAX = 0.01
REGEN_SECONDS = 5 * 60
# 4: coupling marginals
KS_MARGINAL = 0.01
MARGINAL_SECONDS = 10 * 60
# 5: structural merging
STRUCTURAL_PAIRS = 2000
ORBIT_ROUNDOFF = 1e-8
# 6: exponent ladder
HILL_M_MU = 1.7
HILL_WITH_RHO = 0.8
LADDER_SECONDS = 20 * 60
# 7: exponential regime
LOGLINEAR_MIN = 0.98
# 8: distance uniformity
DISTANCE_NS = (10, 100, 1000, 10000)
DISTANCE_SECONDS = 15 * 60
# 9: CLT
CLT_N = 10**4
CLT_SAMPLES = 10**4
CLT_KS = 0.05
CLT_NS = (100, 1000, 10000)
# 10: estimator calibration
PARETO_TOL = 0.15
W1_SHIFT_TOL = 0.01

SEED = 20240601


def record(key, ok, detail):
    ACCEPTANCE[key] = (bool(ok), detail)
    assert ok, detail


def timed(fn, *a, **kw):
    t0 = time.perf_counter()
    out = fn(*a, **kw)
    return out, time.perf_counter() - t0


# ----------------------------------------------------------------------------
# shared samples

@pytest.fixture(scope="module")
def lsv_words(lsv):
    return timed(lsv.engine.words, SAMPLES, SEED)


@pytest.fixture(scope="module")
def mu_pairs(lsv):
    # pairs from mu: the coupled first coordinate is pulled back through the word
    return timed(sample_pairs, lsv.spec("mu"), lsv.engine, SAMPLES, SEED + 1)


@pytest.fixture(scope="module")
def lsv_observable(lsv):
    return Observable.centered_for(lsv.map, lsv.h)


@pytest.fixture(scope="module")
def lsv_joint(lsv, lsv_observable):
    # x ~ m and y ~ rho, both coupled to the same u ~ mu
    J, dt = timed(sample_joints, lsv.spec("lebesgue"), lsv.spec("acip"), lsv.engine, SAMPLES,
                  SEED + 2, horizon=max(DISTANCE_NS) // 2, observable=lsv_observable,
                  checkpoints=DISTANCE_NS)
    return J, dt


@pytest.fixture(scope="module")
def direct(lsv):
    out = {}
    for i, name in enumerate(("mu", "lebesgue", "acip")):
        s, dt = timed(sample_initial, lsv.spec(name), lsv.engine, SAMPLES, SEED + 10 + i)
        out[name] = (s.x, dt)
    return out


# ----------------------------------------------------------------------------

def test_01_doubling_ground_truth():
    t0 = time.perf_counter()
    dbl = MapSpec.doubling()
    inv = invariant_density(dbl)
    sup = float(np.max(np.abs(inv.h.values - 1.0)))
    tb = tau_bar(dbl, inv.h, 60)
    # Kac: the mean return time is 1 / rho(Y), and rho is Lebesgue here
    kac = 1.0 / 0.5
    dt = time.perf_counter() - t0
    ok = sup <= DOUBLING_H_SUP and abs(tb - kac) <= KAC_REL * kac and dt < GROUND_TRUTH_SECONDS
    record("1 doubling ground truth", ok,
           f"sup|h-1|={sup:.2e} (<= {DOUBLING_H_SUP}), tau_bar={tb:.6f} vs {kac} "
           f"(within {KAC_REL:.0%}), {dt:.2f}s (< {GROUND_TRUTH_SECONDS}s)")


def test_02_return_tail_exponent():
    t0 = time.perf_counter()
    lsv = MapSpec.lsv(0.5)
    h = invariant_density(lsv).h
    n = np.unique(np.geomspace(*TAIL_RANGE, 60).astype(np.int64))
    slopes = {}
    for name, tail in (("mu", mu_tail(lsv, h, n)), ("m", m_tail(lsv, n))):
        slopes[name] = float(np.polyfit(np.log(n), np.log(tail), 1)[0])
    dt = time.perf_counter() - t0
    ok = all(abs(s - TAIL_SLOPE) <= TAIL_SLOPE_TOL for s in slopes.values()) and dt < TAIL_SECONDS
    record("2 return-tail exponent", ok,
           f"slopes mu={slopes['mu']:.4f} m={slopes['m']:.4f} (target {TAIL_SLOPE} "
           f"+- {TAIL_SLOPE_TOL}), {dt:.1f}s (< {TAIL_SECONDS}s)")


def test_03_regeneration_law(lsv, doubling, lsv_words):
    parts = []
    ok = True
    runs = {"lsv": lsv_words}
    runs["doubling"] = timed(doubling.engine.words, SAMPLES, SEED)
    for name, ((ells, ts, status, _, diag), dt) in runs.items():
        xi = (lsv if name == "lsv" else doubling).engine.c.xi
        good = ells[status == eng.OK]
        tv = tv_geometric(good, xi)
        floor = tv_noise_floor(xi, good.size)
        viol = diag.total_violations
        ok &= tv < TV_MAX and viol == 0 and dt < REGEN_SECONDS and good.size == SAMPLES
        parts.append(f"{name}: TV={tv:.4f} (< {TV_MAX}; sampling floor {floor:.4f}), "
                     f"xi={xi:.4g}, violations={viol}, {dt:.0f}s")
    record("3 regeneration law", ok, "; ".join(parts) + f" (< {REGEN_SECONDS}s)")


def test_04_coupling_marginals(lsv, mu_pairs, lsv_joint, direct):
    P, dt_p = mu_pairs
    J, dt_j = lsv_joint
    P, J = P.accepted(), J.accepted()
    ks = {
        "mu": sps.ks_2samp(P.x, direct["mu"][0]).statistic,
        "lebesgue": sps.ks_2samp(J.x, direct["lebesgue"][0]).statistic,
        "acip": sps.ks_2samp(J.y, direct["acip"][0]).statistic,
        "second(mu pairs)": sps.ks_2samp(P.y, direct["mu"][0]).statistic,
        "second(joint)": sps.ks_2samp(J.u, direct["mu"][0]).statistic,
    }
    # the hub's law against the exact CDF as well
    ks_exact = sps.kstest(J.u, lambda y: mu_cdf(lsv.h, y)).statistic
    dt = dt_p + dt_j + sum(v[1] for v in direct.values())
    ok = max(ks.values()) < KS_MARGINAL and ks_exact < KS_MARGINAL and dt < MARGINAL_SECONDS
    detail = ", ".join(f"{k}={v:.4f}" for k, v in ks.items())
    record("4 coupling marginals", ok,
           f"KS {detail}, u vs exact mu CDF={ks_exact:.4f} (< {KS_MARGINAL}); "
           f"{P.x.size}+{J.x.size} samples in {dt:.0f}s (< {MARGINAL_SECONDS}s; "
           f"joint run includes horizon {max(DISTANCE_NS) // 2} Birkhoff sums)")


def test_05_structural_merging(lsv, lsv_joint, lsv_observable):
    rng = np.random.default_rng(SEED + 3)
    v = lsv_observable
    bad_end = bad_s = bad_orbit = bad_z = 0
    for i in range(STRUCTURAL_PAIRS):
        name = ("lebesgue", "acip")[i % 2]
        p = sample_pair(lsv.spec(name), lsv.engine, rng)
        bad_end += p.orbit[p.shift] != p.y or p.orbit[0] != p.x
        bad_s += not p.s() <= p.shift
        bad_orbit += orbit_consistency(lsv.map, p.orbit) > ORBIT_ROUNDOFF
        if i < 200:
            z, bound = discrepancy_Z(p, v, 2000, lsv.map)
            bad_z += z > bound
    J = lsv_joint[0].accepted()
    two_v = 2 * v.v_inf
    z_fail = int(np.sum(J.z_xu > two_v * J.shift_x + 1e-9)
                 + np.sum(J.z_yu > two_v * J.shift_y + 1e-9)
                 + np.sum(J.z_xy > two_v * J.s_bound + 1e-9))
    ok = bad_end == bad_s == bad_orbit == bad_z == z_fail == 0
    record("5 structural merging", ok,
           f"{STRUCTURAL_PAIRS} pairs: endpoint mismatches={bad_end}, s > shift={bad_s}, "
           f"orbit round-off > {ORBIT_ROUNDOFF}={bad_orbit}, Z_trunc > 2|v|s={bad_z}; "
           f"{J.x.size} joint samples (3 pairings each): Z_trunc > 2|v|s={z_fail}")


def test_06_exponent_ladder(lsv, lsv_joint, lsv_observable):
    J, dt = lsv_joint
    J = J.accepted()
    two_v = 2 * lsv_observable.v_inf
    params = bound_params(lsv.map, lsv.h, lsv.engine.c)
    m_tail_fn = lsv.spec("lebesgue").jump_tail
    rho_tail_fn = lsv.spec("acip").jump_tail
    cases = {
        "(m,mu)": (J.shift_x, [m_tail_fn], HILL_M_MU),
        "(rho,mu)": (J.shift_y, [rho_tail_fn], HILL_WITH_RHO),
        "(m,rho)": (J.s_bound, [m_tail_fn, rho_tail_fn], HILL_WITH_RHO),
    }
    ok = dt < LADDER_SECONDS and J.diagnostics.total_violations == 0
    parts = []
    for name, (shift, sides, need) in cases.items():
        z = two_v * shift
        rep = tail_exponent(z, seed=SEED)
        x = np.unique(z)
        S = 1.0 - np.searchsorted(np.sort(z), x, side="left") / z.size
        overlay = shift_tail_bound(params, sides, x / two_v)
        below = bool(np.all(S <= overlay))
        ok &= rep.hill >= need and below
        parts.append(f"{name} hill={rep.hill:.3f} CI=({rep.ci[0]:.3f},{rep.ci[1]:.3f}) "
                     f"(>= {need}), below overlay={below}")
    record("6 exponent ladder", ok, "; ".join(parts) + f"; {J.x.size} samples in {dt:.0f}s "
           f"(< {LADDER_SECONDS}s)")


def test_07_exponential_regime(doubling):
    P = sample_pairs(doubling.spec("lebesgue"), doubling.engine, SAMPLES, SEED + 4).accepted()
    r2, slope = loglinear_r2(P.s_bound)
    r2_log, _ = loglinear_r2(P.s_bound, log_x=True)
    rep = tail_exponent(P.s_bound, seed=SEED)
    ok = r2 >= LOGLINEAR_MIN
    record("7 exponential regime", ok,
           f"doubling s_bound: log-linear R^2={r2:.4f} (>= {LOGLINEAR_MIN}), slope={slope:.4g}, "
           f"log-log R^2={r2_log:.4f}, non-polynomial flag={rep.non_polynomial}")


def test_08_distance_uniformity(lsv_joint):
    J, dt = lsv_joint
    t0 = time.perf_counter()
    J = J.accepted()
    col = {c: i for i, c in enumerate(J.checkpoints)}
    # X_n from m, Y_n from mu: the pair whose coupling time has a finite mean
    X, Y = J.bx, J.bu
    w1, lp, holds = [], [], []
    for n in DISTANCE_NS:
        a, b, c = lp_within_sqrt_w1(X[:, col[n]], Y[:, col[n]])
        lp.append(a)
        w1.append(b)
        holds.append(c)

    def w1_rows(rows):
        return [wasserstein_p(X[rows, col[n]], Y[rows, col[n]]) for n in DISTANCE_NS]

    slope, ci, _ = trend_vs_log(DISTANCE_NS, w1_rows, X.shape[0], seed=SEED)
    dt += time.perf_counter() - t0
    ok = ci[0] <= 0 and all(holds) and dt < DISTANCE_SECONDS
    fmt = lambda v: "[" + ", ".join(f"{u:.3g}" for u in v) + "]"
    record("8 distance uniformity", ok,
           f"(m,mu) W1 at n={list(DISTANCE_NS)}: {fmt(w1)}, slope vs log n={slope:.3f} "
           f"CI=({ci[0]:.3f},{ci[1]:.3f}) (needs low end <= 0); LP={fmt(lp)}, "
           f"LP <= sqrt(W1) at every n={all(holds)}; {dt:.0f}s (< {DISTANCE_SECONDS}s); "
           f"median shift_x={np.median(J.shift_x):.0f}")


@pytest.mark.parametrize("which", ["doubling", "lsv04"])
def test_09_clt(which, request):
    sys_ = request.getfixturevalue(which)
    v = Observable.centered_for(sys_.map, sys_.h)
    rho = sys_.spec("acip")
    direct_rep = clt_check(rho, v, CLT_N, CLT_SAMPLES, SEED + 5, sys_.engine)
    coupled = clt_check(sys_.spec("lebesgue"), v, CLT_N, CLT_SAMPLES, SEED + 6, sys_.engine,
                        compare=rho, ns=CLT_NS)
    w = [coupled.w1_by_n[n] for n in CLT_NS]
    decreasing = all(b < a for a, b in zip(w, w[1:]))
    ok = direct_rep.ks < CLT_KS and coupled.ks < CLT_KS and decreasing
    record(f"9 CLT {which}", ok,
           f"KS rho={direct_rep.ks:.4f}, KS m={coupled.ks:.4f} (< {CLT_KS}) at n={CLT_N}, "
           f"{CLT_SAMPLES} samples; W1(m, rho) of v_n/sqrt(n) at n={list(CLT_NS)}: "
           + ", ".join(f"{u:.4f}" for u in w) + f" decreasing={decreasing}")


def test_10_estimator_calibration():
    rng = np.random.default_rng(SEED + 7)
    pareto = (1 - rng.random(SAMPLES)) ** -0.5
    a = hill(pareto)
    u = rng.random(SAMPLES)
    shift = 0.37
    w = wasserstein_p(u, rng.random(SAMPLES) + shift)
    ok = abs(a - 2.0) <= PARETO_TOL and abs(w - shift) <= W1_SHIFT_TOL
    record("10 estimator calibration", ok,
           f"Hill on Pareto(2)={a:.4f} (+- {PARETO_TOL}); W1 of uniforms shifted by {shift}"
           f"={w:.4f} (+- {W1_SHIFT_TOL})")
