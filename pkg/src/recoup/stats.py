"""Observables and Birkhoff sums, the discrepancy Z, tail exponents and
one-dimensional probability metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import _engine as eng
from .dynamics import DOUBLING, MapSpec, orbit as _orbit

K_FRAC_SWEEP = (0.005, 0.01, 0.02)
# Hill estimates growing by more than this factor as k_frac shrinks from
# 0.02 to 0.005 mark a tail lighter than any power
NONPOLY_RATIO = 1.2
# a survival curve this close to log-linear, and closer than to log-log,
# is read as exponential
LOGLINEAR_R2 = 0.98


class DegenerateSample(ValueError):
    pass


# ----------------------------------------------------------------------------
# observables

@dataclass(frozen=True)
class Observable:
    """v tabulated on a uniform grid over [0, 1] (linear in between).
    coordinate_centered is v(x) = x - center, held exactly by two nodes."""
    kind: str
    table: np.ndarray = field(repr=False)
    center: float = 0.0
    dimension: int = 1

    def __post_init__(self):
        t = np.ascontiguousarray(self.table, float)
        if t.ndim != 1 or t.size < 2 or not np.all(np.isfinite(t)):
            raise ValueError("observable table must be a finite 1-d array")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @classmethod
    def centered(cls, center: float) -> "Observable":
        return cls("coordinate_centered", np.array([-center, 1.0 - center]), float(center))

    @classmethod
    def centered_for(cls, map: MapSpec, h, quad=None) -> "Observable":
        """v(x) = x - int x drho, the mean taken by tower quadrature."""
        from .measures import TowerQuadrature
        quad = quad or TowerQuadrature.build(map, h)
        return cls.centered(quad.mean())

    @classmethod
    def from_grid(cls, values, center: float = 0.0) -> "Observable":
        return cls("user_grid", np.asarray(values, float) - center, float(center))

    @classmethod
    def constant(cls, value: float = 1.0) -> "Observable":
        return cls("user_grid", np.array([value, value]))

    @property
    def v_inf(self) -> float:
        # a piecewise-linear function peaks at a node
        return float(np.max(np.abs(self.table)))

    def __call__(self, x):
        grid = np.linspace(0.0, 1.0, self.table.size)
        return np.interp(x, grid, self.table)


def birkhoff(v: Observable, x: float, n: int, map: MapSpec) -> np.ndarray:
    """v_0, ..., v_n along the float orbit of x (v_0 = 0)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    orb = _orbit(map, x, n)
    out = np.zeros(n + 1)
    np.cumsum(v(orb[:-1]), out=out[1:])
    return out


def z_stabilized(z_n, z_2n) -> float:
    """Fraction of samples whose truncated Z does not move between N and 2N."""
    z_n, z_2n = np.asarray(z_n), np.asarray(z_2n)
    return float(np.mean(z_n == z_2n))


def discrepancy_Z(pair, v: Observable, horizon: int, map: MapSpec):
    """(Z_trunc, Z_bound) for a coupled pair or joint triple.

    Z_trunc = max_{n <= horizon} |v_n(x) - v_n(y)| on the merged orbits and
    Z_bound = 2 |v|_inf s_bound. Both orbits continue from the common point
    by the same forward iterates."""
    if hasattr(pair, "orbit_x"):
        oa, sa = pair.orbit_x, pair.shift_x
        ob, sb = pair.orbit_y, pair.shift_y
    else:
        oa, sa = pair.orbit, pair.shift
        ob, sb = pair.orbit[pair.shift:], 0
    bound = 2.0 * v.v_inf * pair.s_bound
    extra = horizon + max(sa, sb)
    tail = np.empty(extra + 1)
    tail[0] = oa[sa]
    g, c, refill = map.g, map.c, map.family == DOUBLING
    eng.forward(float(oa[sa]), extra, g, c, refill, tail, 0)
    xa = np.concatenate([oa[: sa + 1], tail[1:]])[: horizon + 1]
    xb = np.concatenate([ob[: sb + 1], tail[1:]])[: horizon + 1]
    da = np.concatenate([[0.0], np.cumsum(v(xa[:-1]))])
    db = np.concatenate([[0.0], np.cumsum(v(xb[:-1]))])
    z = float(np.max(np.abs(da - db))) if horizon > 0 else 0.0
    if z > bound * (1 + 1e-12) + 1e-12:
        raise AssertionError(f"Z_trunc {z} exceeds 2|v| s = {bound}")
    return z, bound


# ----------------------------------------------------------------------------
# tails

def survival(samples) -> tuple:
    """Distinct values x and empirical P(X >= x)."""
    s = np.sort(np.asarray(samples, float))
    x, first = np.unique(s, return_index=True)
    return x, 1.0 - first / s.size


def hill(samples, k_frac: float = 0.01) -> float:
    """Hill estimate of the tail exponent from the top k order statistics."""
    s = np.asarray(samples, float)
    k = max(int(k_frac * s.size), 2)
    if k >= s.size:
        raise DegenerateSample("k_frac too large for the sample")
    top = np.partition(s, s.size - k - 1)[s.size - k - 1:]
    thr = top.min()
    if thr <= 0:
        raise DegenerateSample("Hill needs positive order statistics")
    logs = np.log(top[top > thr] / thr) if np.any(top > thr) else np.array([])
    denom = logs.sum()
    if denom <= 0:
        raise DegenerateSample("top order statistics are all equal")
    return float(k / denom)


def loglog_slope(samples, lo: float, hi: float) -> float:
    """-slope of log P(X >= x) against log x over survival levels in [lo, hi]."""
    x, S = survival(samples)
    m = (S >= lo) & (S <= hi) & (x > 0)
    if m.sum() < 3:
        return float("nan")
    slope = np.polyfit(np.log(x[m]), np.log(S[m]), 1)[0]
    return float(-slope)


def loglinear_r2(samples, decades: float = 3.0, min_count: int = 10, log_x: bool = False):
    """R^2 and slope of log P(X >= x) against x (against log x with log_x)
    over the `decades` decades of survival just above the noise floor (at
    least min_count exceedances)."""
    s = np.asarray(samples, float)
    x, S = survival(s)
    floor = min_count / s.size
    m = (S >= floor) & (S <= min(1.0, floor * 10**decades))
    if log_x:
        m &= x > 0
    if m.sum() < 3:
        raise DegenerateSample("too few distinct tail values")
    res = sps.linregress(np.log(x[m]) if log_x else x[m], np.log(S[m]))
    return float(res.rvalue**2), float(res.slope)


def _exponential_like(s) -> bool:
    try:
        lin, _ = loglinear_r2(s)
        log, _ = loglinear_r2(s, log_x=True)
    except DegenerateSample:
        return False
    return lin >= LOGLINEAR_R2 and lin > log


@dataclass
class TailReport:
    count: int
    curve_x: np.ndarray = field(repr=False)
    curve_s: np.ndarray = field(repr=False)
    k_frac: float
    hill: float
    ci: tuple
    loglog: float
    sweep: dict
    non_polynomial: bool
    bound: dict | None = None

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("count", "k_frac", "hill", "loglog", "non_polynomial")}
        d["ci"] = list(self.ci)
        d["sweep"] = {str(k): v for k, v in self.sweep.items()}
        if self.bound is not None:
            d["bound"] = self.bound
        return d


def _thin(x, S, points=200):
    if x.size <= points:
        return x, S
    idx = np.unique(np.geomspace(1, x.size, points).astype(int) - 1)
    return x[idx], S[idx]


def tail_exponent(samples, k_frac: float = 0.01, n_boot: int = 200, seed: int = 0,
                  min_count: int = 10_000, bound: dict | None = None) -> TailReport:
    """Hill estimate with a bootstrap CI, a log-log regression cross-check and
    the k_frac sensitivity sweep."""
    s = np.asarray(samples, float)
    s = s[np.isfinite(s)]
    if s.size < min_count:
        raise DegenerateSample(f"need at least {min_count} samples")
    if np.all(s == s[0]):
        raise DegenerateSample("all samples are equal")
    est = hill(s, k_frac)
    rng = np.random.default_rng(seed)
    boots = np.array([hill(s[rng.integers(0, s.size, s.size)], k_frac) for _ in range(n_boot)])
    ci = (float(np.quantile(boots, 0.025)), float(np.quantile(boots, 0.975)))
    sweep = {k: hill(s, k) for k in K_FRAC_SWEEP}
    ks = sorted(sweep)
    nonpoly = sweep[ks[0]] > NONPOLY_RATIO * sweep[ks[-1]] or _exponential_like(s)
    ll = loglog_slope(s, k_frac / 10, min(10 * k_frac, 0.5))
    x, S = survival(s)
    x, S = _thin(x, S)
    return TailReport(int(s.size), x, S, k_frac, est, ci, ll, sweep, bool(nonpoly), bound)


def bound_params(map: MapSpec, h, constants, tau_max: int = 10_000) -> dict:
    """Return-tail constants for the overlay: mu(tau >= n) <= C_tau n^-beta
    (LSV) or C_tau e^{-alpha n} (doubling), C_tau the measured sup."""
    from .measures import mu_tail
    n = np.arange(1, tau_max + 1)
    tail = mu_tail(map, h, n)
    base = {"R": constants.R, "xi": constants.xi}
    if map.family == DOUBLING:
        alpha = math.log(2.0)
        n = n[:60]
        C = float(np.max(tail[:60] * np.exp(alpha * n)))
        return {"kind": "stretched_exp", "C_tau": C, "alpha": alpha, "gamma": 1.0, **base}
    beta = map.beta
    C = float(np.max(tail * n.astype(float) ** beta))
    return {"kind": "weak_poly", "C_tau": C, "beta": beta, **base}


def shift_tail_bound(params: dict, jump_tails, n):
    """P(s_bound >= n) <= sum over sides of kappa(r >= n/2) + P(t >= n/2).
    jump_tails: one callable n -> kappa(r >= n) per side."""
    from .regen import theoretical_tail_bound
    n = np.asarray(n, float)
    half = np.maximum(n / 2, 1.0)
    p = {k: v for k, v in params.items() if k != "kind"}
    t_part = theoretical_tail_bound(params["kind"], p, half)
    total = np.zeros_like(half)
    for jt in jump_tails:
        total += jt(np.floor(half).astype(np.int64)) + t_part
    return total


def tv_geometric(lengths, xi: float) -> float:
    """Total variation between the empirical law of lengths and P(l = k) = (1-xi)^k xi."""
    lengths = np.asarray(lengths, np.int64)
    if lengths.size == 0:
        raise DegenerateSample("no samples")
    counts = np.bincount(lengths)
    k = np.arange(counts.size)
    p = xi * (1 - xi) ** k
    emp = counts / lengths.size
    # mass of the geometric law beyond the largest observed length
    beyond = (1 - xi) ** counts.size
    return float(0.5 * (np.abs(emp - p).sum() + beyond))


def tv_noise_floor(xi: float, n: int) -> float:
    """Expected TV of an exact sampler of size n against Geometric(xi),
    from E|p_hat - p| ~ sqrt(2 p / (pi n))."""
    k = np.arange(int(50 / xi))
    p = xi * (1 - xi) ** k
    return float(0.5 * np.sum(np.sqrt(2 * p * (1 - p) / (math.pi * n))))


# ----------------------------------------------------------------------------
# metrics

def _equalize(a, b, seed):
    a = np.asarray(a, float).ravel()
    b = np.asarray(b, float).ravel()
    if a.size != b.size:
        rng = np.random.default_rng(seed)
        n = min(a.size, b.size)
        a = a if a.size == n else rng.choice(a, n, replace=False)
        b = b if b.size == n else rng.choice(b, n, replace=False)
    return a, b


def wasserstein_p(a, b, p: float = 1.0, seed: int = 0) -> float:
    """Empirical W_p through the quantile coupling (optimal in 1-d); unequal
    sizes are subsampled to the smaller one."""
    if p < 1:
        raise ValueError("p must be >= 1")
    if np.ndim(a) > 1 or np.ndim(b) > 1:
        raise ValueError("only scalar samples; use the LP bound in higher dimension")
    a, b = _equalize(a, b, seed)
    d = np.abs(np.sort(a) - np.sort(b))
    return float(np.mean(d**p) ** (1.0 / p))


def _lp_holds(sa, sb, eps):
    # F_A(x) <= F_B(x + eps) + eps at the jump points of F_A, both ways
    na, nb = sa.size, sb.size
    fa = np.arange(1, na + 1) / na
    fb = np.searchsorted(sb, sa + eps, side="right") / nb
    if np.any(fa > fb + eps + 1e-12):
        return False
    fb2 = np.arange(1, nb + 1) / nb
    fa2 = np.searchsorted(sa, sb + eps, side="right") / na
    return not np.any(fb2 > fa2 + eps + 1e-12)


def levy_prokhorov(a, b, tol: float = 1e-6) -> float:
    """Smallest eps with P_A(A) <= P_B(A^eps) + eps (and symmetrically) over
    half-lines, by bisection. An upper estimate on the LP distance of the
    empirical laws' half-line class, capped at 1."""
    sa = np.sort(np.asarray(a, float).ravel())
    sb = np.sort(np.asarray(b, float).ravel())
    if _lp_holds(sa, sb, 0.0):
        return 0.0
    lo, hi = 0.0, 1.0
    if not _lp_holds(sa, sb, hi):
        return 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _lp_holds(sa, sb, mid):
            hi = mid
        else:
            lo = mid
    return hi


def lp_within_sqrt_w1(a, b) -> tuple:
    """(d_LP, d_W1, d_LP <= sqrt(d_W1))."""
    lp = levy_prokhorov(a, b)
    w1 = wasserstein_p(a, b, 1)
    return lp, w1, bool(lp <= math.sqrt(w1) + 1e-6)


def trend_vs_log(ns, values_fn, samples, n_boot: int = 200, seed: int = 0):
    """Slope of values against log n with a bootstrap CI over samples (rows
    resampled jointly). values_fn(rows) returns one value per n."""
    ns = np.asarray(ns, float)
    base = np.asarray(values_fn(np.arange(samples)))
    slope = float(np.polyfit(np.log(ns), base, 1)[0])
    rng = np.random.default_rng(seed)
    boots = []
    for _ in range(n_boot):
        rows = rng.integers(0, samples, samples)
        boots.append(np.polyfit(np.log(ns), np.asarray(values_fn(rows)), 1)[0])
    ci = (float(np.quantile(boots, 0.025)), float(np.quantile(boots, 0.975)))
    return slope, ci, base


# ----------------------------------------------------------------------------
# CLT

@dataclass
class CLTReport:
    n: int
    count: int
    ks: float
    loc: float
    scale: float
    w1_by_n: dict | None = None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def normal_ks(z) -> tuple:
    """KS distance of z to the centered normal with the sample's second
    moment; also returns the sample mean as a diagnostic."""
    z = np.asarray(z, float)
    scale = float(np.sqrt(np.mean(z * z)))
    if scale == 0:
        raise DegenerateSample("zero spread")
    return float(sps.kstest(z, "norm", args=(0.0, scale)).statistic), float(z.mean()), scale


def clt_check(spec, v: Observable, n: int, sample_count: int, seed: int, engine,
              compare=None, ns=None, workers: int = 1) -> CLTReport:
    """Empirical law of v_n / sqrt(n) under spec against a fitted normal.

    With a second spec, both are drawn as one coupled sample (same u) and the
    W1 distance between the two laws of v_k / sqrt(k) is reported for k in ns;
    the coupling keeps that estimate below E|v_k(x) - v_k(y)| / sqrt(k).
    """
    from .coupling import sample_joints
    from .measures import sample_initial

    ns = sorted(set(ns or ()) | {n})
    if compare is None:
        init = sample_initial(spec, engine, sample_count, seed)
        refill = engine.map.family == DOUBLING
        sums = eng.forward_birkhoff(np.ascontiguousarray(init.x), int(max(ns)), engine.map.g,
                                    engine.map.c, refill, v.table, np.asarray(ns, np.int64),
                                    int(seed) + 1)
        z = sums[:, ns.index(n)] / math.sqrt(n)
        ks, loc, scale = normal_ks(z)
        return CLTReport(n, int(z.size), ks, loc, scale)
    J = sample_joints(spec, compare, engine, sample_count, seed, horizon=(max(ns) + 1) // 2,
                      observable=v, checkpoints=ns, workers=workers).accepted()
    col = {k: i for i, k in enumerate(J.checkpoints)}
    z = J.bx[:, col[n]] / math.sqrt(n)
    ks, loc, scale = normal_ks(z)
    w1 = {int(k): wasserstein_p(J.bx[:, col[k]] / math.sqrt(k), J.by[:, col[k]] / math.sqrt(k))
          for k in ns}
    return CLTReport(n, int(z.size), ks, loc, scale, w1)
