"""Regeneration constants, the split of a regular density into a mu-part and
a remainder, the branch-selection chain and its tail bounds."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import _engine as eng
from .density import (GridDensity, InvariantDensity, _on_grid, _trapz_weights,
                      certified_K, grid_nodes, seminorm_log_lipschitz)
from .dynamics import Y_HI, Y_LO, MapSpec, Partition, branch_partition, preimages_of_half


class RegularityError(AssertionError):
    pass


class ConstantsError(ValueError):
    pass


@dataclass(frozen=True)
class RegenConstants:
    lam: float
    K: float
    R_prime: float
    R: float
    xi: float

    def __post_init__(self):
        lam, K, Rp, R, xi = self.lam, self.K, self.R_prime, self.R, self.xi
        if not lam > 1 or not K > 0:
            raise ConstantsError("need lambda > 1 and K > 0")
        if not Rp > K * lam / (lam - 1):
            raise ConstantsError("R' must exceed K lambda / (lambda - 1)")
        if not math.isclose(R, lam * (Rp - K), rel_tol=1e-12):
            raise ConstantsError("R must equal lambda (R' - K)")
        if not 0 < xi < math.exp(-R):
            raise ConstantsError("xi must lie in (0, e^-R)")
        if R * (1 - xi * math.exp(R)) < (K + R / lam) * (1 - 1e-12):
            raise ConstantsError("R (1 - xi e^R) >= K + R/lambda fails")

    def as_dict(self) -> dict:
        return {"lambda": self.lam, "K": self.K, "R_prime": self.R_prime,
                "R": self.R, "xi": self.xi}


def make_constants(map: MapSpec, K_emp: float, slack: float = 1.05) -> RegenConstants:
    if K_emp < 1:
        raise ConstantsError("K must be >= 1")
    lam = map.lam
    Rp = slack * K_emp * lam / (lam - 1)
    R = lam * (Rp - K_emp)
    need = K_emp + R / lam
    xi = math.exp(-R) / 2
    while R * (1 - xi * math.exp(R)) < need:
        xi /= 2
    return RegenConstants(lam, K_emp, Rp, R, xi)


# ----------------------------------------------------------------------------
# density-level operations on GridDensity values

def split(phi: GridDensity, c: RegenConstants, h: GridDensity | None = None):
    """phi = xi * int(phi dmu) + psi with psi > 0 and |psi|_{d,l} <= R."""
    s_phi = seminorm_log_lipschitz(phi)
    if s_phi > c.R_prime:
        raise RegularityError(f"|phi| = {s_phi:.4g} exceeds R' = {c.R_prime:.4g}")
    total = phi.integral(h) if h is not None else 1.0
    mass = c.xi * total
    v = phi.values - mass
    if np.any(v <= 0):
        raise RegularityError("psi is not positive")
    psi = GridDensity(v, "mu")
    s_psi = seminorm_log_lipschitz(psi)
    if s_psi > c.R:
        raise RegularityError(f"|psi| = {s_psi:.4g} exceeds R = {c.R:.4g}")
    return mass, psi


def mu_cdf(h: GridDensity, y) -> np.ndarray:
    """mu([1/2, y]) for the piecewise-linear h (normalized w.r.t. m)."""
    v = h.values
    dx = h.grid_step
    cum = np.concatenate([[0.0], np.cumsum(0.5 * dx * (v[:-1] + v[1:]))])
    y = np.asarray(y, float)
    t = np.clip((y - Y_LO) / dx, 0.0, h.n - 1)
    i = np.minimum(t.astype(np.int64), h.n - 2)
    th = t - i
    fy = v[i] + th * (v[i + 1] - v[i])
    return (cum[i] + 0.5 * th * dx * (v[i] + fy)) / cum[-1]


def branch_masses(h: GridDensity, part: Partition) -> np.ndarray:
    return mu_cdf(h, part.hi) - mu_cdf(h, part.lo)


def branch_weights(psi: GridDensity, branches: Partition, h: GridDensity,
                   c: RegenConstants | None = None, budget: float = 1e-8):
    """r_a = int_a psi h dm for every branch; returns (r, deficit)."""
    prod = GridDensity(psi.values * _on_grid(h, psi.n), "m")
    total = prod.integral()
    cdf = lambda y: mu_cdf(prod, y) * total
    r = cdf(branches.hi) - cdf(branches.lo)
    deficit = float(cdf(branches.lo.min()))
    if deficit > budget:
        raise RegularityError(f"branch truncation deficit {deficit:.3g} above budget")
    if c is not None:
        mu_a = branch_masses(h, branches)
        lo_b = math.exp(-c.R) * (1 - c.xi) * mu_a
        hi_b = math.exp(c.R) * (1 - c.xi) * mu_a
        bad = (r < lo_b * (1 - 1e-9)) | (r > hi_b * (1 + 1e-9))
        if np.any(bad):
            raise RegularityError(f"weight bound violated on {int(bad.sum())} branches")
    return r, deficit


# ----------------------------------------------------------------------------
# the compiled chain

@dataclass
class ChainDiagnostics:
    violations: dict
    max_psi_seminorm: float
    max_step_seminorm: float
    on_the_fly_tables: int
    steps: int

    @classmethod
    def from_raw(cls, viol, stats):
        names = ["positivity", "psi_bounds", "weight_bounds", "psi_seminorm",
                 "step_seminorm", "initial_seminorm"]
        return cls({k: int(v) for k, v in zip(names, viol)}, float(stats[0]),
                   float(stats[1]), int(stats[2]), int(stats[3]))

    @property
    def total_violations(self) -> int:
        return sum(self.violations.values())

    def merge(self, other: "ChainDiagnostics") -> "ChainDiagnostics":
        return ChainDiagnostics(
            {k: self.violations[k] + other.violations[k] for k in self.violations},
            max(self.max_psi_seminorm, other.max_psi_seminorm),
            max(self.max_step_seminorm, other.max_step_seminorm),
            self.on_the_fly_tables + other.on_the_fly_tables, self.steps + other.steps)


class ChainEngine:
    """Tables for running the word chain on a coarse grid.

    Branches with tau <= k_tab have precomputed preimages and zeta at the
    chain-grid nodes; longer branches up to tau_max are computed on demand.
    """

    def __init__(self, map: MapSpec, inv: InvariantDensity, consts: RegenConstants,
                 n_chain: int = 32, k_tab: int = 4096, tau_max: int = 10**6,
                 word_cap: int = 10**5, init_slack: float = 1.05):
        self.map = map
        self.inv = inv
        self.c = consts
        self.n_chain = n_chain
        self.k_tab = k_tab
        self.tau_max = tau_max
        self.word_cap = word_cap
        self.init_slack = init_slack
        h = inv.h
        self.yg = grid_nodes(n_chain)
        self.hc = h(self.yg)
        self.wq = _trapz_weights(n_chain)
        self.hf = np.ascontiguousarray(h.values)
        self.hf_dx = h.grid_step
        self.hf_cum = np.concatenate([[0.0], np.cumsum(0.5 * self.hf_dx * (self.hf[:-1] + self.hf[1:]))])
        self.part = branch_partition(map, tau_max)
        self.xs = np.ascontiguousarray(preimages_of_half(map, tau_max)[:tau_max])
        # mu of branch tau = k at index k-1
        self.mu_br = np.ascontiguousarray(branch_masses(h, self.part)[::-1])
        self.YA, self.ZT, self.JA, self.LJ = eng.build_tables(
            self.yg, self.hc, self.hf, Y_LO, self.hf_dx, map.g, map.c, k_tab)

    @property
    def tables(self):
        return (self.yg, self.hc, self.wq, self.xs, self.mu_br)

    def grid_density(self, values) -> GridDensity:
        return GridDensity(values, "mu")

    def unit(self) -> GridDensity:
        return GridDensity(np.ones(self.n_chain), "mu")

    def step(self, phi: np.ndarray, u_term: float, u_branch: float):
        """One chain step with the given uniforms: (tau, new phi, diagnostics).
        tau is 0 on termination and -1 beyond the branch table."""
        n = self.n_chain
        phi = np.array(phi, dtype=float)
        viol = np.zeros(eng.N_VIOL, np.int64)
        stats = np.zeros(4)
        ell, t, status = eng.walk(
            phi, np.empty(n), np.empty(n), np.empty(n), np.empty(1, np.int64),
            np.array([u_term, u_branch], float), self.c.xi, self.c.R, self.c.R_prime,
            self.yg, self.hc, self.wq, self.xs, self.mu_br, self.ZT, self.hf, Y_LO,
            self.hf_dx, self.map.g, self.map.c, np.empty(n), np.empty((3, n)),
            np.empty(n), viol, stats)
        if status == eng.DISCARD_OVERFLOW:
            tau = eng.OVERFLOW
        else:
            tau = int(t) if ell else eng.TERMINATED
        return tau, phi, ChainDiagnostics.from_raw(viol, stats)

    def words(self, count: int, seed: int, phi0=None, first_letters: bool = False):
        phi0 = np.ones(self.n_chain) if phi0 is None else np.asarray(phi0, float)
        ells, ts, status, first, viol, stats = eng.run_words(
            int(seed), int(count), phi0, self.c.xi, self.c.R, self.c.R_prime, self.yg,
            self.hc, self.wq, self.xs, self.mu_br, self.YA, self.ZT, self.hf, Y_LO,
            self.hf_dx, self.map.g, self.map.c, self.word_cap, first_letters)
        return ells, ts, status, first, ChainDiagnostics.from_raw(viol, stats)


def build_engine(map: MapSpec, inv: InvariantDensity, K: float | None = None, **kw):
    """Certified constants and a chain engine for map."""
    if K is None:
        K = certified_K(inv, map)
    consts = make_constants(map, K)
    return ChainEngine(map, inv, consts, **kw)


@dataclass(frozen=True)
class WordSample:
    letters: tuple
    length: int
    t: int

    def __post_init__(self):
        if self.length != len(self.letters) or self.t != sum(self.letters):
            raise ValueError("inconsistent word")


@dataclass
class ChainState:
    current_density: GridDensity
    letters_so_far: list = field(default_factory=list)
    terminated: bool = False

    @property
    def word(self) -> WordSample:
        return WordSample(tuple(self.letters_so_far), len(self.letters_so_far),
                          int(sum(self.letters_so_far)))


class ChainOverflow(RuntimeError):
    pass


def chain_step(state: ChainState, engine: ChainEngine, rng: np.random.Generator,
               strict: bool = True) -> ChainState:
    if state.terminated:
        raise ValueError("chain already terminated")
    tau, out, diag = engine.step(state.current_density.values, rng.random(), rng.random())
    if strict and diag.total_violations:
        raise RegularityError(f"chain assertion failed: {diag.violations}")
    if tau == eng.TERMINATED:
        return ChainState(engine.unit(), list(state.letters_so_far), True)
    if tau == eng.OVERFLOW:
        raise ChainOverflow("selected branch beyond tau_max")
    return ChainState(GridDensity(out, "mu"), state.letters_so_far + [tau], False)


def sample_word(phi0: GridDensity, engine: ChainEngine, rng: np.random.Generator,
                cap: int | None = None) -> WordSample:
    if seminorm_log_lipschitz(phi0) > engine.c.R_prime * engine.init_slack:
        raise RegularityError("initial density is not regular")
    cap = engine.word_cap if cap is None else cap
    state = ChainState(phi0.resample(engine.n_chain).normalized(
        GridDensity(engine.hc, "m")))
    while not state.terminated:
        if len(state.letters_so_far) >= cap:
            raise ChainOverflow(f"word longer than {cap} letters")
        state = chain_step(state, engine, rng)
    return state.word


# ----------------------------------------------------------------------------
# tail bounds

def _series(xi: float, power: float, ratio: float = 1.0, tol: float = 1e-12) -> float:
    """sum_{n>=1} ((1-xi) ratio)^n n^power, summed until terms are below tol."""
    if not 0 < xi <= 1:
        raise ValueError("xi must be in (0, 1]")
    q = (1 - xi) * ratio
    if q >= 1:
        raise ValueError("divergent series")
    if q == 0:
        return 0.0
    # peak near n* = power / -log q; sum in blocks until negligible
    total = 0.0
    n0 = 1
    block = 4096
    while True:
        n = np.arange(n0, n0 + block, dtype=float)
        terms = np.exp(n * math.log(q) + power * np.log(n))
        total += terms.sum()
        if n[-1] > power / max(-math.log(q), 1e-300) and terms[-1] < tol * max(total, 1e-300):
            return float(total)
        n0 += block
        block *= 2


def theoretical_tail_bound(kind: str, params: dict, ell):
    """Tail bounds traced through the regeneration argument.

    weak_poly:      C_tau e^R xi sum (1-xi)^n n^{1+beta} * ell^-beta
    strong_poly:    C_tau e^R xi sum (1-xi)^n n^{beta-1}  (a moment bound; ell ignored)
    stretched_exp:  xi sum ((1-xi)(1+A C1))^n * exp(-A ell^gamma), with
                    C1 = 2 C_tau e^R / alpha and A <= alpha/2 small enough
                    that the series converges.
    """
    R = params["R"]
    xi = params["xi"]
    if xi <= 0:
        raise ValueError("xi must be positive")
    ell = np.asarray(ell, float)
    if kind == "weak_poly":
        beta = params["beta"]
        C = params["C_tau"] * math.exp(R) * xi * _series(xi, 1 + beta)
        return C * ell ** (-beta)
    if kind == "strong_poly":
        beta = params["beta"]
        C = params["C_tau"] * math.exp(R) * xi * _series(xi, beta - 1)
        return np.full_like(ell, C) if ell.ndim else C
    if kind == "stretched_exp":
        alpha = params["alpha"]
        gamma = params.get("gamma", 1.0)
        C1 = 2 * params["C_tau"] * math.exp(R) / alpha
        A = params.get("A", min(alpha / 2, 0.5 * xi / ((1 - xi) * C1)))
        q = (1 - xi) * (1 + A * C1)
        if q >= 1:
            raise ValueError("A too large for convergence")
        C = xi * q / (1 - q)
        return C * np.exp(-A * ell**gamma)
    raise ValueError(f"unknown bound kind {kind!r}")


def write_csv(path, columns: dict, header: str = "") -> str:
    """Columns of equal length as CSV; header lines go first, verbatim."""
    names = list(columns)
    cols = [np.asarray(columns[k]) for k in names]
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*cols):
            w.writerow(repr(float(v)) if isinstance(v, (float, np.floating)) else int(v)
                       for v in row)
    return str(path)


def word_sample_columns(ell, t) -> dict:
    ell = np.asarray(ell, np.int64)
    return {"sample_id": np.arange(ell.size), "ell": ell, "t": np.asarray(t, np.int64)}


def bound_curve(kind: str, params: dict, samples, points=None) -> dict:
    """Empirical P(X >= ell) next to the bound, at the distinct sample
    values unless points are given."""
    s = np.sort(np.asarray(samples, float))
    ell = np.unique(s) if points is None else np.asarray(points, float)
    emp = 1.0 - np.searchsorted(s, ell, side="left") / s.size
    bound = theoretical_tail_bound(kind, params, np.maximum(ell, 1.0))
    return {"ell": ell, "empirical": emp, "bound": np.broadcast_to(bound, ell.shape)}
