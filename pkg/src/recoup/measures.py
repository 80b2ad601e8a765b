"""Forward-regular initial measures as countable mixtures of components.

Each component is a probability measure carried by a set on which T^r is
injective, with r the component's jump, and whose image under T^r is a
regular density on Y. Components sharing a post-jump density are stored as
groups: a tower group for branch a holds the tau(a) levels 0 <= l < tau(a)
with equal weights.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numba import njit
from scipy.special import zeta as hurwitz_zeta

from . import _engine as eng
from . import _kernels as kx
from .density import GridDensity, InvariantDensity, seminorm_log_lipschitz
from .dynamics import DOUBLING, Y_LO, MapSpec, preimages_of_half
from .regen import ChainEngine, RegularityError, mu_cdf

KIND_NAMES = {eng.MU: "mu", eng.LEB_Y: "lebesgue_y", eng.LEB_LEFT: "lebesgue_left",
              eng.TOWER: "tower", eng.CUSTOM: "custom"}

REGULARITY_SLACK = 1.05


class DeficitError(ValueError):
    pass


@dataclass(frozen=True)
class Component:
    kind: str
    index: int
    level: int
    weight: float
    jump: int
    support: tuple


@dataclass(frozen=True)
class TowerNode:
    branch: int   # return time of the branch
    level: int
    weight: float

    @property
    def jump(self) -> int:
        return self.branch - self.level


@dataclass(frozen=True, eq=False)
class ForwardRegularSpec:
    """Grouped components: group i has kind kinds[i], index idxs[i] (branch
    return time or left hit time) and nlev[i] equally weighted levels.
    weights[i] is the total weight of the group."""
    name: str
    map: MapSpec
    kinds: np.ndarray
    idxs: np.ndarray
    nlev: np.ndarray
    weights: np.ndarray
    deficit: float
    custom: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for a in ("kinds", "idxs", "nlev", "weights"):
            getattr(self, a).setflags(write=False)
        total = float(self.weights.sum())
        if not math.isclose(total + self.deficit, 1.0, rel_tol=0, abs_tol=1e-9):
            raise ValueError(f"weights sum to {total}, deficit {self.deficit}")

    def __len__(self):
        return int(self.nlev.sum())

    @cached_property
    def cw(self) -> np.ndarray:
        return np.cumsum(self.weights)

    @property
    def max_index(self) -> int:
        return int(self.idxs.max())

    @cached_property
    def _jump_pmf(self) -> np.ndarray:
        """kappa(r = n) for n = 0 .. max_index. A tower group spreads its
        weight evenly over r = idx - nlev + 1 .. idx; summing the difference
        array from the right keeps the far tail accurate."""
        size = self.max_index + 2
        diff = np.zeros(size + 1)
        point = np.zeros(size)
        tower = self.kinds == eng.TOWER
        i, nl, w = self.idxs[tower], self.nlev[tower], self.weights[tower]
        np.add.at(diff, i, w / nl)
        np.add.at(diff, i - nl, -w / nl)
        other = ~tower
        r = np.where(np.isin(self.kinds[other], (eng.MU, eng.CUSTOM)), 0, self.idxs[other])
        np.add.at(point, r, self.weights[other])
        spread = np.cumsum(diff[::-1])[::-1][:size]
        # tower jumps start at 1; what the running sum leaves at 0 is round-off
        spread[0] = 0.0
        pmf = np.maximum(spread, 0.0) + point
        pmf.setflags(write=False)
        return pmf

    def jump_pmf(self, n) -> np.ndarray:
        """kappa(r = n)."""
        n = np.asarray(n, dtype=np.int64)
        pmf = self._jump_pmf
        return np.where((n >= 0) & (n < pmf.size), pmf[np.clip(n, 0, pmf.size - 1)], 0.0)

    def jump_tail(self, n) -> np.ndarray:
        """kappa(r >= n)."""
        n = np.asarray(n, dtype=np.int64)
        pmf = self._jump_pmf
        tail = np.concatenate([np.cumsum(pmf[::-1])[::-1], [0.0]])
        return tail[np.clip(n, 0, pmf.size)]

    def components(self, limit: int | None = None):
        """Expanded component list (levels separate); limit caps the count."""
        xs = preimages_of_half(self.map, self.max_index + 1)
        out = []
        for k, i, nl, w in zip(self.kinds, self.idxs, self.nlev, self.weights):
            for lev in range(nl):
                if limit is not None and len(out) >= limit:
                    return out
                if k == eng.LEB_LEFT:
                    sup = (float(xs[i]), float(xs[i - 1]))
                elif k in (eng.LEB_Y, eng.TOWER) and lev == 0:
                    sup = (0.5 * (1 + xs[i - 1]), 1.0 if i == 1 else 0.5 * (1 + xs[i - 2]))
                elif k == eng.TOWER:
                    sup = (float(xs[i - lev]), float(xs[i - lev - 1]))
                else:
                    sup = (Y_LO, 1.0)
                jump = int(eng.jump_of(k, i, lev))
                out.append(Component(KIND_NAMES[int(k)], int(i), lev, float(w / nl), jump, sup))
        return out

    def tower_nodes(self):
        return [TowerNode(int(i), lev, float(w / nl))
                for k, i, nl, w in zip(self.kinds, self.idxs, self.nlev, self.weights)
                if k == eng.TOWER for lev in range(nl)]

    def summary(self, head: int = 20) -> dict:
        n = np.unique(np.round(np.logspace(0, math.log10(max(self.max_index, 1)), 25)))
        return {
            "name": self.name,
            "map": self.map.label(),
            "groups": int(len(self.kinds)),
            "components": len(self),
            "deficit": self.deficit,
            "weight_total": float(self.weights.sum()),
            "jump_tail": {str(int(k)): float(v) for k, v in zip(n, self.jump_tail(n))},
            "head": [c.__dict__ for c in self.components(limit=head)],
            **self.meta,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.summary(), default=_jsonable, **kw)


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o))


def _arrays(kinds, idxs, nlev, weights):
    return (np.ascontiguousarray(kinds, np.int64), np.ascontiguousarray(idxs, np.int64),
            np.ascontiguousarray(nlev, np.int64), np.ascontiguousarray(weights, float))


# ----------------------------------------------------------------------------
# return-time statistics

def mu_tail(map: MapSpec, h: GridDensity, n) -> np.ndarray:
    """mu(tau >= n) for n >= 1."""
    n = np.asarray(n, dtype=np.int64)
    if np.any(n < 1):
        raise ValueError("n must be >= 1")
    xs = preimages_of_half(map, max(int(n.max()), 2))
    # tau >= n exactly on [1/2, (1 + x_{n-2})/2)
    out = mu_from_half(h, 0.5 * xs[np.maximum(n - 2, 0)])
    return np.where(n == 1, 1.0, out)


def mu_from_half(h: GridDensity, s) -> np.ndarray:
    """mu([1/2, 1/2 + s]) without forming 1/2 + s, so tiny s keeps its
    relative precision."""
    s = np.asarray(s, float)
    v = h.values
    dx = h.grid_step
    total = float(np.sum(0.5 * dx * (v[:-1] + v[1:])))
    near = (v[0] * s + 0.5 * (v[1] - v[0]) * s * s / dx) / total
    return np.where(s < dx, near, mu_cdf(h, Y_LO + np.minimum(s, 0.5)))


def _check_resolvable(map: MapSpec, n: int):
    if preimages_of_half(map, n)[n] == 0.0:
        raise ValueError(f"components beyond n={n} underflow to zero length")


def m_tail(map: MapSpec, n) -> np.ndarray:
    """m_Y(tau >= n), m_Y normalized Lebesgue on Y."""
    n = np.asarray(n, dtype=np.int64)
    xs = preimages_of_half(map, max(int(n.max()), 2))
    return np.where(n == 1, 1.0, xs[np.maximum(n - 2, 0)])


def _tail_sum(map: MapSpec, h: GridDensity, N: int) -> float:
    """Estimate of sum_{n > N} mu(tau >= n) from the last decade of the tail."""
    if map.family == DOUBLING:
        q = 0.5
        return float(mu_tail(map, h, N) * q / (1 - q))
    n = np.unique(np.geomspace(max(N // 10, 2), N, 20).astype(np.int64))
    t = mu_tail(map, h, n)
    slope, icpt = np.polyfit(np.log(n), np.log(t), 1)
    beta = -slope
    if beta <= 1:
        raise DeficitError("return-time tail too heavy for a finite mean")
    return float(math.exp(icpt) * hurwitz_zeta(beta, N + 1))


def tau_bar(map: MapSpec, h: GridDensity, tau_max: int, tail_correction: bool = True) -> float:
    """int_Y tau dmu = sum_{n >= 1} mu(tau >= n), truncated at tau_max plus a
    power-law (geometric for doubling) estimate of the remainder."""
    if tau_max < 1:
        raise ValueError("tau_max must be >= 1")
    total = float(mu_tail(map, h, np.arange(1, tau_max + 1)).sum())
    if tail_correction:
        total += _tail_sum(map, h, tau_max)
    return total


# ----------------------------------------------------------------------------
# quadrature against the a.c.i.p.

@njit(cache=True)
def _tower_quad(nodes, g, c, K):
    """Iterates z_k = L^{-k}(y) and |(L^{-k})'(y)| at the nodes, k = 0..K."""
    Z = np.empty((nodes.size, K + 1))
    J = np.empty((nodes.size, K + 1))
    for i in range(nodes.size):
        z = nodes[i]
        jac = 1.0
        Z[i, 0] = z
        J[i, 0] = 1.0
        for k in range(1, K + 1):
            z = kx.left_inv(z, g, c)
            jac /= kx.left_deriv(z, g, c)
            Z[i, k] = z
            J[i, k] = jac
    return Z, J


@dataclass
class TowerQuadrature:
    """Integrals against rho = pi_*(mu x counting) / tau_bar.

    On [x_k, x_{k-1}) rho equals L^{-k}_* of F_*(mu restricted to tau > k),
    so int v drho = (1/tau_bar) [int_Y v dmu
        + sum_{k>=1} int_Y v(L^{-k} y) (1 - S_k(y)) dmu(y)],
    S_k = sum_{tau <= k} of the pushed branch densities. Needs no separate
    density for rho.
    """
    map: MapSpec
    nodes: np.ndarray
    weights: np.ndarray     # mu-weights: quadrature weight times h
    points: np.ndarray      # (nodes, K+1) with points[:, k] = L^{-k}(y)
    remain: np.ndarray      # (nodes, K+1), 1 - S_k(y); column 0 is 1
    tau_bar: float

    @classmethod
    def build(cls, map: MapSpec, h: GridDensity, K: int = 4096, n_nodes: int = 96,
              tau_bar: float | None = None):
        # composite Gauss-Legendre with panels matching the grid keeps h's
        # kinks at panel edges
        gl, gw = np.polynomial.legendre.leggauss(8)
        panels = max(n_nodes // 8, 1)
        edges = np.linspace(Y_LO, 1.0, panels + 1)
        a, b = edges[:-1, None], edges[1:, None]
        nodes = (0.5 * (b - a) * gl + 0.5 * (a + b)).ravel()
        qw = (0.5 * (b - a) * gw).ravel() * 2.0  # m_Y is normalized
        hy = h(nodes)
        Z, J = _tower_quad(nodes, map.g, map.c, K)
        # pushed density of branch tau = k+1 is h((1 + z_k)/2) |(L^{-k})'| / 2 / h(y)
        branch = h(0.5 * (1.0 + Z[:, :-1])) * 0.5 * J[:, :-1] / hy[:, None]
        remain = np.ones_like(Z)
        remain[:, 1:] = 1.0 - np.cumsum(branch, axis=1)
        np.clip(remain, 0.0, None, out=remain)
        w = qw * hy
        if tau_bar is None:
            tau_bar = float(w @ remain.sum(axis=1))
        return cls(map, nodes, w, Z, remain, tau_bar)

    def integral(self, v) -> float:
        """int v drho, v vectorized over points of [0, 1]. The mass beyond
        L^{-K}(Y) sits below x_K and is charged at v(0)."""
        vals = np.asarray(v(self.points), float)
        raw = float(self.weights @ (vals * self.remain).sum(axis=1))
        v0 = float(np.asarray(v(np.zeros(1)), float)[0])
        return (raw + v0 * self.tail) / self.tau_bar

    @cached_property
    def mass(self) -> float:
        """Truncated sum of mu(tau > k), k = 0..K."""
        return float(self.weights @ self.remain.sum(axis=1))

    @property
    def tail(self) -> float:
        return max(self.tau_bar - self.mass, 0.0)

    def mean(self) -> float:
        return self.integral(lambda x: x)


# ----------------------------------------------------------------------------
# the specs

def spec_mu(map: MapSpec) -> ForwardRegularSpec:
    k, i, n, w = _arrays([eng.MU], [0], [1], [1.0])
    return ForwardRegularSpec("mu", map, k, i, n, w, 0.0)


def spec_custom(map: MapSpec, phi: GridDensity, engine: ChainEngine) -> ForwardRegularSpec:
    """A single regular density phi relative to mu on Y, jump 0."""
    if phi.reference != "mu":
        raise ValueError("custom densities are relative to mu")
    vals = phi.resample(engine.n_chain).values
    if np.any(vals <= 0):
        raise RegularityError("custom density must be positive")
    semi = seminorm_log_lipschitz(GridDensity(vals, "mu"))
    if semi > engine.c.R_prime:
        raise RegularityError(f"custom density seminorm {semi:.4g} exceeds R'")
    k, i, n, w = _arrays([eng.CUSTOM], [0], [1], [1.0])
    return ForwardRegularSpec("custom_regular", map, k, i, n, w, 0.0,
                              custom=np.ascontiguousarray(vals))


def spec_lebesgue(map: MapSpec, r_max: int, engine: ChainEngine | None = None) -> ForwardRegularSpec:
    """Lebesgue on [0, 1]: left intervals [x_n, x_{n-1}) jump n, branches of Y
    jump tau. Weights are lengths."""
    if r_max < 1:
        raise ValueError("r_max must be >= 1")
    _check_resolvable(map, r_max)
    xs = preimages_of_half(map, r_max)
    n = np.arange(1, r_max + 1)
    left_len = xs[n - 1] - xs[n]
    # branch tau has length (x_{tau-2} - x_{tau-1})/2, tau = 1 has 1/4
    y_len = np.empty(r_max)
    y_len[0] = 0.25
    y_len[1:] = 0.5 * (xs[: r_max - 1] - xs[1:r_max])
    kinds = np.concatenate([np.full(r_max, eng.LEB_LEFT), np.full(r_max, eng.LEB_Y)])
    idxs = np.concatenate([n, n])
    w = np.concatenate([left_len, y_len])
    deficit = float(xs[r_max]) + 0.5 * float(xs[r_max - 1])
    spec = ForwardRegularSpec("lebesgue", map, *_arrays(kinds, idxs, np.ones(2 * r_max), w),
                              deficit, meta={"r_max": r_max})
    if engine is not None:
        check_regularity(spec, engine)
    return spec


def spec_acip(map: MapSpec, h: GridDensity, tau_max: int, engine: ChainEngine | None = None,
              budget: float | None = None, tol: float = 1e-9) -> ForwardRegularSpec:
    """The a.c.i.p. as its tower: node (a, l), 0 <= l < tau(a), weight
    mu(a)/tau_bar and jump tau(a) - l."""
    if tau_max < 1:
        raise ValueError("tau_max must be >= 1")
    _check_resolvable(map, tau_max)
    tb = tau_bar(map, h, tau_max)
    taus = np.arange(1, tau_max + 1)
    tail = mu_tail(map, h, np.arange(1, tau_max + 2))
    mu_a = tail[:-1] - tail[1:]
    w = taus * mu_a / tb
    deficit = 1.0 - float(w.sum())
    if budget is not None and deficit > budget:
        raise DeficitError(f"tower deficit {deficit:.3g} above budget {budget:.3g}")
    spec = ForwardRegularSpec("acip_rho", map, *_arrays(np.full(tau_max, eng.TOWER), taus, taus, w),
                              deficit, meta={"tau_bar": tb, "tau_max": tau_max})
    # kappa(r = n) = mu(tau >= n) / tau_bar, up to the truncation at tau_max
    probe = np.unique(np.geomspace(1, tau_max, 30).astype(np.int64))
    lhs = spec.jump_pmf(probe)
    rhs = (tail[probe - 1] - tail[tau_max]) / tb
    if np.any(np.abs(lhs - rhs) > tol * np.maximum(rhs, 1e-300) + 1e-15):
        raise RegularityError("tower jump law disagrees with mu(tau >= n)/tau_bar")
    if engine is not None:
        check_regularity(spec, engine)
    return spec


# ----------------------------------------------------------------------------
# checks and sampling

def _post_jump(kind: int, idx: int, engine: ChainEngine) -> np.ndarray:
    n = engine.n_chain
    phi = np.empty(n)
    eng.initial_density(kind, idx, 0, phi, engine.unit().values, engine.yg, engine.hc,
                        engine.wq, engine.mu_br, engine.YA, engine.ZT, engine.JA,
                        engine.LJ, engine.hf, Y_LO, engine.hf_dx, engine.map.g,
                        engine.map.c, np.empty(n), np.empty((3, n)), np.empty(n))
    return phi


def check_regularity(spec: ForwardRegularSpec, engine: ChainEngine,
                     slack: float = REGULARITY_SLACK, probes: int = 16) -> float:
    """Grid seminorm of the post-jump densities of all groups with index in the
    precomputed tables plus a log-spaced probe of longer ones. Returns the
    worst value; raises if it exceeds slack * R'."""
    if spec.max_index > engine.tau_max:
        raise DeficitError("spec reaches beyond the engine's branch table")
    idx = spec.idxs
    sel = np.nonzero(idx <= engine.k_tab)[0]
    far = np.nonzero(idx > engine.k_tab)[0]
    if far.size:
        sel = np.concatenate([sel, far[np.unique(np.linspace(0, far.size - 1, probes).astype(int))]])
    if spec.custom is not None:
        phis = [spec.custom]
    else:
        phis = (_post_jump(int(spec.kinds[i]), int(spec.idxs[i]), engine) for i in sel)
    worst = 0.0
    for phi in phis:
        worst = max(worst, seminorm_log_lipschitz(GridDensity(phi, "mu")))
    if worst > slack * engine.c.R_prime:
        raise RegularityError(f"post-jump seminorm {worst:.4g} exceeds {slack} R'")
    return worst


@dataclass
class InitialSamples:
    x: np.ndarray
    kind: np.ndarray
    index: np.ndarray
    level: np.ndarray
    jump: np.ndarray
    discarded: int


def sample_initial(spec: ForwardRegularSpec, engine: ChainEngine, count: int,
                   seed: int) -> InitialSamples:
    """Component by weight, then a point of the component measure (tower
    levels: y ~ mu on the branch, x = T^l y). Draws falling in the deficit are
    discarded and counted."""
    if spec.max_index > engine.tau_max:
        raise DeficitError("spec reaches beyond the engine's branch table")
    custom = spec.custom if spec.custom is not None else engine.unit().values
    x, comp, jump, status = eng.sample_components(
        int(seed), int(count), spec.cw, spec.kinds, spec.idxs, spec.nlev, custom,
        engine.yg, engine.hc, engine.xs, engine.hf, engine.hf_cum, Y_LO, engine.hf_dx,
        spec.map.g, spec.map.c)
    ok = status == eng.OK
    return InitialSamples(x[ok], comp[ok, 0], comp[ok, 1], comp[ok, 2], jump[ok],
                          int((~ok).sum()))
