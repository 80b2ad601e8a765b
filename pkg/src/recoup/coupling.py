"""Exact coupled samples between a forward-regular measure and mu, and
triples joining two such couplings through a shared point of Y.

A sample draws a component and runs the word chain from its post-jump
density, then draws u ~ mu and pulls u back through the word and the
component's pre-jump inverse. The backward orbit is kept, so x reaches u
after `shift` steps by construction; the continuation after u is forward
iteration shared by both sides.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np
from numba import njit

from . import _engine as eng
from . import _kernels as kx
from .dynamics import DOUBLING, Y_LO, MapSpec
from .measures import KIND_NAMES, DeficitError, ForwardRegularSpec
from .regen import ChainDiagnostics, ChainEngine, WordSample, write_csv

INFINITE = math.inf
DEFAULT_BATCH = 1000


class MergeError(AssertionError):
    pass


# ----------------------------------------------------------------------------
# meeting times

@njit(cache=True)
def _meeting_forward(x, y, horizon, g, c, tol):
    a = kx.orbit(x, horizon, g, c)
    b = kx.orbit(y, horizon, g, c)
    # smallest m = max(k, n): compare the new row and column at each m
    for m in range(horizon + 1):
        for j in range(m + 1):
            if abs(a[m] - b[j]) <= tol or abs(a[j] - b[m]) <= tol:
                return m
    return -1


def meeting_time(map: MapSpec, x: float, y: float, horizon: int, tol: float = 0.0):
    """inf { max(k, n) : T^k x = T^n y } over k, n <= horizon by brute force on
    float orbits; equality is exact unless tol > 0. INFINITE if not found."""
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    for p in (x, y):
        if not 0.0 <= p <= 1.0:
            raise ValueError("points must lie in [0, 1]")
    m = _meeting_forward(float(x), float(y), int(horizon), map.g, map.c, float(tol))
    return INFINITE if m < 0 else int(m)


@njit(cache=True)
def _suffix_meet(a, b):
    i = a.size - 1
    j = b.size - 1
    while i > 0 and j > 0 and a[i - 1] == b[j - 1]:
        i -= 1
        j -= 1
    return max(i, j)


def meeting_time_orbits(orbit_a: np.ndarray, orbit_b: np.ndarray):
    """Meeting time of two stored orbits that end at the same point, found by
    matching their common suffix exactly."""
    if orbit_a[-1] != orbit_b[-1]:
        return INFINITE
    return int(_suffix_meet(np.ascontiguousarray(orbit_a), np.ascontiguousarray(orbit_b)))


def orbit_consistency(map: MapSpec, orbit: np.ndarray) -> float:
    """max_k |T(orbit[k]) - orbit[k+1]|; round-off sized for a true orbit."""
    if orbit.size < 2:
        return 0.0
    from .dynamics import step
    return float(np.max(np.abs(step(map, orbit[:-1]) - orbit[1:])))


# ----------------------------------------------------------------------------
# single samples

@njit(cache=True)
def _seed(s):
    np.random.seed(s)


@dataclass(frozen=True)
class CoupledPair:
    x: float
    y: float
    shift: int
    word: WordSample
    component: tuple
    orbit: np.ndarray = field(repr=False)

    @property
    def s_bound(self) -> int:
        return self.shift

    def y_orbit(self) -> np.ndarray:
        return self.orbit[self.shift:]

    def s(self):
        """Minimal meeting time along the stored orbits."""
        return meeting_time_orbits(self.orbit, self.y_orbit())


@dataclass(frozen=True)
class JointTriple:
    x: float
    y: float
    u: float
    shift_x: int
    shift_y: int
    words: tuple
    components: tuple
    orbit_x: np.ndarray = field(repr=False)
    orbit_y: np.ndarray = field(repr=False)

    @property
    def s_bound(self) -> int:
        return max(self.shift_x, self.shift_y)

    def s(self):
        return meeting_time_orbits(self.orbit_x[: self.shift_x + 1],
                                   self.orbit_y[: self.shift_y + 1])


def _custom(spec, engine):
    return spec.custom if spec.custom is not None else engine.unit().values


def _check(spec: ForwardRegularSpec, engine: ChainEngine):
    if spec.map != engine.map:
        raise ValueError("spec and engine are built for different maps")
    if spec.max_index > engine.tau_max:
        raise DeficitError("spec reaches beyond the engine's branch table")


def _refill(map: MapSpec) -> bool:
    return map.family == DOUBLING


class _Side:
    """Buffers for one-off draws from Python."""

    def __init__(self, engine: ChainEngine):
        n = engine.n_chain
        self.e = engine
        self.bufs = [np.empty(n) for _ in range(4)]
        self.letters = np.empty(engine.word_cap, np.int64)
        self.extra = (np.empty(n), np.empty((3, n)), np.empty(n))
        self.viol = np.zeros(eng.N_VIOL, np.int64)
        self.stats = np.zeros(4)

    def draw(self, spec):
        e = self.e
        phi, out, psi, cum = self.bufs
        res = eng.draw_side(
            spec.cw, spec.kinds, spec.idxs, spec.nlev, _custom(spec, e), phi, out, psi, cum,
            self.letters, e.c.xi, e.c.R, e.c.R_prime, e.init_slack, e.yg, e.hc, e.wq, e.xs,
            e.mu_br, e.YA, e.ZT, e.JA, e.LJ, e.hf, Y_LO, e.hf_dx, e.map.g, e.map.c,
            *self.extra, self.viol, self.stats)
        kind, idx, level, ell, t, status = (int(v) for v in res)
        if status != eng.OK:
            raise RuntimeError(f"sample discarded (status {status})")
        letters = self.letters[:ell].copy()
        word = WordSample(tuple(int(a) for a in letters), ell, t)
        shift = int(eng.jump_of(kind, idx, level)) + t
        return (KIND_NAMES[kind], idx, level), kind, word, letters, shift

    def pull(self, u, kind, comp, letters, shift):
        orbit = np.empty(shift + 1)
        x = eng.pullback(u, letters, letters.size, kind, comp[1], comp[2], self.e.map.g,
                         self.e.map.c, orbit, True)
        return x, orbit

    def diagnostics(self):
        return ChainDiagnostics.from_raw(self.viol, self.stats)


def _draw_u(engine):
    return float(eng.sample_mu(engine.hf, engine.hf_cum, Y_LO, engine.hf_dx))


def sample_pair(spec: ForwardRegularSpec, engine: ChainEngine,
                rng: np.random.Generator) -> CoupledPair:
    """One coupled pair (x, y) with x ~ spec, y ~ mu and T^shift x = y along
    the stored orbit."""
    _check(spec, engine)
    _seed(int(rng.integers(2**62)))
    side = _Side(engine)
    comp, kind, word, letters, shift = side.draw(spec)
    u = _draw_u(engine)
    x, orbit = side.pull(u, kind, comp, letters, shift)
    return CoupledPair(float(x), u, shift, word, comp, orbit)


def sample_joint(spec1: ForwardRegularSpec, spec2: ForwardRegularSpec, engine: ChainEngine,
                 rng: np.random.Generator) -> JointTriple:
    """Two couplings through one u ~ mu: T^shift_x x = u = T^shift_y y."""
    _check(spec1, engine)
    _check(spec2, engine)
    _seed(int(rng.integers(2**62)))
    side = _Side(engine)
    c1, k1, w1, l1, s1 = side.draw(spec1)
    c2, k2, w2, l2, s2 = side.draw(spec2)
    u = _draw_u(engine)
    x, ox = side.pull(u, k1, c1, l1, s1)
    y, oy = side.pull(u, k2, c2, l2, s2)
    return JointTriple(float(x), float(y), u, s1, s2, (w1, w2), (c1, c2), ox, oy)


# ----------------------------------------------------------------------------
# batches

def batch_seed(seed: int, index: int) -> int:
    """Stream for batch `index`; independent of how batches map to workers."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint64)[0] >> 2)


def _vtab(observable):
    if observable is None:
        return np.array([0.0, 0.0])
    return np.ascontiguousarray(observable.table, float)


@dataclass
class PairBatch:
    """Coupled pairs (x, y = u). Rows with status != OK were discarded (x is
    NaN). bx, by hold Birkhoff sums of x and y at the checkpoints; z and z2
    the truncated discrepancy sup over n <= horizon and n <= 2 horizon."""
    x: np.ndarray
    y: np.ndarray
    shift: np.ndarray
    word_length: np.ndarray
    t: np.ndarray
    kind: np.ndarray
    index: np.ndarray
    level: np.ndarray
    status: np.ndarray
    bx: np.ndarray
    by: np.ndarray
    z: np.ndarray
    z2: np.ndarray
    checkpoints: np.ndarray
    diagnostics: ChainDiagnostics

    @property
    def ok(self) -> np.ndarray:
        return self.status == eng.OK

    @property
    def s_bound(self) -> np.ndarray:
        return self.shift

    @property
    def jump(self) -> np.ndarray:
        return self.shift - self.t

    @property
    def s(self) -> np.ndarray:
        # the stored orbit of x ends at u, so nothing earlier can meet
        return self.shift

    def accepted(self) -> "PairBatch":
        m = self.ok
        return _select(self, m)

    def columns(self) -> dict:
        return {"x": self.x, "y": self.y, "shift": self.shift, "s": self.s,
                "word_len": self.word_length}

    def to_csv(self, path, header: str = "") -> str:
        return write_csv(path, self.columns(), header)


@dataclass
class JointBatch:
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    shift_x: np.ndarray
    shift_y: np.ndarray
    s: np.ndarray
    ells: np.ndarray
    ts: np.ndarray
    comps: np.ndarray
    status: np.ndarray
    bx: np.ndarray
    by: np.ndarray
    bu: np.ndarray
    z_xy: np.ndarray
    z_xu: np.ndarray
    z_yu: np.ndarray
    checkpoints: np.ndarray
    diagnostics: ChainDiagnostics

    @property
    def ok(self) -> np.ndarray:
        return self.status == eng.OK

    @property
    def s_bound(self) -> np.ndarray:
        return np.maximum(self.shift_x, self.shift_y)

    def accepted(self) -> "JointBatch":
        return _select(self, self.ok)

    def columns(self) -> dict:
        # shift and word_len count both sides: the larger shift, all letters
        return {"x": self.x, "y": self.y, "shift": self.s_bound, "s": self.s,
                "word_len": self.ells.sum(axis=1), "u": self.u,
                "shift_x": self.shift_x, "shift_y": self.shift_y}

    def to_csv(self, path, header: str = "") -> str:
        return write_csv(path, self.columns(), header)


def _select(batch, mask):
    kw = {}
    for f in fields(batch):
        v = getattr(batch, f.name)
        if isinstance(v, np.ndarray) and f.name != "checkpoints" and v.shape[:1] == mask.shape:
            v = v[mask]
        kw[f.name] = v
    return type(batch)(**kw)


def _concat(parts, cls):
    kw = {}
    for f in fields(cls):
        vals = [getattr(p, f.name) for p in parts]
        if f.name == "checkpoints":
            kw[f.name] = vals[0]
        elif f.name == "diagnostics":
            d = vals[0]
            for other in vals[1:]:
                d = d.merge(other)
            kw[f.name] = d
        else:
            kw[f.name] = np.concatenate(vals)
    return cls(**kw)


def _pair_job(args):
    spec, engine, seed, count, horizon, vtab, cps = args
    e = engine
    (x, u, shift, ells, ts, comp, status, bx, by, zt, viol, stats) = eng.run_pairs(
        seed, count, spec.cw, spec.kinds, spec.idxs, spec.nlev, _custom(spec, e), e.c.xi,
        e.c.R, e.c.R_prime, e.init_slack, e.yg, e.hc, e.wq, e.xs, e.mu_br, e.YA, e.ZT, e.JA,
        e.LJ, e.hf, e.hf_cum, Y_LO, e.hf_dx, e.map.g, e.map.c, e.word_cap, horizon, vtab,
        cps, _refill(e.map))
    return PairBatch(x, u, shift, ells, ts, comp[:, 0], comp[:, 1], comp[:, 2], status, bx,
                     by, zt[:, 0], zt[:, 1], cps, ChainDiagnostics.from_raw(viol, stats))


def _joint_job(args):
    spec1, spec2, engine, seed, count, horizon, vtab, cps = args
    e = engine
    (xs, shifts, meet, ells, ts, comps, status, bx, by, bu, zt, viol, stats) = eng.run_joint(
        seed, count, spec1.cw, spec1.kinds, spec1.idxs, spec1.nlev, _custom(spec1, e),
        spec2.cw, spec2.kinds, spec2.idxs, spec2.nlev, _custom(spec2, e), e.c.xi, e.c.R,
        e.c.R_prime, e.init_slack, e.yg, e.hc, e.wq, e.xs, e.mu_br, e.YA, e.ZT, e.JA, e.LJ,
        e.hf, e.hf_cum, Y_LO, e.hf_dx, e.map.g, e.map.c, e.word_cap, horizon, vtab, cps,
        _refill(e.map))
    return JointBatch(xs[:, 0], xs[:, 1], xs[:, 2], shifts[:, 0], shifts[:, 1], meet, ells, ts,
                      comps, status, bx, by, bu, zt[:, 0], zt[:, 1], zt[:, 2], cps,
                      ChainDiagnostics.from_raw(viol, stats))


def _run(job, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [job(a) for a in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, jobs))


def _plan(count, seed, batch_size):
    batch_size = batch_size or DEFAULT_BATCH
    sizes = [batch_size] * (count // batch_size)
    if count % batch_size:
        sizes.append(count % batch_size)
    return [(batch_seed(seed, i), n) for i, n in enumerate(sizes)]


def _checkpoints(checkpoints, horizon):
    cps = np.unique(np.asarray(checkpoints, np.int64))
    if cps.size and (cps[0] < 0 or cps[-1] > 2 * horizon):
        raise ValueError("checkpoints must lie in [0, 2 horizon]")
    return cps


def sample_pairs(spec: ForwardRegularSpec, engine: ChainEngine, count: int, seed: int,
                 horizon: int = 0, observable=None, checkpoints=(), workers: int = 1,
                 batch_size: int | None = None) -> PairBatch:
    """count pairs, split into fixed batches with their own streams, so the
    result does not depend on the number of workers."""
    _check(spec, engine)
    cps = _checkpoints(checkpoints, horizon)
    vtab = _vtab(observable)
    jobs = [(spec, engine, s, n, int(horizon), vtab, cps) for s, n in _plan(count, seed, batch_size)]
    return _concat(_run(_pair_job, jobs, workers), PairBatch)


def sample_joints(spec1: ForwardRegularSpec, spec2: ForwardRegularSpec, engine: ChainEngine,
                  count: int, seed: int, horizon: int = 0, observable=None, checkpoints=(),
                  workers: int = 1, batch_size: int | None = None) -> JointBatch:
    _check(spec1, engine)
    _check(spec2, engine)
    cps = _checkpoints(checkpoints, horizon)
    vtab = _vtab(observable)
    jobs = [(spec1, spec2, engine, s, n, int(horizon), vtab, cps)
            for s, n in _plan(count, seed, batch_size)]
    return _concat(_run(_joint_job, jobs, workers), JointBatch)


def default_workers() -> int:
    return max(1, min(os.cpu_count() or 1, 8))
