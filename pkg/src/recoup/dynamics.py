"""Interval maps, their first-return systems on Y = [1/2, 1], branches and
inverse branches.

The LSV map is T(x) = x(1 + 2^g x^g) on [0, 1/2] and 2x - 1 on (1/2, 1].
The doubling map is the same formula with g = 0, which is how the compiled
kernels treat it.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from numba import njit

from . import _kernels as kx

Y_LO, Y_HI = 0.5, 1.0

LSV = "lsv"
DOUBLING = "doubling"


class DomainError(ValueError):
    pass


class ReturnCapExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class MapSpec:
    family: str
    gamma: float = 0.0
    lam: float = 2.0
    K_hat: float | None = None
    eta: float = 1.0
    Y: tuple = (Y_LO, Y_HI)

    def __post_init__(self):
        if self.family == LSV:
            if not 0.0 < self.gamma < 1.0:
                raise ValueError("LSV needs gamma in (0, 1)")
        elif self.family == DOUBLING:
            object.__setattr__(self, "gamma", 0.0)
        else:
            raise ValueError(f"unknown map family {self.family!r}")
        if self.lam <= 1.0:
            raise ValueError("lambda must exceed 1")

    @classmethod
    def lsv(cls, gamma: float) -> "MapSpec":
        return cls(LSV, float(gamma))

    @classmethod
    def doubling(cls) -> "MapSpec":
        return cls(DOUBLING)

    # exponent and coefficient fed to the kernels
    @property
    def g(self) -> float:
        return 0.0 if self.family == DOUBLING else self.gamma

    @property
    def c(self) -> float:
        return 2.0**self.g

    @property
    def beta(self) -> float:
        """Tail exponent of m(tau >= n); infinite for the doubling map."""
        return np.inf if self.family == DOUBLING else 1.0 / self.gamma

    def label(self) -> str:
        return DOUBLING if self.family == DOUBLING else f"lsv(gamma={self.gamma:g})"


@dataclass(frozen=True)
class Branch:
    id: int
    lo: float
    hi: float
    tau: int
    orientation: int = 1

    @property
    def length(self) -> float:
        return self.hi - self.lo


@dataclass(frozen=True)
class HitComponent:
    lo: float
    hi: float
    hit_time: int
    target_branchless: bool

    @property
    def length(self) -> float:
        return self.hi - self.lo


@dataclass
class Partition:
    """Branches of F sorted by position, with tau decreasing left to right.

    `deficit` is the Lebesgue length of Y not covered (return time > tau_max).
    """
    lo: np.ndarray
    hi: np.ndarray
    tau: np.ndarray
    deficit: float

    def __len__(self):
        return len(self.tau)

    def __getitem__(self, i) -> Branch:
        return Branch(int(i), float(self.lo[i]), float(self.hi[i]), int(self.tau[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def by_tau(self, tau: int) -> Branch:
        i = len(self.tau) - int(tau)
        if not 0 <= i < len(self.tau) or self.tau[i] != tau:
            raise KeyError(f"no branch with tau={tau}")
        return self[i]


@dataclass
class HitPartition:
    lo: np.ndarray
    hi: np.ndarray
    hit_time: np.ndarray
    in_y: np.ndarray
    deficit: float

    def __len__(self):
        return len(self.hit_time)

    def __getitem__(self, i) -> HitComponent:
        return HitComponent(float(self.lo[i]), float(self.hi[i]),
                            int(self.hit_time[i]), bool(self.in_y[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def locate(self, x: float) -> HitComponent:
        for comp in self:
            if comp.lo <= x < comp.hi or (x == comp.hi == 1.0):
                return comp
        raise KeyError(f"{x} is not covered")


def _check_unit(x):
    arr = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise DomainError("points must lie in [0, 1]")
    return arr


@njit(cache=True)
def _step_many(x, g, c):
    out = np.empty_like(x)
    for i in range(x.size):
        out[i] = kx.step(x[i], g, c)
    return out


@njit(cache=True)
def _deriv_many(x, g, c):
    out = np.empty_like(x)
    for i in range(x.size):
        out[i] = kx.deriv(x[i], g, c)
    return out


@njit(cache=True)
def _induced_inverse_many(y, tau, g, c):
    out = np.empty_like(y)
    jac = np.empty_like(y)
    for i in range(y.size):
        out[i], jac[i] = kx.induced_inverse(y[i], tau, g, c)
    return out, jac


@njit(cache=True)
def _induced_many(y, g, c, cap):
    out = np.empty_like(y)
    tau = np.empty(y.size, np.int64)
    for i in range(y.size):
        out[i], tau[i] = kx.induced_map(y[i], g, c, cap)
    return out, tau


def _scalar_or_array(arr, out):
    return float(out[0]) if arr.ndim == 0 else out.reshape(arr.shape)


def step(map: MapSpec, x):
    """T(x); the point 1/2 belongs to the left branch."""
    arr = _check_unit(x)
    return _scalar_or_array(arr, _step_many(arr.reshape(-1), map.g, map.c))


def derivative(map: MapSpec, x):
    arr = _check_unit(x)
    return _scalar_or_array(arr, _deriv_many(arr.reshape(-1), map.g, map.c))


def orbit(map: MapSpec, x0: float, n: int) -> np.ndarray:
    """x0, T x0, ..., T^n x0 in floating point."""
    _check_unit(x0)
    return kx.orbit(float(x0), int(n), map.g, map.c)


def return_time(map: MapSpec, y: float, cap: int = 10**8) -> int:
    if not Y_LO <= y <= Y_HI:
        raise DomainError("return_time needs y in Y")
    n = kx.return_time(float(y), map.g, map.c, int(cap))
    if n < 0:
        raise ReturnCapExceeded(f"no return within {cap} steps from y={y!r}")
    return int(n)


def first_hit_time(map: MapSpec, x: float, cap: int = 10**8) -> int:
    _check_unit(x)
    n = kx.first_hit(float(x), map.g, map.c, int(cap))
    if n < 0:
        raise ReturnCapExceeded(f"no hit of Y within {cap} steps from x={x!r}")
    return int(n)


def induced_map(map: MapSpec, y, cap: int = 10**8):
    """F(y) = T^tau(y) (y), returned with tau."""
    arr = np.asarray(y, dtype=float)
    if np.any(arr < Y_LO) or np.any(arr > Y_HI):
        raise DomainError("induced map needs points of Y")
    out, tau = _induced_many(arr.reshape(-1), map.g, map.c, int(cap))
    if np.any(tau < 0):
        raise ReturnCapExceeded("return cap exceeded")
    if arr.ndim == 0:
        return float(out[0]), int(tau[0])
    return out.reshape(arr.shape), tau.reshape(arr.shape)


@lru_cache(maxsize=16)
def _preimages(g: float, c: float, n: int) -> np.ndarray:
    xs = kx.preimages_of_half(n, g, c)
    xs.setflags(write=False)
    return xs


def preimages_of_half(map: MapSpec, n: int) -> np.ndarray:
    """x_0 = 1/2 and x_k = L^{-1}(x_{k-1}); [x_k, x_{k-1}) first hits Y at time k."""
    return _preimages(map.g, map.c, int(n))


def branch_partition(map: MapSpec, tau_max: int) -> Partition:
    if tau_max < 1:
        raise ValueError("tau_max must be >= 1")
    xs = preimages_of_half(map, max(tau_max, 1))
    taus = np.arange(tau_max, 0, -1)
    lo = np.empty(tau_max)
    hi = np.empty(tau_max)
    # tau = 1 is [3/4, 1]; tau = k >= 2 is [(1+x_{k-1})/2, (1+x_{k-2})/2)
    lo[:] = 0.5 * (1.0 + xs[taus - 1])
    hi[:-1] = 0.5 * (1.0 + xs[taus[:-1] - 2])
    hi[-1] = 1.0
    deficit = lo[0] - Y_LO
    return Partition(lo, hi, taus.astype(np.int64), float(deficit))


def inverse_branch(map: MapSpec, branch, y, with_jacobian: bool = False):
    """The preimage of y in the given branch (a Branch or a return time)."""
    tau = branch.tau if isinstance(branch, Branch) else int(branch)
    if tau < 1:
        raise KeyError("branch not in partition")
    arr = np.asarray(y, dtype=float)
    if np.any(arr < Y_LO) or np.any(arr > Y_HI):
        raise DomainError("inverse branches act on Y")
    out, jac = _induced_inverse_many(arr.reshape(-1).copy(), tau, map.g, map.c)
    x = _scalar_or_array(arr, out)
    if with_jacobian:
        return x, _scalar_or_array(arr, jac)
    return x


def hit_components(map: MapSpec, r_max: int) -> HitPartition:
    """Intervals of [0, 1] on which the first time T^r lands in a regular
    position is constant: branches of Y (r = tau) and [x_n, x_{n-1}) (r = n).
    """
    if r_max < 1:
        raise ValueError("r_max must be >= 1")
    part = branch_partition(map, r_max)
    xs = preimages_of_half(map, r_max)
    n = np.arange(r_max, 0, -1)
    lo = np.concatenate([xs[n], part.lo])
    hi = np.concatenate([xs[n - 1], part.hi])
    hit = np.concatenate([n, part.tau]).astype(np.int64)
    in_y = np.concatenate([np.zeros(r_max, bool), np.ones(len(part), bool)])
    deficit = float(xs[r_max]) + part.deficit
    return HitPartition(lo, hi, hit, in_y, deficit)


@njit(cache=True)
def _distortion(grid, g, c, tau_max):
    worst = 0.0
    n = grid.size
    prev = np.empty(n)
    z = grid.copy()
    jac = np.ones(n)
    for k in range(1, tau_max + 1):
        if k > 1:
            for j in range(n):
                z[j] = kx.left_inv(z[j], g, c)
                jac[j] /= kx.left_deriv(z[j], g, c)
        for j in range(n):
            prev[j] = np.log(jac[j])
        for j in range(n - 1):
            d = abs(prev[j + 1] - prev[j]) / (grid[j + 1] - grid[j])
            if d > worst:
                worst = d
    return worst


def estimate_distortion(map: MapSpec, n_grid: int = 2048, tau_max: int = 512) -> float:
    """Grid estimate of sup |log F'(x) - log F'(x')| / |Fx - Fx'| over
    same-branch pairs, measured in image coordinates."""
    grid = np.linspace(Y_LO, Y_HI, n_grid)
    return float(_distortion(grid, map.g, map.c, int(tau_max)))


def certify(map: MapSpec, inflate: float = 1.1, **kw) -> MapSpec:
    """Copy of map with K_hat set to the inflated grid estimate."""
    return replace(map, K_hat=inflate * estimate_distortion(map, **kw))
