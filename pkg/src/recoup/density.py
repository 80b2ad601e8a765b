"""Positive densities on Y sampled on a uniform grid, the transfer operators
of the induced map, and its invariant density.

The reference measure "m" is Lebesgue on Y normalized to mass one, so the
doubling map has invariant density exactly 1. "mu" densities are relative to
the invariant probability h dm.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from numba import njit

from . import _kernels as kx
from .dynamics import Y_HI, Y_LO, MapSpec, preimages_of_half

DEFAULT_N_GRID = 4096
DEFICIT_BUDGET = 1e-8


class DensityError(ValueError):
    pass


class TruncationError(RuntimeError):
    pass


class ConvergenceError(RuntimeError):
    pass


def grid_nodes(n: int) -> np.ndarray:
    return np.linspace(Y_LO, Y_HI, n)


def _trapz_weights(n: int) -> np.ndarray:
    # trapezoid weights for the normalized measure on Y
    w = np.full(n, 1.0 / (n - 1))
    w[0] = w[-1] = 0.5 / (n - 1)
    return w


@dataclass(frozen=True)
class GridDensity:
    values: np.ndarray
    reference: str = "m"
    deficit: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size < 2:
            raise DensityError("need at least two grid values")
        if not np.all(np.isfinite(v)) or np.any(v <= 0.0):
            raise DensityError("density values must be finite and > 0")
        if self.reference not in ("m", "mu"):
            raise DensityError("reference must be 'm' or 'mu'")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def x(self) -> np.ndarray:
        return grid_nodes(self.n)

    @property
    def grid_step(self) -> float:
        return (Y_HI - Y_LO) / (self.n - 1)

    def __call__(self, y):
        return np.interp(y, self.x, self.values)

    @property
    def seminorm(self) -> float:
        return seminorm_log_lipschitz(self)

    def integral(self, h: "GridDensity | None" = None) -> float:
        """Trapezoid integral against m, or against h dm when h is given."""
        v = self.values if h is None else self.values * _on_grid(h, self.n)
        return float(_trapz_weights(self.n) @ v)

    def normalized(self, h: "GridDensity | None" = None) -> "GridDensity":
        return GridDensity(self.values / self.integral(h), self.reference, self.deficit)

    def resample(self, n: int) -> "GridDensity":
        if n == self.n:
            return self
        return GridDensity(self(grid_nodes(n)), self.reference, self.deficit)

    def to_csv(self, path, header: str = "") -> None:
        with open(path, "w") as fh:
            if header:
                fh.write(header)
            fh.write("x,value\n")
            for xi, vi in zip(self.x, self.values):
                fh.write(f"{xi:.17g},{vi:.17g}\n")


def _on_grid(h: GridDensity, n: int) -> np.ndarray:
    return h.values if h.n == n else h(grid_nodes(n))


def seminorm_log_lipschitz(phi: GridDensity) -> float:
    """max_i |log phi(x_{i+1}) - log phi(x_i)| / grid_step."""
    v = np.asarray(phi.values if isinstance(phi, GridDensity) else phi, float)
    if np.any(v <= 0.0):
        raise DensityError("seminorm needs a positive density")
    step = (Y_HI - Y_LO) / (v.size - 1)
    return float(np.max(np.abs(np.diff(np.log(v)))) / step)


@njit(cache=True)
def _build_transfer(grid, g, c, tau_max, cap):
    n = grid.size
    lo = grid[0]
    dx = grid[1] - grid[0]
    rows = np.empty(n * cap, np.int64)
    cols = np.empty(n * cap, np.int64)
    vals = np.empty(n * cap)
    nnz = 0
    for j in range(n):
        z = grid[j]
        jac = 1.0
        start = nnz
        for k in range(1, tau_max + 1):
            if k > 1:
                z = kx.left_inv(z, g, c)
                jac /= kx.left_deriv(z, g, c)
            ya = 0.5 * (1.0 + z)
            w = 0.5 * jac
            t = (ya - lo) / dx
            i = int(t)
            if i > n - 2:
                i = n - 2
            th = t - i
            # columns arrive in non-increasing order, so duplicates are
            # among the last two entries
            for col, val in ((i + 1, w * th), (i, w * (1.0 - th))):
                if nnz > start and cols[nnz - 1] == col:
                    vals[nnz - 1] += val
                elif nnz > start + 1 and cols[nnz - 2] == col:
                    vals[nnz - 2] += val
                else:
                    if nnz - start >= cap:
                        return rows, cols, vals, -1
                    rows[nnz] = j
                    cols[nnz] = col
                    vals[nnz] = val
                    nnz += 1
    return rows, cols, vals, nnz


@dataclass(frozen=True)
class TransferOperator:
    """(L phi)(y) = sum over branches with tau <= tau_max of phi(y_a) |y_a'(y)|
    on the grid, phi interpolated linearly."""
    map: MapSpec
    n_grid: int
    tau_max: int
    matrix: sp.csr_matrix
    uncovered: float  # m-mass of {tau > tau_max}

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.matrix @ values

    def deficit(self, values: np.ndarray) -> float:
        # integral of the linear interpolant over [1/2, 1/2 + uncovered/2]
        n = values.size
        x = grid_nodes(n)
        b = Y_LO + 0.5 * self.uncovered
        v_b = np.interp(b, x, values)
        k = np.searchsorted(x, b, side="right")
        xs = np.concatenate([x[:k], [b]])
        vs = np.concatenate([values[:k], [v_b]])
        return float(2.0 * np.trapezoid(vs, xs))


@lru_cache(maxsize=8)
def _operator_cached(family, gamma, n_grid, tau_max):
    map = MapSpec(family, gamma)
    grid = grid_nodes(n_grid)
    cap = 1024
    while True:
        rows, cols, vals, nnz = _build_transfer(grid, map.g, map.c, tau_max, cap)
        if nnz >= 0:
            break
        cap *= 4
    mat = sp.csr_matrix((vals[:nnz], (rows[:nnz], cols[:nnz])), shape=(n_grid, n_grid))
    xs = preimages_of_half(map, tau_max)
    return TransferOperator(map, n_grid, tau_max, mat, float(xs[tau_max - 1]))


def default_tau_max(map: MapSpec, budget: float = DEFICIT_BUDGET) -> int:
    """Smallest tau_max whose uncovered m-mass x_{tau_max-1} is below budget/2,
    leaving room for densities up to 2 near 1/2."""
    budget = 0.5 * budget
    if map.family == "doubling":
        return int(np.ceil(-np.log2(budget))) + 2
    n = 64
    while preimages_of_half(map, n)[n - 1] > budget:
        n *= 2
    xs = preimages_of_half(map, n)
    return int(np.argmax(xs <= budget)) + 1


def transfer_operator(map: MapSpec, n_grid: int = DEFAULT_N_GRID,
                      tau_max: int | None = None) -> TransferOperator:
    if tau_max is None:
        tau_max = default_tau_max(map)
    return _operator_cached(map.family, map.gamma, int(n_grid), int(tau_max))


def _check_budget(deficit: float, budget: float):
    if deficit > budget:
        raise TruncationError(f"truncation deficit {deficit:.3g} above budget {budget:.3g}")


def transfer_lebesgue(map: MapSpec, phi: GridDensity, tau_max: int | None = None,
                      budget: float = DEFICIT_BUDGET) -> GridDensity:
    op = transfer_operator(map, phi.n, tau_max)
    out = op.apply(phi.values)
    deficit = op.deficit(phi.values)
    _check_budget(deficit, budget)
    return GridDensity(out, "m", deficit)


def transfer_induced(map: MapSpec, phi: GridDensity, h: GridDensity,
                     tau_max: int | None = None, budget: float = DEFICIT_BUDGET) -> GridDensity:
    """(P phi)(y) = sum_a zeta(y_a) phi(y_a), zeta(y_a) = h(y_a)/(h(y) F'(y_a))."""
    hv = _on_grid(h, phi.n)
    op = transfer_operator(map, phi.n, tau_max)
    out = op.apply(phi.values * hv) / hv
    deficit = op.deficit(phi.values * hv)
    _check_budget(deficit, budget)
    return GridDensity(out, "mu", deficit)


@dataclass
class InvariantDensity:
    h: GridDensity
    K_emp: float
    lip_log_h: float
    residuals: list = field(default_factory=list)
    iterations: int = 0
    deficit: float = 0.0
    tau_max: int = 0

    @property
    def residual(self) -> float:
        return self.residuals[-1]


def invariant_density(map: MapSpec, tol: float = 1e-12, n_grid: int = DEFAULT_N_GRID,
                      tau_max: int | None = None, max_iter: int = 500,
                      budget: float = DEFICIT_BUDGET) -> InvariantDensity:
    """Power iteration from phi = 1 with renormalization; the residual is the
    L1(m) distance between consecutive normalized iterates."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    op = transfer_operator(map, n_grid, tau_max)
    w = _trapz_weights(n_grid)
    h = np.ones(n_grid)
    res = []
    for it in range(1, max_iter + 1):
        nxt = op.apply(h)
        nxt /= w @ nxt
        res.append(float(w @ np.abs(nxt - h)))
        h = nxt
        if res[-1] <= tol:
            break
    else:
        raise ConvergenceError(f"power iteration stalled at residual {res[-1]:.3g}")
    deficit = op.deficit(h)
    _check_budget(deficit, budget)
    hd = GridDensity(h, "m", deficit)
    K = float(max(h.max(), 1.0 / h.min()))
    return InvariantDensity(hd, K, seminorm_log_lipschitz(hd), res, it, deficit, op.tau_max)


@njit(cache=True)
def _zeta_distortion(grid, log_h_grid, hgrid, hvals, g, c, tau_max):
    n = grid.size
    lo = hgrid[0]
    dx = hgrid[1] - hgrid[0]
    z = grid.copy()
    jac = np.ones(n)
    lz = np.empty(n)
    worst = 0.0
    for k in range(1, tau_max + 1):
        for j in range(n):
            if k > 1:
                z[j] = kx.left_inv(z[j], g, c)
                jac[j] /= kx.left_deriv(z[j], g, c)
            t = (0.5 * (1.0 + z[j]) - lo) / dx
            i = min(int(t), hgrid.size - 2)
            th = t - i
            hy = hvals[i] * (1.0 - th) + hvals[i + 1] * th
            lz[j] = np.log(hy * 0.5 * jac[j]) - log_h_grid[j]
        for j in range(n - 1):
            d = abs(lz[j + 1] - lz[j]) / (grid[j + 1] - grid[j])
            if d > worst:
                worst = d
    return worst


def zeta_distortion(map: MapSpec, h: GridDensity, n_grid: int = 1024, tau_max: int = 512) -> float:
    """Grid estimate of max over branches of |log zeta|_d, measured in image
    coordinates, for zeta(y_a) = h(y_a) / (h(y) F'(y_a))."""
    grid = grid_nodes(n_grid)
    log_h = np.log(h(grid))
    return float(_zeta_distortion(grid, log_h, h.x, h.values, map.g, map.c, int(tau_max)))


def certified_K(inv: InvariantDensity, map: MapSpec, inflate: float = 1.1, **kw) -> float:
    """Constant bounding both h, 1/h and the distortion of zeta, inflated."""
    return inflate * max(inv.K_emp, zeta_distortion(map, inv.h, **kw), 1.0)


def _cdf_table(values: np.ndarray):
    n = values.size
    dx = (Y_HI - Y_LO) / (n - 1)
    cells = 0.5 * dx * (values[:-1] + values[1:])
    cdf = np.concatenate([[0.0], np.cumsum(cells)])
    return cdf, dx


def _invert_linear(cdf, values, dx, u):
    total = cdf[-1]
    target = u * total
    i = np.clip(np.searchsorted(cdf, target, side="right") - 1, 0, values.size - 2)
    a = values[i]
    b = values[i + 1]
    r = target - cdf[i]
    slope = (b - a) / dx
    # solve a t + slope t^2 / 2 = r for t in [0, dx]
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = np.sqrt(np.maximum(a * a + 2.0 * slope * r, 0.0))
        t_quad = 2.0 * r / (a + disc)
    t = np.clip(t_quad, 0.0, dx)
    return Y_LO + i * dx + t


def sample_from_density(phi: GridDensity, rng: np.random.Generator, size=None,
                        h: GridDensity | None = None):
    """Inverse-CDF sampling of the piecewise-linear density phi (times h when
    phi is relative to mu)."""
    v = phi.values if h is None else phi.values * _on_grid(h, phi.n)
    cdf, dx = _cdf_table(v)
    u = rng.random(size)
    out = _invert_linear(cdf, v, dx, np.asarray(u))
    return float(out) if size is None else out
