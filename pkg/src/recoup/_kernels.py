"""Compiled scalar primitives for the LSV family (doubling is gamma = 0)."""
import numpy as np
from numba import njit

HALF = 0.5


@njit(cache=True, inline="always")
def _pow(x, g):
    if g == 0.5:
        return np.sqrt(x)
    return x**g


@njit(cache=True, inline="always")
def left_map(x, g, c):
    if g == 0.0:
        return 2.0 * x
    return x * (1.0 + c * _pow(x, g))


@njit(cache=True, inline="always")
def left_deriv(x, g, c):
    if g == 0.0:
        return 2.0
    return 1.0 + c * (1.0 + g) * _pow(x, g)


@njit(cache=True)
def left_inv(z, g, c):
    """Solve x(1 + c x^g) = z on [0, 1/2]."""
    if g == 0.0:
        return 0.5 * z
    if z <= 0.0:
        return 0.0
    # f is convex and increasing, so Newton started right of the root
    # decreases monotonically onto it. lo <= root, hence z/(1+c lo^g) >= root.
    lo = z / (1.0 + c * _pow(z, g))
    x = z / (1.0 + c * _pow(lo, g))
    for _ in range(60):
        xg = _pow(x, g)
        f = x * (1.0 + c * xg) - z
        if f < 0.0:
            f = 0.0  # round-off below the root
        dx = f / (1.0 + c * (1.0 + g) * xg)
        x -= dx
        if dx <= 1e-16 * x:
            break
    return x


@njit(cache=True, inline="always")
def step(x, g, c):
    if x <= HALF:
        return left_map(x, g, c)
    return 2.0 * x - 1.0


@njit(cache=True, inline="always")
def deriv(x, g, c):
    if x <= HALF:
        return left_deriv(x, g, c)
    return 2.0


@njit(cache=True)
def orbit(x0, n, g, c):
    out = np.empty(n + 1)
    x = x0
    out[0] = x
    for k in range(n):
        x = step(x, g, c)
        out[k + 1] = x
    return out


@njit(cache=True)
def return_time(y, g, c, cap):
    """First n >= 1 with T^n y in [1/2, 1]; -1 when the cap is exceeded."""
    x = step(y, g, c)
    n = 1
    while x < HALF:
        if n >= cap:
            return -1
        x = left_map(x, g, c)
        n += 1
    return n


@njit(cache=True)
def first_hit(x, g, c, cap):
    """First n >= 0 with T^n x in [1/2, 1]; -1 when the cap is exceeded."""
    n = 0
    while x < HALF:
        if n >= cap:
            return -1
        x = left_map(x, g, c)
        n += 1
    return n


@njit(cache=True)
def preimages_of_half(n, g, c):
    """x_0 = 1/2, x_k = L^{-1}(x_{k-1}) for k <= n."""
    xs = np.empty(n + 1)
    xs[0] = HALF
    for k in range(1, n + 1):
        xs[k] = left_inv(xs[k - 1], g, c)
    return xs


@njit(cache=True)
def induced_inverse(y, tau, g, c):
    """Preimage of y in Y under F on the branch with return time tau,
    together with |d(preimage)/dy|."""
    z = y
    jac = 1.0
    for _ in range(tau - 1):
        z = left_inv(z, g, c)
        jac /= left_deriv(z, g, c)
    return 0.5 * (1.0 + z), 0.5 * jac


@njit(cache=True)
def left_inverse_n(y, n, g, c):
    """L^{-n}(y) and its derivative."""
    z = y
    jac = 1.0
    for _ in range(n):
        z = left_inv(z, g, c)
        jac /= left_deriv(z, g, c)
    return z, jac


@njit(cache=True)
def induced_map(y, g, c, cap):
    x = step(y, g, c)
    n = 1
    while x < HALF:
        if n >= cap:
            return -1.0, -1
        x = left_map(x, g, c)
        n += 1
    return x, n
