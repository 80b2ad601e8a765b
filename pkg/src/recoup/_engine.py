"""Compiled word chain, pullback and orbit kernels.

Densities live on a coarse uniform "chain grid" over Y and are relative to mu.
The fine invariant density (hf_*) is used wherever exact mu-masses matter.
"""
import numpy as np
from numba import njit

from . import _kernels as kx

# component kinds
MU, LEB_Y, LEB_LEFT, TOWER, CUSTOM = 0, 1, 2, 3, 4

# step outcomes
TERMINATED = 0
OVERFLOW = -1

# violation counters
V_POSITIVE, V_PSI_BOUNDS, V_WEIGHT, V_PSI_SEMI, V_STEP_SEMI, V_INIT_SEMI = range(6)
N_VIOL = 6

# sample status
OK, DISCARD_OVERFLOW, DISCARD_CAP, DISCARD_COMPONENT = 0, 1, 2, 3

NO_UU = np.empty(0)


@njit(cache=True, inline="always")
def interp_uniform(vals, lo, dx, y):
    n = vals.size
    t = (y - lo) / dx
    i = int(t)
    if i < 0:
        i = 0
    elif i > n - 2:
        i = n - 2
    th = t - i
    return vals[i] + th * (vals[i + 1] - vals[i])


@njit(cache=True, inline="always")
def interp_fast(vals, lo, inv_dx, y):
    n = vals.size
    t = (y - lo) * inv_dx
    i = int(t)
    if i < 0:
        i = 0
    elif i > n - 2:
        i = n - 2
    th = t - i
    return vals[i] + th * (vals[i + 1] - vals[i])


@njit(cache=True, inline="always", fastmath={"reassoc"})
def ratio_violated(v, q):
    """True if some adjacent ratio leaves [1/q, q], i.e. a grid log-slope
    above log(q)/dx. Multiplications only."""
    bad = False
    for j in range(v.size - 1):
        a = v[j]
        b = v[j + 1]
        bad |= (b > q * a) | (a > q * b)
    return bad


@njit(cache=True)
def cdf_point(vals, cum, lo, dx, y):
    """Integral over [lo, y] of the piecewise-linear interpolant (dx units)."""
    n = vals.size
    t = (y - lo) / dx
    i = int(t)
    if i < 0:
        return 0.0
    if i > n - 2:
        i = n - 2
    th = t - i
    if th > 1.0:
        th = 1.0
    fy = vals[i] + th * (vals[i + 1] - vals[i])
    return cum[i] + 0.5 * th * dx * (vals[i] + fy)


@njit(cache=True)
def invert_cdf(vals, cum, lo, dx, target):
    n = vals.size
    a, b = 0, n - 1
    while b - a > 1:
        mid = (a + b) // 2
        if cum[mid] <= target:
            a = mid
        else:
            b = mid
    r = target - cum[a]
    fa = vals[a]
    slope = (vals[a + 1] - fa) / dx
    disc = fa * fa + 2.0 * slope * r
    if disc < 0.0:
        disc = 0.0
    t = 2.0 * r / (fa + np.sqrt(disc)) if fa + np.sqrt(disc) > 0.0 else 0.0
    if t > dx:
        t = dx
    return lo + a * dx + t


@njit(cache=True, inline="always")
def _first_at_or_below(xs, w, a, b):
    # smallest index in (a, b] with xs[index] <= w, given xs[b] <= w
    while b - a > 1:
        mid = (a + b) // 2
        if xs[mid] <= w:
            b = mid
        else:
            a = mid
    return b


@njit(cache=True)
def branch_of(y, xs):
    """Return time of y in Y from x_n = L^{-n}(1/2); -1 beyond the table."""
    w = 2.0 * y - 1.0
    if w >= 0.5:
        return 1
    m = xs.size
    if xs[m - 1] > w:
        return -1
    # short branches first: the head of xs stays in cache
    head = min(m, 1024)
    if xs[head - 1] <= w:
        return _first_at_or_below(xs, w, -1, head - 1) + 1
    return _first_at_or_below(xs, w, head - 1, m - 1) + 1


@njit(cache=True)
def branch_bounds(tau, xs):
    lo = 0.5 * (1.0 + xs[tau - 1])
    hi = 1.0 if tau == 1 else 0.5 * (1.0 + xs[tau - 2])
    return lo, hi


@njit(cache=True, inline="always")
def _plan(ya, lo, inv_dx, n, zt):
    # zt[1], zt[2]: left node (as float) and offset for interpolating at ya
    t = (ya - lo) * inv_dx
    i = int(t)
    if i < 0:
        i = 0
    elif i > n - 2:
        i = n - 2
    zt[1] = i
    zt[2] = t - i


@njit(cache=True)
def fill_branch(tau, yg, hc, hf, hf_lo, hf_dx, g, c, ya, zt, jac_out):
    """Preimages, zeta and |y_a'| of branch tau at the chain-grid nodes.
    zt has rows (zeta, left node, offset)."""
    n = yg.size
    inv_dx = 1.0 / (yg[1] - yg[0])
    for j in range(n):
        z = yg[j]
        jac = 1.0
        for _ in range(tau - 1):
            z = kx.left_inv(z, g, c)
            jac /= kx.left_deriv(z, g, c)
        ya[j] = 0.5 * (1.0 + z)
        jac_out[j] = 0.5 * jac
        zt[0, j] = interp_uniform(hf, hf_lo, hf_dx, ya[j]) * jac_out[j] / hc[j]
        _plan(ya[j], yg[0], inv_dx, n, zt[:, j])


@njit(cache=True)
def fill_left(n, yg, g, c, za, jac_out):
    for j in range(yg.size):
        z, jac = kx.left_inverse_n(yg[j], n, g, c)
        za[j] = z
        jac_out[j] = jac


@njit(cache=True)
def build_tables(yg, hc, hf, hf_lo, hf_dx, g, c, k_tab):
    n = yg.size
    YA = np.empty((k_tab, n))
    ZT = np.empty((k_tab, 3, n))
    JA = np.empty((k_tab, n))
    LJ = np.empty((k_tab, n))
    inv_dx = 1.0 / (yg[1] - yg[0])
    z = yg.copy()
    jac = np.ones(n)
    for k in range(1, k_tab + 1):
        for j in range(n):
            if k > 1:
                z[j] = kx.left_inv(z[j], g, c)
                jac[j] /= kx.left_deriv(z[j], g, c)
            YA[k - 1, j] = 0.5 * (1.0 + z[j])
            JA[k - 1, j] = 0.5 * jac[j]
            ZT[k - 1, 0, j] = interp_uniform(hf, hf_lo, hf_dx, YA[k - 1, j]) * JA[k - 1, j] / hc[j]
            _plan(YA[k - 1, j], yg[0], inv_dx, n, ZT[k - 1, :, j])
    # |(L^{-n})'| at the nodes for the left components
    z = yg.copy()
    jac = np.ones(n)
    for k in range(1, k_tab + 1):
        for j in range(n):
            z[j] = kx.left_inv(z[j], g, c)
            jac[j] /= kx.left_deriv(z[j], g, c)
            LJ[k - 1, j] = jac[j]
    return YA, ZT, JA, LJ


@njit(cache=True, fastmath={"reassoc", "contract"})
def normalize_mu(v, hc, wq):
    s = 0.0
    for j in range(v.size):
        s += wq[j] * v[j] * hc[j]
    inv = 1.0 / s
    for j in range(v.size):
        v[j] *= inv
    return s


@njit(cache=True)
def max_log_ratio(v, dx):
    worst = 1.0
    for j in range(v.size - 1):
        r = v[j + 1] / v[j]
        if r < 1.0:
            r = 1.0 / r
        if r > worst:
            worst = r
    return np.log(worst) / dx


@njit(cache=True)
def initial_density(kind, idx, level, phi, custom, yg, hc, wq, mu_br, YA, ZT, JA, LJ,
                    hf, hf_lo, hf_dx, g, c, buf_ya, buf_zt, buf_j):
    """Post-jump density (relative to mu) of a component, normalized."""
    n = yg.size
    k_tab = YA.shape[0]
    if kind == MU:
        for j in range(n):
            phi[j] = 1.0
        return
    if kind == CUSTOM:
        for j in range(n):
            phi[j] = custom[j]
        normalize_mu(phi, hc, wq)
        return
    if kind == LEB_LEFT:
        if idx <= k_tab:
            for j in range(n):
                phi[j] = LJ[idx - 1, j] / hc[j]
        else:
            fill_left(idx, yg, g, c, buf_ya, buf_j)
            for j in range(n):
                phi[j] = buf_j[j] / hc[j]
    else:
        if idx <= k_tab:
            zt = ZT[idx - 1, 0]
            ja = JA[idx - 1]
        else:
            fill_branch(idx, yg, hc, hf, hf_lo, hf_dx, g, c, buf_ya, buf_zt, buf_j)
            zt = buf_zt[0]
            ja = buf_j
        if kind == TOWER:
            for j in range(n):
                phi[j] = zt[j]
        else:
            for j in range(n):
                phi[j] = ja[j] / hc[j]
    normalize_mu(phi, hc, wq)


@njit(cache=True)
def pick_component(cw, u):
    a, b = -1, cw.size - 1
    if u >= cw[b]:
        return -1
    while b - a > 1:
        mid = (a + b) // 2
        if cw[mid] > u:
            b = mid
        else:
            a = mid
    return b


@njit(cache=True)
def walk(phi, out, psi, cum, letters, uu, xi, R, Rp, yg, hc, wq, xs, mu_br, ZT,
         hf, hf_lo, hf_dx, g, c, buf_ya, buf_zt, buf_j, viol, stats):
    """Runs the split-and-select chain from phi (overwritten) until it
    terminates. Returns (length, t, status); letters receives the word.

    With uu = (u_term, u_branch) only one step is taken with those uniforms.
    The whole loop lives in one function: a call per step would pay atomic
    reference counting on every array argument.

    stats: [max psi seminorm, max post-step seminorm, on-the-fly tables,
    steps]; the two maxima are sampled every 16th step, the threshold
    checks run on every step.
    """
    n = phi.size
    lo = yg[0]
    dx = yg[1] - yg[0]
    half = 0.5 * dx
    lower = np.exp(-R) * (1.0 - xi)
    upper = np.exp(R) * (1.0 - xi)
    q_R = np.exp(R * dx)
    q_Rp = np.exp(Rp * dx)
    k_tab = ZT.shape[0]
    single = uu.size >= 2
    cap = letters.size
    ell = 0
    t = 0
    while True:
        sampled = (int(stats[3]) & 15) == 0
        stats[3] += 1
        if single:
            u_term = uu[0]
            u_branch = uu[1]
        else:
            u_term = np.random.random()
            u_branch = np.random.random()
        # branch-free flags keep these loops vectorized
        nonpos = False
        outside = False
        for j in range(n):
            v = phi[j] - xi
            psi[j] = v
            nonpos |= v <= 0.0
            outside |= (v < lower) | (v > upper)
        if nonpos:
            viol[V_POSITIVE] += 1
            for j in range(n):
                if psi[j] <= 0.0:
                    psi[j] = 1e-300
        if outside:
            viol[V_PSI_BOUNDS] += 1
        if ratio_violated(psi, q_R):
            viol[V_PSI_SEMI] += 1
        if sampled:
            s_psi = max_log_ratio(psi, dx)
            if s_psi > stats[0]:
                stats[0] = s_psi
        if u_term < xi:
            return ell, t, OK
        # out holds psi*h while selecting
        for j in range(n):
            out[j] = psi[j] * hc[j]
        cum[0] = 0.0
        for j in range(n - 1):
            cum[j + 1] = cum[j] + half * (out[j] + out[j + 1])
        total = cum[n - 1]
        ystar = invert_cdf(out, cum, lo, dx, u_branch * total)
        tau = branch_of(ystar, xs)
        if tau < 0:
            return ell, t, DISCARD_OVERFLOW
        if ell >= cap:
            return ell, t, DISCARD_CAP
        a_lo, a_hi = branch_bounds(tau, xs)
        r_a = (cdf_point(out, cum, lo, dx, a_hi) - cdf_point(out, cum, lo, dx, a_lo)) / total * (1.0 - xi)
        mu_a = mu_br[tau - 1]
        if r_a < lower * mu_a * (1.0 - 1e-9) or r_a > upper * mu_a * (1.0 + 1e-9):
            viol[V_WEIGHT] += 1
        if tau <= k_tab:
            row = tau - 1
            for j in range(n):
                i = int(ZT[row, 1, j])
                p = psi[i]
                out[j] = ZT[row, 0, j] * (p + ZT[row, 2, j] * (psi[i + 1] - p))
        else:
            fill_branch(tau, yg, hc, hf, hf_lo, hf_dx, g, c, buf_ya, buf_zt, buf_j)
            stats[2] += 1
            for j in range(n):
                i = int(buf_zt[1, j])
                p = psi[i]
                out[j] = buf_zt[0, j] * (p + buf_zt[2, j] * (psi[i + 1] - p))
        normalize_mu(out, hc, wq)
        if ratio_violated(out, q_Rp):
            viol[V_STEP_SEMI] += 1
        if sampled:
            s_out = max_log_ratio(out, dx)
            if s_out > stats[1]:
                stats[1] = s_out
        letters[ell] = tau
        ell += 1
        t += tau
        for j in range(n):
            phi[j] = out[j]
        if single:
            return ell, t, OK


@njit(cache=True)
def pullback(u, letters, ell, kind, idx, level, g, c, orbit, write):
    """Pull u back through the word, then through the component's pre-jump
    inverse. With write=True the orbit x_0..x_shift is stored in orbit."""
    y = u
    p = 0
    if write:
        # total length is known by the caller; fill from the end
        p = orbit.size - 1
        orbit[p] = y
    for i in range(ell - 1, -1, -1):
        tau = letters[i]
        z = y
        for _ in range(tau - 1):
            z = kx.left_inv(z, g, c)
            if write:
                p -= 1
                orbit[p] = z
        y = 0.5 * (1.0 + z)
        if write:
            p -= 1
            orbit[p] = y
    if kind == MU or kind == CUSTOM:
        return y
    if kind == LEB_LEFT:
        steps = idx
    elif kind == TOWER and level > 0:
        steps = idx - level
    else:
        steps = -1  # full inverse branch idx
    if steps >= 0:
        z = y
        for _ in range(steps):
            z = kx.left_inv(z, g, c)
            if write:
                p -= 1
                orbit[p] = z
        return z
    z = y
    for _ in range(idx - 1):
        z = kx.left_inv(z, g, c)
        if write:
            p -= 1
            orbit[p] = z
    x = 0.5 * (1.0 + z)
    if write:
        p -= 1
        orbit[p] = x
    return x


@njit(cache=True)
def jump_of(kind, idx, level):
    if kind == MU or kind == CUSTOM:
        return 0
    if kind == TOWER:
        return idx - level
    return idx


@njit(cache=True)
def forward(x, n, g, c, refill, out, start):
    """Writes n forward iterates of x into out[start+1 .. start+n].

    For the doubling map each step shifts out one binary digit; refill
    appends a fresh random digit at 2^-53 so the orbit stays a faithful
    orbit of a real point instead of collapsing onto 0.
    """
    for k in range(n):
        if refill:
            if x <= 0.5:
                x = 2.0 * x
            else:
                x = 2.0 * x - 1.0
            if x < 1.0 and np.random.random() < 0.5:
                x += 2.0**-53
        else:
            x = kx.step(x, g, c)
        out[start + 1 + k] = x


@njit(cache=True)
def sample_mu(hf, hf_cum, hf_lo, hf_dx):
    return invert_cdf(hf, hf_cum, hf_lo, hf_dx, np.random.random() * hf_cum[-1])


@njit(cache=True)
def draw_side(cw, kinds, idxs, nlev, custom, phi, out, psi, cum, letters, xi, R, Rp, init_slack,
              yg, hc, wq, xs, mu_br, YA, ZT, JA, LJ, hf, hf_lo, hf_dx, g, c,
              buf_ya, buf_zt, buf_j, viol, stats):
    """Component draw plus word. Returns (kind, idx, level, ell, t, status)."""
    comp = pick_component(cw, np.random.random())
    if comp < 0:
        return -1, 0, 0, 0, 0, DISCARD_COMPONENT
    kind = kinds[comp]
    idx = idxs[comp]
    level = 0
    if nlev[comp] > 1:
        level = int(np.random.random() * nlev[comp])
        if level >= nlev[comp]:
            level = nlev[comp] - 1
    initial_density(kind, idx, level, phi, custom, yg, hc, wq, mu_br, YA, ZT, JA, LJ,
                    hf, hf_lo, hf_dx, g, c, buf_ya, buf_zt, buf_j)
    dx = yg[1] - yg[0]
    if max_log_ratio(phi, dx) > Rp * init_slack:
        viol[V_INIT_SEMI] += 1
    ell, t, status = walk(phi, out, psi, cum, letters, NO_UU, xi, R, Rp, yg, hc, wq, xs, mu_br,
                              ZT, hf, hf_lo, hf_dx, g, c, buf_ya, buf_zt, buf_j, viol, stats)
    return kind, idx, level, ell, t, status


@njit(cache=True, inline="always")
def obs(vtab, x):
    """Observable tabulated on a uniform grid over [0, 1], linear in between.
    A two-point table [-c, 1 - c] is exactly x - c."""
    return interp_uniform(vtab, 0.0, 1.0 / (vtab.size - 1), x)


@njit(cache=True)
def birkhoff_from_orbit(orbit, length, vtab, checkpoints, sums):
    """sums[i] = sum_{k < checkpoints[i]} v(orbit[k])."""
    acc = 0.0
    ci = 0
    nc = checkpoints.size
    for k in range(length + 1):
        while ci < nc and checkpoints[ci] == k:
            sums[ci] = acc
            ci += 1
        if k < length:
            acc += obs(vtab, orbit[k])


@njit(cache=True)
def z_trunc(prefix_a, off_a, prefix_b, off_b, horizon):
    """max_{0<=n<=horizon} |v_n(a) - v_n(b)| from prefix sums along a common
    orbit; a starts at index off_a, b at off_b."""
    worst = 0.0
    for n in range(horizon + 1):
        d = (prefix_a[off_a + n] - prefix_a[off_a]) - (prefix_b[off_b + n] - prefix_b[off_b])
        if d < 0.0:
            d = -d
        if d > worst:
            worst = d
    return worst


@njit(cache=True)
def run_pairs(seed, count, cw, kinds, idxs, nlev, custom, xi, R, Rp, init_slack, yg, hc, wq, xs,
              mu_br, YA, ZT, JA, LJ, hf, hf_cum, hf_lo, hf_dx, g, c, word_cap,
              horizon, vtab, checkpoints, refill):
    """count coupled pairs (x, u) with u = T^shift x along the stored orbit.

    With horizon > 0 the orbit x_0 .. x_{shift + 2 horizon} is built and the
    outputs include Birkhoff sums at the checkpoints and the truncated
    discrepancy sup over n <= horizon and n <= 2 horizon.
    """
    np.random.seed(seed)
    n = yg.size
    phi = np.empty(n)
    out = np.empty(n)
    psi = np.empty(n)
    cum = np.empty(n)
    buf_ya = np.empty(n)
    buf_zt = np.empty((3, n))
    buf_j = np.empty(n)
    letters = np.empty(word_cap, np.int64)
    viol = np.zeros(N_VIOL, np.int64)
    stats = np.zeros(4)
    x_out = np.empty(count)
    u_out = np.empty(count)
    shift = np.zeros(count, np.int64)
    ells = np.zeros(count, np.int64)
    ts = np.zeros(count, np.int64)
    comp = np.zeros((count, 3), np.int64)
    status = np.zeros(count, np.int64)
    ncp = checkpoints.size
    bx = np.zeros((count, ncp))
    by = np.zeros((count, ncp))
    zt = np.zeros((count, 2))
    orbit = np.empty(1)
    prefix = np.empty(1)
    for s in range(count):
        kind, idx, level, ell, t, st = draw_side(
            cw, kinds, idxs, nlev, custom, phi, out, psi, cum, letters, xi, R, Rp, init_slack,
            yg, hc, wq, xs, mu_br, YA, ZT, JA, LJ, hf, hf_lo, hf_dx, g, c,
            buf_ya, buf_zt, buf_j, viol, stats)
        u = sample_mu(hf, hf_cum, hf_lo, hf_dx)
        status[s] = st
        ells[s] = ell
        ts[s] = t
        comp[s, 0] = kind
        comp[s, 1] = idx
        comp[s, 2] = level
        if st != OK:
            x_out[s] = np.nan
            u_out[s] = u
            continue
        sh = jump_of(kind, idx, level) + t
        shift[s] = sh
        u_out[s] = u
        if horizon > 0:
            total = sh + 2 * horizon
            if orbit.size < total + 1:
                orbit = np.empty(2 * (total + 1))
                prefix = np.empty(2 * (total + 1))
            seg = orbit[: sh + 1]
            x_out[s] = pullback(u, letters, ell, kind, idx, level, g, c, seg, True)
            forward(u, 2 * horizon, g, c, refill, orbit, sh)
            prefix[0] = 0.0
            for k in range(total):
                prefix[k + 1] = prefix[k] + obs(vtab, orbit[k])
            for i in range(ncp):
                bx[s, i] = prefix[checkpoints[i]]
                by[s, i] = prefix[sh + checkpoints[i]] - prefix[sh]
            zt[s, 0] = z_trunc(prefix, 0, prefix, sh, horizon)
            zt[s, 1] = z_trunc(prefix, 0, prefix, sh, 2 * horizon)
        else:
            x_out[s] = pullback(u, letters, ell, kind, idx, level, g, c, orbit, False)
    return x_out, u_out, shift, ells, ts, comp, status, bx, by, zt, viol, stats


@njit(cache=True)
def run_joint(seed, count, cw1, kinds1, idxs1, nlev1, custom1, cw2, kinds2, idxs2, nlev2,
              custom2, xi, R, Rp,
              init_slack, yg, hc, wq, xs, mu_br, YA, ZT, JA, LJ, hf, hf_cum, hf_lo,
              hf_dx, g, c, word_cap, horizon, vtab, checkpoints, refill):
    """Triples (x, y, u): one u ~ mu, independent component and word stages
    per side, both pulled back from the same u."""
    np.random.seed(seed)
    n = yg.size
    phi = np.empty(n)
    out = np.empty(n)
    psi = np.empty(n)
    cum = np.empty(n)
    buf_ya = np.empty(n)
    buf_zt = np.empty((3, n))
    buf_j = np.empty(n)
    let1 = np.empty(word_cap, np.int64)
    let2 = np.empty(word_cap, np.int64)
    viol = np.zeros(N_VIOL, np.int64)
    stats = np.zeros(4)
    xs_out = np.empty((count, 3))
    shifts = np.zeros((count, 2), np.int64)
    ells = np.zeros((count, 2), np.int64)
    ts = np.zeros((count, 2), np.int64)
    comps = np.zeros((count, 6), np.int64)
    status = np.zeros(count, np.int64)
    ncp = checkpoints.size
    bx = np.zeros((count, ncp))
    by = np.zeros((count, ncp))
    bu = np.zeros((count, ncp))
    zt = np.zeros((count, 3))
    meet = np.zeros(count, np.int64)
    ox = np.empty(1)
    oy = np.empty(1)
    px = np.empty(1)
    py = np.empty(1)
    for s in range(count):
        k1, i1, l1, e1, t1, st1 = draw_side(
            cw1, kinds1, idxs1, nlev1, custom1, phi, out, psi, cum, let1, xi, R, Rp, init_slack,
            yg, hc, wq, xs, mu_br, YA, ZT, JA, LJ, hf, hf_lo, hf_dx, g, c,
            buf_ya, buf_zt, buf_j, viol, stats)
        k2, i2, l2, e2, t2, st2 = draw_side(
            cw2, kinds2, idxs2, nlev2, custom2, phi, out, psi, cum, let2, xi, R, Rp, init_slack,
            yg, hc, wq, xs, mu_br, YA, ZT, JA, LJ, hf, hf_lo, hf_dx, g, c,
            buf_ya, buf_zt, buf_j, viol, stats)
        u = sample_mu(hf, hf_cum, hf_lo, hf_dx)
        comps[s, 0] = k1
        comps[s, 1] = i1
        comps[s, 2] = l1
        comps[s, 3] = k2
        comps[s, 4] = i2
        comps[s, 5] = l2
        ells[s, 0] = e1
        ells[s, 1] = e2
        ts[s, 0] = t1
        ts[s, 1] = t2
        xs_out[s, 2] = u
        status[s] = st1 if st1 != OK else st2
        if status[s] != OK:
            xs_out[s, 0] = np.nan
            xs_out[s, 1] = np.nan
            continue
        s1 = jump_of(k1, i1, l1) + t1
        s2 = jump_of(k2, i2, l2) + t2
        shifts[s, 0] = s1
        shifts[s, 1] = s2
        tx = s1 + 2 * horizon
        ty = s2 + 2 * horizon
        if ox.size < tx + 1:
            ox = np.empty(2 * (tx + 1))
            px = np.empty(2 * (tx + 1))
        if oy.size < ty + 1:
            oy = np.empty(2 * (ty + 1))
            py = np.empty(2 * (ty + 1))
        xs_out[s, 0] = pullback(u, let1, e1, k1, i1, l1, g, c, ox[: s1 + 1], True)
        xs_out[s, 1] = pullback(u, let2, e2, k2, i2, l2, g, c, oy[: s2 + 1], True)
        # both orbits end at u; a shared stretch before it meets earlier
        m = 0
        while m < min(s1, s2) and ox[s1 - 1 - m] == oy[s2 - 1 - m]:
            m += 1
        meet[s] = max(s1, s2) - m
        if horizon > 0:
            forward(u, 2 * horizon, g, c, refill, ox, s1)
            for k in range(2 * horizon):
                oy[s2 + 1 + k] = ox[s1 + 1 + k]
            px[0] = 0.0
            for k in range(tx):
                px[k + 1] = px[k] + obs(vtab, ox[k])
            py[0] = 0.0
            for k in range(ty):
                py[k + 1] = py[k] + obs(vtab, oy[k])
            for i in range(ncp):
                cp = checkpoints[i]
                bx[s, i] = px[cp]
                by[s, i] = py[cp]
                bu[s, i] = px[s1 + cp] - px[s1]
            zt[s, 0] = z_trunc(px, 0, py, 0, horizon)
            zt[s, 1] = z_trunc(px, 0, px, s1, horizon)
            zt[s, 2] = z_trunc(py, 0, py, s2, horizon)
    return xs_out, shifts, meet, ells, ts, comps, status, bx, by, bu, zt, viol, stats


@njit(cache=True)
def run_words(seed, count, phi0, xi, R, Rp, yg, hc, wq, xs, mu_br, YA, ZT, hf, hf_lo,
              hf_dx, g, c, word_cap, first_letters):
    """Word lengths and return-time sums of count chains started at phi0."""
    np.random.seed(seed)
    n = yg.size
    phi = np.empty(n)
    out = np.empty(n)
    psi = np.empty(n)
    cum = np.empty(n)
    buf_ya = np.empty(n)
    buf_zt = np.empty((3, n))
    buf_j = np.empty(n)
    letters = np.empty(word_cap, np.int64)
    viol = np.zeros(N_VIOL, np.int64)
    stats = np.zeros(4)
    ells = np.zeros(count, np.int64)
    ts = np.zeros(count, np.int64)
    status = np.zeros(count, np.int64)
    first = np.zeros(count, np.int64)
    for s in range(count):
        for j in range(n):
            phi[j] = phi0[j]
        ell, t, st = walk(phi, out, psi, cum, letters, NO_UU, xi, R, Rp, yg, hc, wq, xs, mu_br,
                              ZT, hf, hf_lo, hf_dx, g, c, buf_ya, buf_zt, buf_j, viol, stats)
        ells[s] = ell
        ts[s] = t
        status[s] = st
        if first_letters and ell > 0:
            first[s] = letters[0]
    return ells, ts, status, first, viol, stats


@njit(cache=True)
def forward_birkhoff(x0s, n_max, g, c, refill, vtab, checkpoints, seed):
    """Birkhoff sums of v at the checkpoints for many starts."""
    np.random.seed(seed)
    ncp = checkpoints.size
    out = np.zeros((x0s.size, ncp))
    for s in range(x0s.size):
        x = x0s[s]
        acc = 0.0
        ci = 0
        for k in range(n_max + 1):
            while ci < ncp and checkpoints[ci] == k:
                out[s, ci] = acc
                ci += 1
            if k == n_max:
                break
            acc += obs(vtab, x)
            if refill:
                if x <= 0.5:
                    x = 2.0 * x
                else:
                    x = 2.0 * x - 1.0
                if x < 1.0 and np.random.random() < 0.5:
                    x += 2.0**-53
            else:
                x = kx.step(x, g, c)
    return out


@njit(cache=True)
def sample_branch_w(tau, xs, hf, hf_cum, hf_lo, hf_dx):
    """w = 2y - 1 for y ~ mu restricted to the branch with return time tau.

    Short branches are sampled in w directly from the local linear density,
    which keeps full relative precision next to 1/2."""
    wa = xs[tau - 1]
    wb = 1.0 if tau == 1 else xs[tau - 2]
    ya = 0.5 * (1.0 + wa)
    yb = 0.5 * (1.0 + wb)
    if yb - ya > hf_dx:
        c0 = cdf_point(hf, hf_cum, hf_lo, hf_dx, ya)
        c1 = cdf_point(hf, hf_cum, hf_lo, hf_dx, yb)
        y = invert_cdf(hf, hf_cum, hf_lo, hf_dx, c0 + np.random.random() * (c1 - c0))
        w = 2.0 * y - 1.0
        if w < wa:
            w = wa
        return w
    fa = interp_uniform(hf, hf_lo, hf_dx, ya)
    fb = interp_uniform(hf, hf_lo, hf_dx, yb)
    width = wb - wa
    u = np.random.random()
    # inverse CDF of the linear density fa + (fb - fa) s on s in [0, 1]
    slope = fb - fa
    target = u * 0.5 * (fa + fb)
    if abs(slope) < 1e-14 * fa:
        s = target / fa
    else:
        s = 2.0 * target / (fa + np.sqrt(fa * fa + 2.0 * slope * target))
    return wa + s * width


@njit(cache=True)
def sample_components(seed, count, cw, kinds, idxs, nlev, custom, yg, hc, xs, hf, hf_cum,
                      hf_lo, hf_dx, g, c):
    """Direct draws from a component mixture: point, (kind, idx, level), jump."""
    np.random.seed(seed)
    n = yg.size
    dx = yg[1] - yg[0]
    prod = np.empty(n)
    pcum = np.zeros(n)
    for j in range(n):
        prod[j] = custom[j] * hc[j]
    for j in range(n - 1):
        pcum[j + 1] = pcum[j] + 0.5 * dx * (prod[j] + prod[j + 1])
    x_out = np.empty(count)
    comp = np.zeros((count, 3), np.int64)
    jump = np.zeros(count, np.int64)
    status = np.zeros(count, np.int64)
    for s in range(count):
        k = pick_component(cw, np.random.random())
        if k < 0:
            x_out[s] = np.nan
            comp[s, 0] = -1
            status[s] = DISCARD_COMPONENT
            continue
        kind = kinds[k]
        idx = idxs[k]
        level = 0
        if nlev[k] > 1:
            level = int(np.random.random() * nlev[k])
            if level >= nlev[k]:
                level = nlev[k] - 1
        comp[s, 0] = kind
        comp[s, 1] = idx
        comp[s, 2] = level
        jump[s] = jump_of(kind, idx, level)
        if kind == MU:
            x = sample_mu(hf, hf_cum, hf_lo, hf_dx)
        elif kind == CUSTOM:
            x = invert_cdf(prod, pcum, yg[0], dx, np.random.random() * pcum[n - 1])
        elif kind == LEB_LEFT:
            lo = xs[idx]
            hi = xs[idx - 1]
            x = lo + np.random.random() * (hi - lo)
        elif kind == LEB_Y:
            wa = xs[idx - 1]
            wb = 1.0 if idx == 1 else xs[idx - 2]
            x = 0.5 * (1.0 + wa + np.random.random() * (wb - wa))
        else:
            w = sample_branch_w(idx, xs, hf, hf_cum, hf_lo, hf_dx)
            if level == 0:
                x = 0.5 * (1.0 + w)
            else:
                x = w
                for _ in range(level - 1):
                    x = kx.left_map(x, g, c)
        x_out[s] = x
    return x_out, comp, jump, status
