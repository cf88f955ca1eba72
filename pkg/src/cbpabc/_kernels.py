"""Numeric kernels: counter-seeded RNG, exact samplers, trajectory simulation.

Every function here stays inside the numba-compilable subset (numpy arrays,
scalars, math.*).  backend.py loads this module twice: one instance is kept
as-is for the pure-python lane, the other has every function in KERNEL_NAMES
compiled with @njit in dependency order.  Bit-identical output across the two
lanes is a tested contract, which constrains the toolbox:

* all randomness flows through one xoshiro256** stream per task, seeded by
  splitmix64 mixing of (master seed, stage tag, task index), so any task is a
  pure function of those three integers regardless of thread count;
* only math.* calls whose CPython and numba lowerings hit the same libm
  symbol are used.  math.lgamma differs, so log-factorials come from
  _lnfact (Stirling base + tabulated/series tail), which both lanes share.

Integer state is np.uint64 throughout; the pure-python lane relies on numpy's
wrapping semantics (callers silence the scalar overflow warning, see
backend.py).
"""

import math

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
U5 = np.uint64(5)
U7 = np.uint64(7)
U9 = np.uint64(9)
U11 = np.uint64(11)
U12 = np.uint64(12)
U17 = np.uint64(17)
U27 = np.uint64(27)
U30 = np.uint64(30)
U31 = np.uint64(31)
U45 = np.uint64(45)
U64 = np.uint64(64)

TWO53INV = 1.0 / 9007199254740992.0
TWO52INV = 1.0 / 4503599627370496.0
LN_SQRT_2PI = 0.9189385332046727

# probability floor applied to simplex draws; keeps later density
# evaluations away from the boundary without visibly moving mass
PROB_FLOOR = 1e-12

# ln(k!) Stirling tail for k = 0..9; series beyond
STIRLING_TAIL = np.array(
    [
        0.0810614667953272,
        0.0413406959554092,
        0.0276779256849983,
        0.02079067210376509,
        0.0166446911898211,
        0.0138761288230707,
        0.0118967099458917,
        0.0104112652619720,
        0.00925546218271273,
        0.00833056343336287,
    ]
)


def _mix64(z):
    z = (z ^ (z >> U30)) * MIX1
    z = (z ^ (z >> U27)) * MIX2
    return z ^ (z >> U31)


def _rotl(x, k):
    return (x << k) | (x >> (U64 - k))


def stream_init(seed, tag, task, s):
    """Fill the 4-word state `s` for substream (seed, tag, task)."""
    z = np.uint64(seed) * MIX1 ^ np.uint64(tag) * MIX2 ^ np.uint64(task) * GOLDEN
    for i in range(4):
        z = z + GOLDEN
        s[i] = _mix64(z)


def next_u64(s):
    result = _rotl(s[1] * U5, U7) * U9
    t = s[1] << U17
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], U45)
    return result


def u01(s):
    """Uniform on [0, 1), 53-bit resolution."""
    return (next_u64(s) >> U11) * TWO53INV


def u01o(s):
    """Uniform on the open interval (0, 1); safe under log."""
    return ((next_u64(s) >> U12) + 0.5) * TWO52INV


def randbelow(s, k):
    """Uniform integer in {0, ..., k-1}."""
    return int(u01(s) * k)


def normal_draw(s):
    # Marsaglia polar method, second coordinate discarded to keep the
    # stream position a deterministic function of the draw count
    while True:
        v1 = 2.0 * u01(s) - 1.0
        v2 = 2.0 * u01(s) - 1.0
        ss = v1 * v1 + v2 * v2
        if 0.0 < ss < 1.0:
            return v1 * math.sqrt(-2.0 * math.log(ss) / ss)


def _gamma_core(s, a):
    # Marsaglia-Tsang squeeze, requires a >= 1
    d = a - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = normal_draw(s)
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = u01o(s)
        if u < 1.0 - 0.0331 * x * x * x * x:
            return d * v
        if math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
            return d * v


def gamma_draw(s, a):
    """Gamma(shape=a, scale=1), a > 0."""
    if a < 1.0:
        # boost: G(a) = G(a+1) * U^(1/a); underflows to 0.0 for tiny a,
        # which downstream simplex flooring absorbs
        g = _gamma_core(s, a + 1.0)
        return g * math.exp(math.log(u01o(s)) / a)
    return _gamma_core(s, a)


def beta_draw(s, a, b):
    x = gamma_draw(s, a)
    y = gamma_draw(s, b)
    return x / (x + y)


def _stirling_tail(k):
    if k < 10:
        return STIRLING_TAIL[k]
    kp1 = k + 1.0
    kp1sq = kp1 * kp1
    return (1.0 / 12.0 - (1.0 / 360.0 - 1.0 / 1260.0 / kp1sq) / kp1sq) / kp1


def _lnfact(k):
    """ln(k!) without math.lgamma (whose lowering differs across lanes)."""
    if k <= 1:
        return 0.0
    return (k + 0.5) * math.log(k + 1.0) - (k + 1.0) + LN_SQRT_2PI + _stirling_tail(k)


def _binom_core(s, n, p):
    # requires 0 < p <= 0.5 and n >= 1
    mean = n * p
    if mean < 10.0:
        # inversion by sequential search
        r = p / (1.0 - p)
        pmf = math.exp(n * math.log1p(-p))
        cdf = pmf
        u = u01(s)
        k = 0
        while u > cdf and k < n:
            k += 1
            pmf *= (n - k + 1) / k * r
            cdf += pmf
        return k
    # transformed rejection with squeeze (BTRS), valid for n*p >= 10
    q = 1.0 - p
    spq = math.sqrt(mean * q)
    b = 1.15 + 2.53 * spq
    a = -0.0873 + 0.0248 * b + 0.01 * p
    c = mean + 0.5
    vr = 0.92 - 4.2 / b
    r = p / q
    alpha = (2.83 + 5.1 / b) * spq
    lr = math.log(r)
    m = int(math.floor((n + 1) * p))
    h = _lnfact(m) + _lnfact(n - m)
    while True:
        u = u01(s) - 0.5
        v = u01(s)
        us = 0.5 - abs(u)
        k = int(math.floor((2.0 * a / us + b) * u + c))
        if k < 0 or k > n:
            continue
        if us >= 0.07 and v <= vr:
            return k
        v2 = math.log(v * alpha / (a / (us * us) + b))
        ub = h - _lnfact(k) - _lnfact(n - k) + (k - m) * lr
        if v2 <= ub:
            return k


def binomial_draw(s, n, p):
    """Exact Binomial(n, p) variate."""
    if n <= 0 or p <= 0.0:
        return 0
    if p >= 1.0:
        return n
    if p > 0.5:
        return n - _binom_core(s, n, 1.0 - p)
    return _binom_core(s, n, p)


def poisson_draw(s, lam):
    """Exact Poisson(lam) variate."""
    if lam <= 0.0:
        return 0
    if lam < 10.0:
        # multiplicative inversion
        limit = math.exp(-lam)
        k = 0
        prod = u01o(s)
        while prod > limit:
            k += 1
            prod *= u01o(s)
        return k
    # transformed rejection (PTRS), valid for lam >= 10
    b = 0.931 + 2.53 * math.sqrt(lam)
    a = -0.059 + 0.02483 * b
    inv_alpha = 1.1239 + 1.1328 / (b - 3.4)
    vr = 0.9277 - 3.6224 / (b - 2.0)
    llam = math.log(lam)
    while True:
        u = u01(s) - 0.5
        v = u01(s)
        us = 0.5 - abs(u)
        k = int(math.floor((2.0 * a / us + b) * u + lam + 0.43))
        if us >= 0.07 and v <= vr:
            return k
        if k < 0:
            continue
        if us < 0.013 and v > us:
            continue
        if math.log(v * inv_alpha / (a / (us * us) + b)) <= k * llam - lam - _lnfact(k):
            return k


def geom0_draw(s, q):
    """Failures before the first success, success probability q in (0, 1)."""
    if q >= 1.0:
        return 0
    r = math.floor(math.log(u01o(s)) / math.log1p(-q))
    if r > 1e15:
        r = 1e15
    return int(r)


def dirichlet_draw(s, alpha, k1, out):
    """Dirichlet(alpha[0..k1-1]) into out[0..k1-1], floored off the boundary."""
    tot = 0.0
    for j in range(k1):
        g = gamma_draw(s, alpha[j])
        out[j] = g
        tot += g
    if tot <= 0.0:
        for j in range(k1):
            out[j] = 1.0 / k1
        return
    inv = 1.0 / tot
    tot2 = 0.0
    for j in range(k1):
        v = out[j] * inv
        if v < PROB_FLOOR:
            v = PROB_FLOOR
        out[j] = v
        tot2 += v
    inv2 = 1.0 / tot2
    for j in range(k1):
        out[j] *= inv2


def offspring_sum(s, kind, par1, par2, probs, k1, count):
    """Sum of `count` iid offspring draws; exact-distribution shortcuts.

    kind 0: finite pmf `probs[0..k1-1]` on {0..k1-1}; conditional-binomial
            multinomial decomposition for large counts, direct CDF scans
            otherwise.
    kind 1: geometric with success par1 (negative-binomial shortcut via the
            gamma-Poisson mixture).
    kind 2: binomial with size int(par1), success par2 (additivity).
    """
    if count <= 0:
        return 0
    if kind == 2:
        size = int(par1)
        lim = 9000000000000000000 // size
        if count > lim:
            count = lim
        return binomial_draw(s, size * count, par2)
    if kind == 1:
        if count == 1:
            return geom0_draw(s, par1)
        lam = gamma_draw(s, float(count)) * (1.0 - par1) / par1
        return poisson_draw(s, lam)
    if count <= k1:
        total = 0
        for _ in range(count):
            u = u01(s)
            acc = 0.0
            pick = k1 - 1
            for j in range(k1):
                acc += probs[j]
                if u < acc:
                    pick = j
                    break
            total += pick
        return total
    rem = count
    total = 0
    psum = 1.0
    for j in range(k1 - 1):
        if rem <= 0:
            return total
        if psum <= 1e-15:
            # float slack exhausted the tail mass; park the remainder here
            return total + j * rem
        pj = probs[j] / psum
        if pj >= 1.0:
            pj = 1.0
        nj = binomial_draw(s, rem, pj)
        total += j * nj
        rem -= nj
        psum -= probs[j]
    return total + (k1 - 1) * rem


def s_density(fam, m, z, cap, shape):
    """Success probability s(m, z, K), clamped to [0, 1].

    fam 1 linear decline, 2 power-exponent, 3 rational decay, 4 log-ratio
    exponent; all decreasing in z with s(m, 0, K) = 1.
    """
    x = z / cap
    if fam == 1:
        s = 1.0 - x
    elif fam == 2:
        s = math.exp(-(x ** shape) * math.log(m))
    elif fam == 3:
        s = (1.0 + (m - 1.0) * x) ** (-shape)
    else:
        s = math.exp(-math.log(z + 1.0) / math.log(cap + 1.0) * math.log(m))
    if s < 0.0:
        return 0.0
    if s > 1.0:
        return 1.0
    return s


def xi_log(z):
    """Progenitor pool size: z + floor(ln z), with xi(0) = 0."""
    if z <= 0:
        return 0
    # epsilon guard keeps exact-integer logs from rounding down
    return z + int(math.floor(math.log(float(z)) + 1e-12))


def control_draw(s, ctl_kind, g, shape, m_off, z):
    """Progenitor count phi(z); ctl_kind 0 = binomial-xi, 1..4 = density."""
    if z <= 0:
        return 0
    if ctl_kind == 0:
        return binomial_draw(s, xi_log(z), g)
    return binomial_draw(s, z, s_density(ctl_kind, m_off, float(z), g, shape))


def simulate_general(s, off_kind, par1, par2, probs, k1, ctl_kind, g, shape, m_off, z0, ngen, zcap, sizes_out):
    """Simulate ngen generations into sizes_out[0..ngen].

    Returns (phi_last, extinct_at); extinct_at is -1 when the path never
    hits zero.  Sizes are capped at zcap: runaway supercritical paths stay
    finite (and unselectable) instead of overflowing.
    """
    z = z0
    sizes_out[0] = z
    phi = 0
    extinct_at = -1
    if z <= 0:
        extinct_at = 0
    for g_i in range(ngen):
        phi = control_draw(s, ctl_kind, g, shape, m_off, z)
        z = offspring_sum(s, off_kind, par1, par2, probs, k1, phi)
        if z > zcap:
            z = zcap
        sizes_out[g_i + 1] = z
        if z == 0 and extinct_at < 0:
            extinct_at = g_i + 1
    return phi, extinct_at


def raw_distance(sizes_row, phi_last, obs_idx, obs_has_phi, obs_vec):
    """Relative-ratio distance against the observed coordinates.

    +inf when any paired coordinate is nonpositive (incomparable pair).
    """
    acc = 0.0
    nobs = obs_idx.shape[0]
    for i in range(nobs):
        zv = sizes_row[obs_idx[i]]
        if zv <= 0:
            return np.inf
        a = zv / obs_vec[i]
        b = obs_vec[i] / zv
        d = a - b
        acc += d * d
    if obs_has_phi == 1:
        if phi_last <= 0:
            return np.inf
        a = phi_last / obs_vec[nobs]
        b = obs_vec[nobs] / phi_last
        d = a - b
        acc += d * d
    return math.sqrt(acc)


def chunk_iter1(seed, iter_tag, t0, ntasks,
                kappa_max, alpha_mat,
                gp_kind, gp_a, gp_b,
                ctl_kind, ctl_shape,
                z0, ngen, zcap,
                obs_idx, obs_has_phi, obs_vec,
                out_kappa, out_probs, out_gamma, out_dist,
                out_sizes, out_phi, out_valid):
    """First-iteration pool chunk: prior proposals for tasks t0..t0+ntasks-1.

    gp_kind 0 draws gamma from Beta(gp_a, gp_b), 1 from Uniform(gp_a, gp_b).
    Density controls (ctl_kind != 0) interpret gamma as the capacity and
    reject offspring means <= 1.
    """
    width = kappa_max + 1
    st = np.empty(4, dtype=np.uint64)
    for i in range(ntasks):
        stream_init(seed, iter_tag, t0 + i, st)
        kap = 2 + randbelow(st, kappa_max - 1)
        k1 = kap + 1
        dirichlet_draw(st, alpha_mat[kap], k1, out_probs[i])
        for j in range(k1, width):
            out_probs[i, j] = 0.0
        if gp_kind == 0:
            g = beta_draw(st, gp_a, gp_b)
        else:
            g = gp_a + (gp_b - gp_a) * u01o(st)
        m_child = 0.0
        for j in range(k1):
            m_child += j * out_probs[i, j]
        d = np.inf
        phi_last = 0
        if ctl_kind == 0 or m_child > 1.0:
            phi_last, _ = simulate_general(
                st, 0, 0.0, 0.0, out_probs[i], k1,
                ctl_kind, g, ctl_shape, m_child, z0, ngen, zcap, out_sizes[i])
            d = raw_distance(out_sizes[i], phi_last, obs_idx, obs_has_phi, obs_vec)
        out_kappa[i] = kap
        out_gamma[i] = g
        out_dist[i] = d
        out_phi[i] = phi_last
        out_valid[i] = 1 if np.isfinite(d) else 0


def chunk_itert(seed, iter_tag, t0, ntasks,
                kappa_max,
                glo, ghi,
                ctl_kind, ctl_shape,
                tune_a, sigma, redraw_budget,
                par_probs, par_mean, par_gamma,
                group_off, par_cumw,
                z0, ngen, zcap,
                obs_idx, obs_has_phi, obs_vec,
                out_kappa, out_probs, out_gamma, out_dist,
                out_sizes, out_phi, out_valid):
    """Later-iteration pool chunk: perturb parents from the previous wave.

    Parents arrive sorted by model index; group_off[k]..group_off[k+1] spans
    model k's rows and par_cumw is the within-group cumulative weight.  The
    proposed success parameter must land in (glo, ghi) within redraw_budget
    tries, else the task is discarded.
    """
    width = kappa_max + 1
    st = np.empty(4, dtype=np.uint64)
    conc = np.empty(width, dtype=np.float64)
    for i in range(ntasks):
        stream_init(seed, iter_tag, t0 + i, st)
        kap = 2
        for _ in range(100000):
            kap = 2 + randbelow(st, kappa_max - 1)
            if group_off[kap + 1] > group_off[kap]:
                break
        lo = group_off[kap]
        hi = group_off[kap + 1]
        u = u01(st)
        a_ = lo
        b_ = hi
        while a_ < b_:
            mid = (a_ + b_) // 2
            if par_cumw[mid] > u:
                b_ = mid
            else:
                a_ = mid + 1
        pj = a_ if a_ < hi else hi - 1
        k1 = kap + 1
        for j in range(k1):
            conc[j] = tune_a * ((1.0 - 1e-6) * par_probs[pj, j] + 1e-6 / k1)
        dirichlet_draw(st, conc, k1, out_probs[i])
        for j in range(k1, width):
            out_probs[i, j] = 0.0
        m_child = 0.0
        for j in range(k1):
            m_child += j * out_probs[i, j]
        ok = ctl_kind == 0 or m_child > 1.0
        g = 0.0
        if ok:
            ok = False
            if ctl_kind == 0:
                mu = par_gamma[pj] * par_mean[pj]
                for _ in range(redraw_budget):
                    g = (normal_draw(st) * sigma + mu) / m_child
                    if glo < g < ghi:
                        ok = True
                        break
            else:
                mu = par_gamma[pj]
                for _ in range(redraw_budget):
                    g = normal_draw(st) * sigma + mu
                    if glo < g < ghi:
                        ok = True
                        break
        d = np.inf
        phi_last = 0
        if ok:
            phi_last, _ = simulate_general(
                st, 0, 0.0, 0.0, out_probs[i], k1,
                ctl_kind, g, ctl_shape, m_child, z0, ngen, zcap, out_sizes[i])
            d = raw_distance(out_sizes[i], phi_last, obs_idx, obs_has_phi, obs_vec)
        out_kappa[i] = kap
        out_gamma[i] = g
        out_dist[i] = d
        out_phi[i] = phi_last
        out_valid[i] = 1 if np.isfinite(d) else 0


def forecast_mean(seed, tag, z_anchor, steps, reps,
                  off_kind, par1, par2, probs, k1,
                  ctl_kind, g, shape, m_off, zcap):
    """Mean of Z_{+steps} over reps replicates anchored at z_anchor."""
    st = np.empty(4, dtype=np.uint64)
    total = 0.0
    for r in range(reps):
        stream_init(seed, tag, r, st)
        z = z_anchor
        for _ in range(steps):
            phi = control_draw(st, ctl_kind, g, shape, m_off, z)
            z = offspring_sum(st, off_kind, par1, par2, probs, k1, phi)
            if z > zcap:
                z = zcap
        total += z
    return total / reps


# dependency order for jit compilation in backend.py
KERNEL_NAMES = [
    "_mix64",
    "_rotl",
    "stream_init",
    "next_u64",
    "u01",
    "u01o",
    "randbelow",
    "normal_draw",
    "_gamma_core",
    "gamma_draw",
    "beta_draw",
    "_stirling_tail",
    "_lnfact",
    "_binom_core",
    "binomial_draw",
    "poisson_draw",
    "geom0_draw",
    "dirichlet_draw",
    "offspring_sum",
    "s_density",
    "xi_log",
    "control_draw",
    "simulate_general",
    "raw_distance",
    "chunk_iter1",
    "chunk_itert",
    "forecast_mean",
]
