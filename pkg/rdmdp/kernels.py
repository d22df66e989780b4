"""
JIT-compiled event loop for the exclusion + Glauber dynamics.

The loop uses uniformisation: a single Poisson clock proposes bond exchanges
and site flips at dominating rates, and each proposal is accepted with
probability (true rate)/(bound). All observer sums are maintained incrementally
inside the loop; an exchange is applied as two successive single-site changes
so every incremental formula only ever sees one changed site.

Layout of the flat state vectors is given by the slot constants below; the
Python side (rdmdp.simulate) owns their allocation.
"""

import numba as nb
import numpy as np

STATUS_OK = 0
STATUS_RATE_OVERFLOW = 1
STATUS_DRIFT = 2

# params (float64)
P_A = 0
P_B = 1
P_LAM = 2
P_EX_RATE = 3
P_TILT = 4
P_BOUND_EX = 5
P_BOUND_FL = 6
P_CBAR = 7
P_RHO = 8
P_AN = 9
P_RN = 10
N_PARAMS = 11

# flags (int64)
G_D = 0
G_EXCHANGE = 1
G_GLAUBER = 2
G_TILT = 3
G_MART = 4
G_BG = 5
G_RESYNC = 6
N_FLAGS = 7

# istate (int64)
I_SLICE = 0
I_PROPOSALS = 1
I_EXCHANGES = 2
I_FLIPS = 3
I_SINCE_RESYNC = 4
I_STATUS = 5
I_RESYNCS = 6
N_ISTATE = 7

# fstate (float64)
F_TIME = 0
F_A_LO = 1
F_A_HI = 2
F_W_LO = 3
F_W_HI = 4
F_INT_DH = 5
F_INT_C = 6
F_INT_W = 7
F_I1 = 8
F_SUP_I1 = 9
F_SUP_FIELD = 10
F_DRIFT = 11
F_COMP_SCALE = 12
N_FSTATE = 13

N_SERIES = 5
ACCEPT_SLACK = 1e-12
LINEAR_DRIFT_TOL = 1e-9
COMP_DRIFT_TOL = 1e-7


@nb.njit(cache=True, nogil=True)
def flip_rate_at(eta, nbr, x, a, b, lam, d):
    if eta[x] != 0:
        return b
    occupied = 0
    for j in range(2 * d):
        occupied += np.int64(eta[nbr[x, j]])
    return a + lam / (2.0 * d) * occupied


@nb.njit(cache=True, nogil=True)
def _add_series(comp, r, alpha, beta, sign):
    e = r * np.exp(alpha)
    comp[0] += sign * (e - r)
    term = e
    for p in range(1, N_SERIES):
        term = term * beta / p
        comp[p] += sign * term
    return abs(e - r)


@nb.njit(cache=True, nogil=True)
def _flip_term(eta, nbr, Hs, k, params, d, x, comp, sign):
    c = flip_rate_at(eta, nbr, x, params[P_A], params[P_B], params[P_LAM], d)
    sgn = 1.0 - 2.0 * np.float64(eta[x])
    s = params[P_TILT]
    alpha = s * sgn * Hs[k, x]
    beta = s * sgn * (Hs[k + 1, x] - Hs[k, x])
    return _add_series(comp, c, alpha, beta, sign)


@nb.njit(cache=True, nogil=True)
def _bond_term(eta, nbr, Hs, k, params, x, i, comp, sign):
    y = nbr[x, 2 * i]
    if eta[x] == eta[y]:
        return 0.0
    diff = np.float64(eta[x]) - np.float64(eta[y])
    s = params[P_TILT]
    g_lo = Hs[k, y] - Hs[k, x]
    g_hi = Hs[k + 1, y] - Hs[k + 1, x]
    alpha = s * diff * g_lo
    beta = s * diff * (g_hi - g_lo)
    return _add_series(comp, params[P_EX_RATE], alpha, beta, sign)


@nb.njit(cache=True, nogil=True)
def _touch(eta, nbr, Hs, k, params, flags, z, comp, sign):
    """Add (sign=+1) or remove (sign=-1) every compensator term that depends on eta_z."""
    d = flags[G_D]
    if flags[G_GLAUBER]:
        _flip_term(eta, nbr, Hs, k, params, d, z, comp, sign)
        for j in range(2 * d):
            y = nbr[z, j]
            if y == z:
                continue
            seen = False
            for jj in range(j):
                if nbr[z, jj] == y:
                    seen = True
            if not seen:
                _flip_term(eta, nbr, Hs, k, params, d, y, comp, sign)
    if flags[G_EXCHANGE]:
        for i in range(d):
            _bond_term(eta, nbr, Hs, k, params, z, i, comp, sign)
            _bond_term(eta, nbr, Hs, k, params, nbr[z, 2 * i + 1], i, comp, sign)


@nb.njit(cache=True, nogil=True)
def full_compensator(eta, nbr, Hs, k, params, flags, comp):
    """Recompute the compensator series from scratch; returns sum of |term| for drift scaling."""
    d = flags[G_D]
    for p in range(N_SERIES):
        comp[p] = 0.0
    scale = 0.0
    V = eta.shape[0]
    for x in range(V):
        if flags[G_GLAUBER]:
            scale += _flip_term(eta, nbr, Hs, k, params, d, x, comp, 1.0)
        if flags[G_EXCHANGE]:
            for i in range(d):
                scale += _bond_term(eta, nbr, Hs, k, params, x, i, comp, 1.0)
    return scale


@nb.njit(cache=True, nogil=True)
def _weighted_sum(eta, weights):
    total = 0.0
    for x in range(eta.shape[0]):
        if eta[x] != 0:
            total += weights[x]
    return total


@nb.njit(cache=True, nogil=True)
def _pair_sum(eta, nbr, weights, rho, i):
    total = 0.0
    for x in range(eta.shape[0]):
        y = nbr[x, 2 * i]
        total += (np.float64(eta[x]) - rho) * (np.float64(eta[y]) - rho) * weights[x]
    return total


@nb.njit(cache=True, nogil=True)
def _recompute(eta, nbr, Hs, Ws, J, params, flags, istate, probe, pair, comp, scratch):
    """Fill scratch with full recomputations: probes, A_lo, A_hi, W_lo, W_hi, pairs, comp."""
    k = istate[I_SLICE]
    P = J.shape[0]
    d = flags[G_D]
    for p in range(P):
        scratch[p] = _weighted_sum(eta, J[p])
    off = P
    tracking = flags[G_MART] or flags[G_BG]
    if tracking:
        scratch[off] = _weighted_sum(eta, Hs[k])
        scratch[off + 1] = _weighted_sum(eta, Hs[k + 1])
    off += 2
    if flags[G_MART] and Ws.shape[0] > 0:
        scratch[off] = _weighted_sum(eta, Ws[k])
        scratch[off + 1] = _weighted_sum(eta, Ws[k + 1])
    off += 2
    if flags[G_BG]:
        rho = params[P_RHO]
        for i in range(d):
            scratch[off + i] = _pair_sum(eta, nbr, Hs[k], rho, i)
            scratch[off + d + i] = _pair_sum(eta, nbr, Hs[k + 1], rho, i)
    off += 2 * d
    comp_scale = 0.0
    if flags[G_MART]:
        comp_scale = full_compensator(eta, nbr, Hs, k, params, flags, scratch[off:])
    return comp_scale


@nb.njit(cache=True, nogil=True)
def _install(J, flags, fstate, probe, pair, comp, scratch, comp_scale):
    P = J.shape[0]
    d = flags[G_D]
    for p in range(P):
        probe[p] = scratch[p]
    off = P
    fstate[F_A_LO] = scratch[off]
    fstate[F_A_HI] = scratch[off + 1]
    off += 2
    fstate[F_W_LO] = scratch[off]
    fstate[F_W_HI] = scratch[off + 1]
    off += 2
    for i in range(d):
        pair[0, i] = scratch[off + i]
        pair[1, i] = scratch[off + d + i]
    off += 2 * d
    if flags[G_MART]:
        for p in range(N_SERIES):
            comp[p] = scratch[off + p]
        fstate[F_COMP_SCALE] = comp_scale


@nb.njit(cache=True, nogil=True)
def _drift(J, flags, fstate, probe, pair, comp, scratch, comp_scale):
    """Largest tolerance-normalised deviation between incremental and recomputed sums."""
    P = J.shape[0]
    d = flags[G_D]
    worst = 0.0
    for p in range(P):
        ref = 0.0
        for x in range(J.shape[1]):
            ref += abs(J[p, x])
        dev = abs(probe[p] - scratch[p]) / (LINEAR_DRIFT_TOL * max(1.0, ref))
        worst = max(worst, dev)
    off = P
    inc = (fstate[F_A_LO], fstate[F_A_HI], fstate[F_W_LO], fstate[F_W_HI])
    for q in range(4):
        dev = abs(inc[q] - scratch[off + q]) / (LINEAR_DRIFT_TOL * max(1.0, abs(scratch[off + q])))
        worst = max(worst, dev)
    off += 4
    for i in range(d):
        for lo_hi in range(2):
            ref_val = scratch[off + lo_hi * d + i]
            dev = abs(pair[lo_hi, i] - ref_val) / (LINEAR_DRIFT_TOL * max(1.0, abs(ref_val)))
            worst = max(worst, dev)
    off += 2 * d
    if flags[G_MART]:
        dev = abs(comp[0] - scratch[off]) / (COMP_DRIFT_TOL * max(1.0, comp_scale))
        worst = max(worst, dev)
    return worst


@nb.njit(cache=True, nogil=True)
def enter_slice(eta, nbr, Hs, Ws, J, params, flags, istate, fstate, probe, pair, comp, scratch):
    comp_scale = _recompute(eta, nbr, Hs, Ws, J, params, flags, istate, probe, pair, comp, scratch)
    _install(J, flags, fstate, probe, pair, comp, scratch, comp_scale)


@nb.njit(cache=True, nogil=True)
def _set_site(eta, nbr, Hs, Ws, J, params, flags, istate, fstate, probe, pair, comp, z, new):
    old = np.int64(eta[z])
    if old == new:
        return
    delta = np.float64(new - old)
    k = istate[I_SLICE]
    d = flags[G_D]
    if flags[G_MART]:
        _touch(eta, nbr, Hs, k, params, flags, z, comp, -1.0)
    for p in range(J.shape[0]):
        probe[p] += delta * J[p, z]
    if flags[G_MART] or flags[G_BG]:
        fstate[F_A_LO] += delta * Hs[k, z]
        fstate[F_A_HI] += delta * Hs[k + 1, z]
    if flags[G_MART] and Ws.shape[0] > 0:
        fstate[F_W_LO] += delta * Ws[k, z]
        fstate[F_W_HI] += delta * Ws[k + 1, z]
    if flags[G_BG]:
        rho = params[P_RHO]
        for i in range(d):
            fwd = nbr[z, 2 * i]
            bwd = nbr[z, 2 * i + 1]
            eb_fwd = np.float64(eta[fwd]) - rho
            eb_bwd = np.float64(eta[bwd]) - rho
            pair[0, i] += delta * (eb_fwd * Hs[k, z] + eb_bwd * Hs[k, bwd])
            pair[1, i] += delta * (eb_fwd * Hs[k + 1, z] + eb_bwd * Hs[k + 1, bwd])
    eta[z] = np.uint8(new)
    if flags[G_MART]:
        _touch(eta, nbr, Hs, k, params, flags, z, comp, 1.0)


@nb.njit(cache=True, nogil=True)
def _centered(raw, sum_h, rho):
    return raw - rho * sum_h


@nb.njit(cache=True, nogil=True)
def _integrate(times, sums_h, sums_w, params, flags, istate, fstate, pair, comp, I2, t_a, t_b):
    """Accumulate all time integrals over [t_a, t_b] inside the current slice interval."""
    if t_b <= t_a:
        return
    k = istate[I_SLICE]
    span = times[k + 1] - times[k]
    w_a = (t_a - times[k]) / span
    w_b = (t_b - times[k]) / span
    dw1 = w_b - w_a
    dw2 = 0.5 * (w_b * w_b - w_a * w_a)
    rho = params[P_RHO]
    d = flags[G_D]
    a_lo = _centered(fstate[F_A_LO], sums_h[k], rho)
    a_hi = _centered(fstate[F_A_HI], sums_h[k + 1], rho)
    if flags[G_MART]:
        acc = 0.0
        wa_p = w_a
        wb_p = w_b
        for p in range(N_SERIES):
            acc += comp[p] * (wb_p - wa_p) / (p + 1)
            wa_p *= w_a
            wb_p *= w_b
        fstate[F_INT_C] += span * acc
        fstate[F_INT_DH] += (a_hi - a_lo) * (t_b - t_a) / span
        if sums_w.shape[0] > 0:
            w_lo = _centered(fstate[F_W_LO], sums_w[k], rho)
            w_hi = _centered(fstate[F_W_HI], sums_w[k + 1], rho)
            fstate[F_INT_W] += span * (w_lo * dw1 + (w_hi - w_lo) * dw2)
    if flags[G_BG]:
        fstate[F_I1] += span * (a_lo * dw1 + (a_hi - a_lo) * dw2) / params[P_RN]
        for i in range(d):
            I2[i] += span * (pair[0, i] * dw1 + (pair[1, i] - pair[0, i]) * dw2) / params[P_AN]


@nb.njit(cache=True, nogil=True)
def _track_sups(times, sums_h, params, flags, istate, fstate, I2, supI2, t):
    if flags[G_BG]:
        fstate[F_SUP_I1] = max(fstate[F_SUP_I1], abs(fstate[F_I1]))
        for i in range(flags[G_D]):
            supI2[i] = max(supI2[i], abs(I2[i]))
    if flags[G_MART] or flags[G_BG]:
        k = istate[I_SLICE]
        w = (t - times[k]) / (times[k + 1] - times[k])
        rho = params[P_RHO]
        a_lo = _centered(fstate[F_A_LO], sums_h[k], rho)
        a_hi = _centered(fstate[F_A_HI], sums_h[k + 1], rho)
        field = ((1.0 - w) * a_lo + w * a_hi) / params[P_AN]
        fstate[F_SUP_FIELD] = max(fstate[F_SUP_FIELD], abs(field))


@nb.njit(cache=True, nogil=True)
def advance(
    eta,
    nbr,
    Hs,
    Ws,
    times,
    sums_h,
    sums_w,
    J,
    params,
    flags,
    istate,
    fstate,
    probe,
    pair,
    comp,
    I2,
    supI2,
    scratch,
    rng,
    t_end,
):
    """
    Run the chain from fstate[F_TIME] up to t_end, updating every accumulator.

    The pending proposal that would land beyond t_end is discarded; by
    memorylessness the clock restarts at t_end on the next call.
    """
    d = flags[G_D]
    V = eta.shape[0]
    n_bonds = d * V
    K = times.shape[0] - 1
    per_bond = params[P_EX_RATE] * params[P_BOUND_EX]
    per_site = params[P_CBAR] * params[P_BOUND_FL]
    lam_ex = n_bonds * per_bond if flags[G_EXCHANGE] else 0.0
    lam_fl = V * per_site if flags[G_GLAUBER] else 0.0
    total = lam_ex + lam_fl
    s = params[P_TILT]
    tilt = flags[G_TILT] != 0
    resync_every = flags[G_RESYNC]

    while True:
        t = fstate[F_TIME]
        if total > 0.0:
            t_next = t - np.log(1.0 - rng.random()) / total
        else:
            t_next = np.inf
        t_stop = min(t_next, t_end)

        # integrate the frozen configuration up to t_stop, crossing slice boundaries
        t_cur = t
        while True:
            k = istate[I_SLICE]
            boundary = times[k + 1]
            if k < K - 1 and t_stop > boundary:
                _integrate(times, sums_h, sums_w, params, flags, istate, fstate, pair, comp, I2, t_cur, boundary)
                _track_sups(times, sums_h, params, flags, istate, fstate, I2, supI2, boundary)
                istate[I_SLICE] = k + 1
                enter_slice(eta, nbr, Hs, Ws, J, params, flags, istate, fstate, probe, pair, comp, scratch)
                t_cur = boundary
            else:
                _integrate(times, sums_h, sums_w, params, flags, istate, fstate, pair, comp, I2, t_cur, t_stop)
                break

        if t_next >= t_end:
            fstate[F_TIME] = t_end
            _track_sups(times, sums_h, params, flags, istate, fstate, I2, supI2, t_end)
            return

        fstate[F_TIME] = t_next
        istate[I_PROPOSALS] += 1
        u = rng.random() * total
        acc = rng.random()
        k = istate[I_SLICE]
        w = (t_next - times[k]) / (times[k + 1] - times[k])
        accepted = False

        if u < lam_ex:
            idx = np.int64(u / per_bond)
            if idx >= n_bonds:
                idx = n_bonds - 1
            x = idx // d
            i = idx - x * d
            y = nbr[x, 2 * i]
            if eta[x] == eta[y]:
                continue
            ratio = 1.0
            if tilt:
                hx = (1.0 - w) * Hs[k, x] + w * Hs[k + 1, x]
                hy = (1.0 - w) * Hs[k, y] + w * Hs[k + 1, y]
                diff = np.float64(eta[x]) - np.float64(eta[y])
                ratio = np.exp(s * diff * (hy - hx)) / params[P_BOUND_EX]
            if ratio > 1.0 + ACCEPT_SLACK:
                istate[I_STATUS] = STATUS_RATE_OVERFLOW
                return
            if acc < ratio:
                ex = np.int64(eta[x])
                ey = np.int64(eta[y])
                _set_site(eta, nbr, Hs, Ws, J, params, flags, istate, fstate, probe, pair, comp, x, ey)
                _set_site(eta, nbr, Hs, Ws, J, params, flags, istate, fstate, probe, pair, comp, y, ex)
                istate[I_EXCHANGES] += 1
                accepted = True
        else:
            x = np.int64((u - lam_ex) / per_site)
            if x >= V:
                x = V - 1
            c = flip_rate_at(eta, nbr, x, params[P_A], params[P_B], params[P_LAM], d)
            ratio = c / per_site
            if tilt:
                hx = (1.0 - w) * Hs[k, x] + w * Hs[k + 1, x]
                ratio *= np.exp(s * (1.0 - 2.0 * np.float64(eta[x])) * hx)
            if ratio > 1.0 + ACCEPT_SLACK:
                istate[I_STATUS] = STATUS_RATE_OVERFLOW
                return
            if acc < ratio:
                _set_site(eta, nbr, Hs, Ws, J, params, flags, istate, fstate, probe, pair, comp, x, 1 - np.int64(eta[x]))
                istate[I_FLIPS] += 1
                accepted = True

        if accepted:
            _track_sups(times, sums_h, params, flags, istate, fstate, I2, supI2, t_next)
            istate[I_SINCE_RESYNC] += 1
            if istate[I_SINCE_RESYNC] >= resync_every:
                istate[I_SINCE_RESYNC] = 0
                istate[I_RESYNCS] += 1
                comp_scale = _recompute(eta, nbr, Hs, Ws, J, params, flags, istate, probe, pair, comp, scratch)
                worst = _drift(J, flags, fstate, probe, pair, comp, scratch, comp_scale)
                fstate[F_DRIFT] = max(fstate[F_DRIFT], worst)
                if worst > 1.0:
                    istate[I_STATUS] = STATUS_DRIFT
                    return
                _install(J, flags, fstate, probe, pair, comp, scratch, comp_scale)


@nb.njit(cache=True, nogil=True)
def run_batch_final_states(eta0s, nbr, Hs, Ws, times, sums_h, sums_w, J, params, flags, rng, t_end):
    """Run one short replica per row of eta0s and return the final occupancies."""
    R, V = eta0s.shape
    out = np.empty_like(eta0s)
    d = flags[G_D]
    P = J.shape[0]
    istate = np.zeros(N_ISTATE, dtype=np.int64)
    fstate = np.zeros(N_FSTATE, dtype=np.float64)
    probe = np.zeros(max(P, 1), dtype=np.float64)
    pair = np.zeros((2, d), dtype=np.float64)
    comp = np.zeros(N_SERIES, dtype=np.float64)
    I2 = np.zeros(d, dtype=np.float64)
    supI2 = np.zeros(d, dtype=np.float64)
    scratch = np.zeros(P + 4 + 2 * d + N_SERIES, dtype=np.float64)
    for r in range(R):
        eta = eta0s[r].copy()
        istate[:] = 0
        fstate[:] = 0.0
        advance(eta, nbr, Hs, Ws, times, sums_h, sums_w, J, params, flags, istate, fstate, probe, pair, comp, I2, supI2, scratch, rng, t_end)
        if istate[I_STATUS] != STATUS_OK:
            out[r] = eta
            return out, istate[I_STATUS]
        out[r] = eta
    return out, STATUS_OK
