"""Numba kernels for the Monte Carlo core.

State is a double while |x| <= e^ystar and the pair (log|x|, sign) above it.
Above ``ystar`` (``ModelSpec.inert_level``) the additive terms cannot change a
double-precision product, so the step is exactly ``log|x| += log A`` and no
B/C/D draw is consumed.  Innovations are drawn inside the loops from numpy
Generators passed in (numba implements their samplers natively).  This keeps critical chains, whose log-level wanders
like sqrt(n), finite for any run length.

Histogram cells use one flat array of length ``2*nb + 3``::

    0            negative overflow  (x <= -rho^(k_max+1))
    1 .. nb      negative bins k = k_max .. k_min, i.e. (-rho^(k+1), -rho^k]
    nb + 1       near zero          (-rho^k_min, rho^k_min]
    nb+2 .. 2nb+1 positive bins k = k_min .. k_max, i.e. (rho^k, rho^(k+1)]
    2nb + 2      positive overflow
"""
import math

import numpy as np
from numba import njit

AFFINE, LETAC, EXTREMAL = 0, 1, 2

# chain state vector
X, LX, SGN, HIGH, S, SCOMP, NSTEP = range(7)
STATE_SIZE = 7

# ladder cycle state vector
(CY_X, CY_LX, CY_SGN, CY_HIGH, CY_LEN, CY_REF, CY_G, CY_EXPNEG, CY_GEXCL,
 CY_DONE, CY_ABORTED, CY_ABORTED_STEPS, CY_GMIN) = range(13)
CYCLE_SIZE = 13

# per-batch ladder statistics (sums over completed cycles)
(B_CYCLES, B_LEN, B_REF, B_G, B_EXPNEG, B_HEIGHT, B_GEXCL, B_HEIGHT2, B_HMAX) = range(9)
BATCH_COLS = 9

# ratio-run accumulators
R_STEPS, R_REF, R_G = range(3)


@njit(inline="always")
def _log_a(g, alaw):
    """log A from a normal mixture packed as rows (cumulative weight, mean, sd)."""
    k = alaw.shape[1]
    j = 0
    if k > 1:
        u = g.random()
        while j < k - 1 and u >= alaw[0, j]:
            j += 1
    return alaw[1, j] + alaw[2, j] * g.standard_normal()


@njit(inline="always")
def _draw(code, p1, p2, g):
    if code == 0.0:
        return p1
    z = g.standard_normal()
    if code == 1.0:
        return p1 + p2 * z
    if code == 2.0:
        return p1 + p2 * abs(z)
    return math.exp(p1 + p2 * z)


@njit(inline="always")
def _step(kind, x, lx, sgn, high, la, law, g, ystar, xswitch):
    """One transition; returns (x, lx, sgn, high, ok, b_or_d, c)."""
    if high:
        lx = lx + la
        if lx <= ystar:
            x = sgn * math.exp(lx)
            high = False
        return x, lx, sgn, high, True, np.nan, np.nan
    a = math.exp(la)
    c = np.nan
    if kind == 0:
        b = _draw(law[0], law[1], law[2], g)
        xn = a * x + b
    elif kind == 1:
        b = _draw(law[0], law[1], law[2], g)
        c = _draw(law[3], law[4], law[5], g)
        xn = b + a * max(c, x)
    else:
        b = _draw(law[6], law[7], law[8], g)
        xn = max(a * x, b)
    if not math.isfinite(xn):
        return x, lx, sgn, high, False, b, c
    ax = abs(xn)
    if ax > xswitch:
        lx = math.log(ax)
        sgn = 1.0 if xn > 0 else -1.0
        high = True
    return xn, lx, sgn, high, True, b, c


@njit(inline="always")
def _logabs(x, lx, high):
    if high:
        return lx
    if x == 0.0:
        return -np.inf
    return math.log(abs(x))


@njit(inline="always")
def _cell(x, lx, sgn, high, inv_h, k_min, nb):
    if high:
        l = lx
        sg = sgn
    else:
        if x == 0.0:
            return nb + 1
        l = math.log(abs(x))
        sg = 1.0 if x > 0 else -1.0
    t = l * inv_h
    if t > 1e15:
        return 2 * nb + 2 if sg > 0 else 0
    # positive bins are (rho^k, rho^(k+1)], negative ones (-rho^(k+1), -rho^k]
    if sg > 0:
        j = int(math.ceil(t)) - 1 - k_min
    else:
        j = int(math.floor(t)) - k_min
    if j < 0:
        return nb + 1
    if j >= nb:
        return 2 * nb + 2 if sg > 0 else 0
    if sg > 0:
        return nb + 2 + j
    return nb - j


@njit(inline="always")
def _log_ratio(kind, s, alaw, law, gl, ga, eps0):
    """log|Phi'(s) / (a' s)| for a fresh innovation; flags |a' s| < eps0."""
    a = math.exp(_log_a(gl, alaw))
    den = a * s
    if kind == 0:
        num = den + _draw(law[0], law[1], law[2], ga)
    elif kind == 1:
        b = _draw(law[0], law[1], law[2], ga)
        c = _draw(law[3], law[4], law[5], ga)
        num = b + a * max(c, s)
    else:
        num = max(den, _draw(law[6], law[7], law[8], ga))
    if abs(den) < eps0:
        return 0.0, True
    return math.log(abs(num / den)), False


@njit(cache=True)
def trajectory(kind, alaw, law, ystar, xswitch, st, n, gm, ga, out):
    """Advance ``n`` steps storing every post-transition state.

    ``out`` rows: x, log|x|, S, log A, B (or D), C.  Returns (steps_done,
    status); status 1 means the state left the representable range.
    """
    x, lx, sgn, high = st[X], st[LX], st[SGN], st[HIGH] != 0.0
    s, comp = st[S], st[SCOMP]
    done = 0
    status = 0
    for i in range(n):
        v = _log_a(gm, alaw)
        x, lx, sgn, high, ok, b, c = _step(kind, x, lx, sgn, high, v, law, ga, ystar, xswitch)
        if not ok:
            status = 1
            break
        y = v - comp
        t = s + y
        comp = (t - s) - y
        s = t
        out[0, i] = sgn * math.exp(lx) if high else x
        out[1, i] = _logabs(x, lx, high)
        out[2, i] = s
        out[3, i] = v
        out[4, i] = b
        out[5, i] = c
        done += 1
    st[X], st[LX], st[SGN], st[HIGH] = x, lx, sgn, 1.0 if high else 0.0
    st[S], st[SCOMP] = s, comp
    st[NSTEP] += done
    return done, status


@njit(cache=True)
def ratio_run(kind, alaw, law, ystar, xswitch, st, n, gm, ga, hist, inv_h, k_min, nb,
              ref_lo, ref_hi, use_g, gl, gf, eps0, acc, batches, batch_len):
    """Occupation histogram and functional sums along ``n`` steps of one trajectory.

    ``acc`` = [steps, ref visits, sum of g, excluded visits]; ``batches`` rows
    hold the same first three sums per block of ``batch_len`` steps.
    """
    x, lx, sgn, high = st[X], st[LX], st[SGN], st[HIGH] != 0.0
    s, comp = st[S], st[SCOMP]
    k = np.int64(st[NSTEP])
    nbat = batches.shape[0]
    status = 0
    for i in range(n):
        v = _log_a(gm, alaw)
        x, lx, sgn, high, ok, b, c = _step(kind, x, lx, sgn, high, v, law, ga, ystar, xswitch)
        if not ok:
            status = 1
            break
        y = v - comp
        t = s + y
        comp = (t - s) - y
        s = t
        bi = min(k // batch_len, nbat - 1)
        k += 1
        hist[_cell(x, lx, sgn, high, inv_h, k_min, nb)] += 1.0
        acc[R_STEPS] += 1.0
        batches[bi, R_STEPS] += 1.0
        if high:
            continue
        if ref_lo < x <= ref_hi:
            acc[R_REF] += 1.0
            batches[bi, R_REF] += 1.0
        if use_g:
            g, excl = _log_ratio(kind, x, alaw, law, gl, gf, eps0)
            if excl:
                acc[3] += 1.0
            else:
                acc[R_G] += g
                batches[bi, R_G] += g
    st[X], st[LX], st[SGN], st[HIGH] = x, lx, sgn, 1.0 if high else 0.0
    st[S], st[SCOMP] = s, comp
    st[NSTEP] = k
    return status


@njit(inline="always")
def _reset_cycle(cy, x, lx, sgn, high):
    cy[CY_X], cy[CY_LX], cy[CY_SGN], cy[CY_HIGH] = x, lx, sgn, 1.0 if high else 0.0
    cy[CY_LEN] = 0.0
    cy[CY_REF] = 0.0
    cy[CY_G] = 0.0
    cy[CY_EXPNEG] = 0.0
    cy[CY_GEXCL] = 0.0


@njit(cache=True)
def ladder_run(kind, alaw, law, ystar, xswitch, st, cy, max_steps, gm, ga, record, hist, pend, touched,
               ntouched, inv_h, k_min, nb, ref_lo, ref_hi, use_g, gl, gf, eps0,
               gamma, cap, target, stats, cycles_per_batch, done_offset):
    """Run complete downward-ladder cycles of S_n = sum log A.

    A cycle holds the states X_n for L_{k-1} <= n < L_k, the first being the
    epoch state W_{k-1}.  Its histogram contribution is buffered in ``pend``
    and committed only when the cycle closes; a cycle reaching ``cap`` states
    is discarded and restarted from its own starting state.  Stops after
    ``target`` completed cycles (counted in ``cy``) or ``max_steps`` steps.
    Returns (steps_used, status).
    """
    x, lx, sgn, high = st[X], st[LX], st[SGN], st[HIGH] != 0.0
    s, comp = st[S], st[SCOMP]
    nbat = stats.shape[0]
    status = 0
    used = 0
    fresh = cy[CY_LEN] == 0.0
    if fresh:
        _reset_cycle(cy, x, lx, sgn, high)
        s, comp = 0.0, 0.0
    # per-cycle sums live in locals and are written back to ``cy`` on exit
    x0, lx0, sgn0, high0 = cy[CY_X], cy[CY_LX], cy[CY_SGN], cy[CY_HIGH] != 0.0
    clen, cref, cg, cexp, cgex = cy[CY_LEN], cy[CY_REF], cy[CY_G], cy[CY_EXPNEG], cy[CY_GEXCL]
    gmin = cy[CY_GMIN]
    done = cy[CY_DONE]
    aborted, aborted_steps = cy[CY_ABORTED], cy[CY_ABORTED_STEPS]
    nt = ntouched[0]
    visit = fresh
    while True:
        if visit:
            clen += 1.0
            if record:
                cell = _cell(x, lx, sgn, high, inv_h, k_min, nb)
                if pend[cell] == 0.0:
                    touched[nt] = cell
                    nt += 1
                pend[cell] += 1.0
            if gamma != 0.0:
                cexp += math.exp(-gamma * s)
            if not high:
                if ref_lo < x <= ref_hi:
                    cref += 1.0
                if use_g:
                    g, excl = _log_ratio(kind, x, alaw, law, gl, gf, eps0)
                    if excl:
                        cgex += 1.0
                    else:
                        cg += g
                        if g < gmin:
                            gmin = g
        visit = True
        if used >= max_steps or done >= target:
            break
        v = _log_a(gm, alaw)
        used += 1
        x, lx, sgn, high, ok, b, c = _step(kind, x, lx, sgn, high, v, law, ga, ystar, xswitch)
        if not ok:
            status = 1
            break
        y = v - comp
        t = s + y
        comp = (t - s) - y
        s = t
        if s < 0.0:
            # ladder epoch: close the cycle, the new state opens the next one
            bi = min(np.int64(done - done_offset) // cycles_per_batch, nbat - 1)
            stats[bi, B_CYCLES] += 1.0
            stats[bi, B_LEN] += clen
            stats[bi, B_REF] += cref
            stats[bi, B_G] += cg
            stats[bi, B_EXPNEG] += cexp
            stats[bi, B_HEIGHT] += s
            stats[bi, B_HEIGHT2] += s * s
            stats[bi, B_GEXCL] += cgex
            if s > stats[bi, B_HMAX]:
                stats[bi, B_HMAX] = s
            if record:
                for j in range(nt):
                    cell = touched[j]
                    hist[cell] += pend[cell]
                    pend[cell] = 0.0
                nt = 0
            done += 1.0
            x0, lx0, sgn0, high0 = x, lx, sgn, high
            clen, cref, cg, cexp, cgex = 0.0, 0.0, 0.0, 0.0, 0.0
            s, comp = 0.0, 0.0
        elif clen >= cap:
            aborted += 1.0
            aborted_steps += clen
            if record:
                for j in range(nt):
                    pend[touched[j]] = 0.0
                nt = 0
            x, lx, sgn, high = x0, lx0, sgn0, high0
            clen, cref, cg, cexp, cgex = 0.0, 0.0, 0.0, 0.0, 0.0
            s, comp = 0.0, 0.0
    cy[CY_X], cy[CY_LX], cy[CY_SGN], cy[CY_HIGH] = x0, lx0, sgn0, 1.0 if high0 else 0.0
    cy[CY_LEN], cy[CY_REF], cy[CY_G], cy[CY_EXPNEG], cy[CY_GEXCL] = clen, cref, cg, cexp, cgex
    cy[CY_GMIN] = gmin
    cy[CY_DONE] = done
    cy[CY_ABORTED], cy[CY_ABORTED_STEPS] = aborted, aborted_steps
    ntouched[0] = nt
    st[X], st[LX], st[SGN], st[HIGH] = x, lx, sgn, 1.0 if high else 0.0
    st[S], st[SCOMP] = s, comp
    st[NSTEP] += used
    return used, status


@njit(cache=True)
def sandwich_run(alaw, law, ystar, xswitch, st3, n, gm, ga, delta, store, out, offset, counts):
    """Letac chain between its two affine comparison chains, same innovations.

    ``st3`` = [x_lower, x_letac, x_upper, lx_lower, lx_letac, lx_upper, high].
    The three chains always share one representation so the comparisons are
    between identically rounded quantities.  ``counts`` accumulates
    [order violations, support violations (letac < delta)].  Returns status.
    """
    xl, xm, xu = st3[0], st3[1], st3[2]
    ll, lm, lu = st3[3], st3[4], st3[5]
    high = st3[6] != 0.0
    status = 0
    for i in range(n):
        v = _log_a(gm, alaw)
        if high:
            ll += v
            lm += v
            lu += v
            if lu <= ystar:
                xl, xm, xu = math.exp(ll), math.exp(lm), math.exp(lu)
                high = False
        else:
            a = math.exp(v)
            b = _draw(law[0], law[1], law[2], ga)
            c = _draw(law[3], law[4], law[5], ga)
            xl = a * xl + b
            xm = b + a * max(c, xm)
            xu = (a * xu + b) + a * c
            if not (math.isfinite(xl) and math.isfinite(xu)):
                status = 1
                break
            if xl > xswitch:
                ll, lm, lu = math.log(xl), math.log(xm), math.log(xu)
                high = True
        if high:
            if not (ll <= lm and lm <= lu):
                counts[0] += 1
        else:
            if not (xl <= xm and xm <= xu):
                counts[0] += 1
            if xm < delta:
                counts[1] += 1
        if store:
            j = offset + i
            if high:
                out[0, j], out[1, j], out[2, j] = ll, lm, lu
            else:
                out[0, j] = math.log(xl) if xl > 0 else -np.inf
                out[1, j] = math.log(xm)
                out[2, j] = math.log(xu) if xu > 0 else -np.inf
    st3[0], st3[1], st3[2] = xl, xm, xu
    st3[3], st3[4], st3[5] = ll, lm, lu
    st3[6] = 1.0 if high else 0.0
    return status


@njit(cache=True)
def path_from_innovations(kind, x0, a, b, c):
    """Plain double-precision path driven by explicit innovations."""
    n = a.shape[0]
    out = np.empty(n + 1)
    out[0] = x0
    x = x0
    for i in range(n):
        if kind == 0:
            x = a[i] * x + b[i]
        elif kind == 1:
            x = b[i] + a[i] * max(c[i], x)
        else:
            x = max(a[i] * x, b[i])
        out[i + 1] = x
    return out
