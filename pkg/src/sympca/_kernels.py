"""Compiled inner loops.

Chains are stored unnormalized. Row ``c`` of ``U`` represents the unit vector
``U[c] / sqrt(nrm2[c])`` and the true vector ``exp(logscale[c]) * U[c]``. One
step touches one coordinate, so the squared norm is updated in O(1) and
recomputed exactly every ``renorm_every`` global steps.
"""

import numba
import numpy as np

# nrm2 outside [TINY, HUGE] (or a cancellation loss) forces an exact rescale.
HUGE = 1e100
TINY = 1e-100
CANCEL = 1e-6
DEGENERATE = 1e-28  # squared relative norm, i.e. 1e-14 on the norm


@numba.njit(cache=True)
def _renormalize(U, nrm2, ref, logscale, c, d):
    s = 0.0
    for k in range(d):
        s += U[c, k] * U[c, k]
    if s == 0.0:
        nrm2[c] = 0.0
        return
    r = np.sqrt(s)
    inv = 1.0 / r
    s2 = 0.0
    for k in range(d):
        U[c, k] *= inv
        s2 += U[c, k] * U[c, k]
    logscale[c] += np.log(r)
    nrm2[c] = s2
    ref[c] = s2


@numba.njit(cache=True)
def advance_chains(U, nrm2, ref, logscale, idx, vals, gains, t0, renorm_every, status):
    """Apply ``n = idx.shape[1]`` entry steps to every live chain.

    ``gains`` has shape ``(C, 1)`` for a fixed per-chain gain or ``(C, n)`` for
    per-step gains; the gain multiplies the observed value, i.e. ``eta * d**2``.
    A chain whose step would shrink the vector below 1e-14 of its previous norm
    is frozen and ``status[c]`` set to the step offset; live chains have -1.
    """
    C, d = U.shape
    n = idx.shape[1]
    per_step = gains.shape[1] > 1
    for c in range(C):
        if status[c] >= 0:
            continue
        g = gains[c, 0]
        for s in range(n):
            if per_step:
                g = gains[c, s]
            cell = idx[c, s]
            i = cell // d
            j = cell - i * d
            uj = U[c, j]
            if uj != 0.0 and g != 0.0:
                old = U[c, i]
                new = old + g * vals[c, s] * uj
                before = nrm2[c]
                cur = before + (new * new - old * old)
                U[c, i] = new
                if cur < CANCEL * ref[c]:
                    cur = 0.0
                    for k in range(d):
                        cur += U[c, k] * U[c, k]
                    ref[c] = cur
                if cur < DEGENERATE * before:
                    U[c, i] = old
                    status[c] = s
                    break
                nrm2[c] = cur
                if cur > HUGE or cur < TINY:
                    _renormalize(U, nrm2, ref, logscale, c, d)
            if (t0 + s + 1) % renorm_every == 0:
                _renormalize(U, nrm2, ref, logscale, c, d)


@numba.njit(cache=True)
def group_agreement(U, nrm2, groups, R):
    """Mean of ``|<w_r, w_r'>|`` over unordered pairs within each group of ``R`` rows."""
    d = U.shape[1]
    out = np.zeros(groups)
    npairs = R * (R - 1) // 2
    for k in range(groups):
        acc = 0.0
        for r in range(R):
            a = k * R + r
            for q in range(r + 1, R):
                b = k * R + q
                dot = 0.0
                for m in range(d):
                    dot += U[a, m] * U[b, m]
                acc += abs(dot) / np.sqrt(nrm2[a] * nrm2[b])
        out[k] = acc / npairs
    return out
