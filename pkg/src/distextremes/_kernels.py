"""Compiled inner loop of the block likelihood.

Fuses the four-case censored pair terms (see
:func:`distextremes.extremes_core.censored_pair_terms`, which is the reference
implementation) with their accumulation to replicates and sites, so that no
``(n, pairs)`` temporaries are created.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@njit(cache=True)
def log_ndtr(x):
    if x > 0.0:
        return math.log1p(-0.5 * math.erfc(x * _SQRT1_2))
    if x > -30.0:
        return math.log(0.5 * math.erfc(-x * _SQRT1_2))
    # asymptotic expansion of the Mills ratio
    r = 1.0 / (x * x)
    s = 1.0 - r * (1.0 - r * (3.0 - r * (15.0 - 105.0 * r)))
    return -0.5 * x * x - _LOG_SQRT_2PI - math.log(-x) + math.log(s)


@njit(cache=True)
def pair_block(ell, exc, fin, i1, i2, a, da_dw, da_dz, derivatives):
    """Sum pair terms per replicate; optionally accumulate site gradients.

    Returns ``(ll, G, s_w, s_z)``: per-replicate values, d/d(log x) summed per
    site, and the ``omega`` and ``zeta`` score components.
    """
    n, d = ell.shape
    P = i1.shape[0]
    ll = np.zeros(n)
    G = np.zeros((n, d))
    s_w = np.zeros(n)
    s_z = np.zeros(n)
    for i in range(n):
        for p in range(P):
            j1 = i1[p]
            j2 = i2[p]
            if not (fin[i, j1] and fin[i, j2]):
                continue
            l1 = ell[i, j1]
            l2 = ell[i, j2]
            e1 = exc[i, j1]
            e2 = exc[i, j2]
            ap = a[p]
            inv_a = 1.0 / ap
            lr = l2 - l1
            q1 = 0.5 * ap + lr * inv_a
            q2 = 0.5 * ap - lr * inv_a
            lP1 = log_ndtr(q1)
            lP2 = log_ndtr(q2)
            lp1 = -0.5 * q1 * q1 - _LOG_SQRT_2PI
            P1x1 = math.exp(lP1 - l1)
            P2x2 = math.exp(lP2 - l2)
            val = -(P1x1 + P2x2)
            x = 0.0
            y = 0.0
            lE = 0.0
            if e1 and e2:
                x = lP1 + lP2
                y = lp1 + l2 - math.log(ap)
                lE = max(x, y) + math.log1p(math.exp(-abs(x - y)))
                val += lE - 2.0 * (l1 + l2)
            elif e1:
                val += lP1 - 2.0 * l1
            elif e2:
                val += lP2 - 2.0 * l2
            ll[i] += val
            if not derivatives:
                continue
            d1 = P1x1
            d2 = P2x2
            da = -math.exp(lp1 - l1)
            r2 = lr * inv_a * inv_a
            dq1 = 0.5 - r2
            dq2 = 0.5 + r2
            if e1 and e2:
                m1 = math.exp(lp1 - lP1)
                m2 = math.exp(-0.5 * q2 * q2 - _LOG_SQRT_2PI - lP2)
                wA = math.exp(x - lE)
                wB = math.exp(y - lE)
                d1 += wA * (m2 - m1) * inv_a + wB * q1 * inv_a - 2.0
                d2 += wA * (m1 - m2) * inv_a + wB * (1.0 - q1 * inv_a) - 2.0
                da += wA * (m1 * dq1 + m2 * dq2) - wB * (q1 * dq1 + inv_a)
            elif e1:
                m1 = math.exp(lp1 - lP1)
                d1 += -m1 * inv_a - 2.0
                d2 += m1 * inv_a
                da += m1 * dq1
            elif e2:
                m2 = math.exp(-0.5 * q2 * q2 - _LOG_SQRT_2PI - lP2)
                d1 += m2 * inv_a
                d2 += -m2 * inv_a - 2.0
                da += m2 * dq2
            G[i, j1] += d1
            G[i, j2] += d2
            s_w[i] += da * da_dw[p]
            s_z[i] += da * da_dz[p]
    return ll, G, s_w, s_z
