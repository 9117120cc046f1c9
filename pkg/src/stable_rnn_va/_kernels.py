"""Compiled per-sample recurrences.

Every cell evaluation in the package (single steps included) goes through these
kernels, so sequence and step-by-step execution share one arithmetic path and
agree bit for bit. Shapes: states (B, H), audio (B, T), controls (B, T, P),
stacked gate blocks as in :mod:`stable_rnn_va.cells`.
"""

import math

import numpy as np
from numba import njit

SIG_HI = 1.0 - 2.0**-53
SIG_LO = 2.2250738585072014e-308
# Coupled mode caps the forget gate at 1 - FORGET_SLACK / eps so that the
# rounded sum f + i stays strictly below 1 (about 128 ulps of headroom).
FORGET_SLACK = 2.0**-46


@njit(cache=True)
def forget_cap(eps):
    return 1.0 - FORGET_SLACK / eps


@njit(cache=True)
def _sig(a):
    if a >= 0.0:
        s = 1.0 / (1.0 + math.exp(-a))
    else:
        e = math.exp(a)
        s = e / (1.0 + e)
    if s > SIG_HI:
        return SIG_HI
    if s < SIG_LO:
        return SIG_LO
    return s


@njit(cache=True)
def _drive(inp, ctl, bias, x, p, out):
    # out[g, j] = bias + x * W + sum_k p_k C[:, :, k], gate-major
    n_g, hid, n_p = ctl.shape
    for g in range(n_g):
        for j in range(hid):
            v = bias[g, j] + x * inp[g, j]
            for k in range(n_p):
                v += p[k] * ctl[g, j, k]
            out[g, j] = v


@njit(cache=True)
def gru_seq(rec, inp, ctl, bias, h0, x, p, w_out, b_out, skip, y, hnorm, track):
    bsz, n_t = x.shape
    hid = rec.shape[1]
    h = h0.copy()
    d = np.empty((3, hid))
    r = np.empty(hid)
    z = np.empty(hid)
    rh = np.empty(hid)
    hn = np.empty(hid)
    for b in range(bsz):
        for t in range(n_t):
            _drive(inp, ctl, bias, x[b, t], p[b, t], d)
            for j in range(hid):
                ar = 0.0
                az = 0.0
                for k in range(hid):
                    ar += rec[0, j, k] * h[b, k]
                    az += rec[1, j, k] * h[b, k]
                r[j] = _sig(ar + d[0, j])
                z[j] = _sig(az + d[1, j])
                rh[j] = r[j] * h[b, j]
            for j in range(hid):
                an = 0.0
                for k in range(hid):
                    an += rec[2, j, k] * rh[k]
                n = math.tanh(an + d[2, j])
                hn[j] = (1.0 - z[j]) * n + z[j] * h[b, j]
            acc = 0.0
            sq = 0.0
            for j in range(hid):
                h[b, j] = hn[j]
                acc += hn[j] * w_out[j]
                sq += hn[j] * hn[j]
            y[b, t] = acc + b_out + skip * x[b, t]
            if track:
                hnorm[b, t] = math.sqrt(sq)
    return h


@njit(cache=True)
def lstm_seq(rec, inp, ctl, bias, h0, c0, x, p, coupled, eps, w_out, b_out, skip, y, hnorm, cnorm, track):
    bsz, n_t = x.shape
    hid = rec.shape[1]
    h = h0.copy()
    c = c0.copy()
    d = np.empty((4, hid))
    a = np.empty((4, hid))
    fcap = forget_cap(eps) if coupled else 1.0
    for b in range(bsz):
        for t in range(n_t):
            _drive(inp, ctl, bias, x[b, t], p[b, t], d)
            for g in range(4):
                for j in range(hid):
                    acc = 0.0
                    for k in range(hid):
                        acc += rec[g, j, k] * h[b, k]
                    a[g, j] = acc + d[g, j]
            out = 0.0
            sqh = 0.0
            sqc = 0.0
            for j in range(hid):
                s_i = _sig(a[0, j])
                f = _sig(a[1, j])
                gg = math.tanh(a[2, j])
                o = _sig(a[3, j])
                if coupled:
                    if f > fcap:
                        f = fcap
                    i = (1.0 - eps) * (1.0 - f) * s_i
                else:
                    i = s_i
                cj = f * c[b, j] + i * gg
                c[b, j] = cj
                hj = o * math.tanh(cj)
                a[0, j] = hj  # row 0 no longer needed for this step
                out += hj * w_out[j]
                sqh += hj * hj
                sqc += cj * cj
            for j in range(hid):
                h[b, j] = a[0, j]
            y[b, t] = out + b_out + skip * x[b, t]
            if track:
                hnorm[b, t] = math.sqrt(sqh)
                cnorm[b, t] = math.sqrt(sqc)
    return h, c


@njit(cache=True)
def gru_forward_cache(rec, inp, ctl, bias, h0, x, p):
    bsz, n_t = x.shape
    hid = rec.shape[1]
    hs = np.empty((n_t + 1, bsz, hid))
    r = np.empty((n_t, bsz, hid))
    z = np.empty((n_t, bsz, hid))
    n = np.empty((n_t, bsz, hid))
    rh = np.empty((n_t, bsz, hid))
    d = np.empty((3, hid))
    hs[0] = h0
    for t in range(n_t):
        for b in range(bsz):
            _drive(inp, ctl, bias, x[b, t], p[b, t], d)
            for j in range(hid):
                ar = 0.0
                az = 0.0
                for k in range(hid):
                    ar += rec[0, j, k] * hs[t, b, k]
                    az += rec[1, j, k] * hs[t, b, k]
                r[t, b, j] = _sig(ar + d[0, j])
                z[t, b, j] = _sig(az + d[1, j])
                rh[t, b, j] = r[t, b, j] * hs[t, b, j]
            for j in range(hid):
                an = 0.0
                for k in range(hid):
                    an += rec[2, j, k] * rh[t, b, k]
                nj = math.tanh(an + d[2, j])
                n[t, b, j] = nj
                zj = z[t, b, j]
                hs[t + 1, b, j] = (1.0 - zj) * nj + zj * hs[t, b, j]
    return hs, r, z, n, rh


@njit(cache=True)
def gru_backward(rec, hs, r, z, n, dh_out):
    n_t, bsz, hid = r.shape
    da = np.empty((n_t, bsz, 3, hid))
    dh = np.zeros((bsz, hid))
    dhp = np.empty(hid)
    drh = np.empty(hid)
    for t in range(n_t - 1, -1, -1):
        for b in range(bsz):
            for j in range(hid):
                g = dh[b, j] + dh_out[t, b, j]
                zj = z[t, b, j]
                nj = n[t, b, j]
                da[t, b, 2, j] = g * (1.0 - zj) * (1.0 - nj * nj)
                da[t, b, 1, j] = g * (hs[t, b, j] - nj) * zj * (1.0 - zj)
                dhp[j] = g * zj
                drh[j] = 0.0
            for j in range(hid):
                dan = da[t, b, 2, j]
                for k in range(hid):
                    drh[k] += dan * rec[2, j, k]
            for k in range(hid):
                rk = r[t, b, k]
                da[t, b, 0, k] = drh[k] * hs[t, b, k] * rk * (1.0 - rk)
                dhp[k] += drh[k] * rk
            for j in range(hid):
                dar = da[t, b, 0, j]
                daz = da[t, b, 1, j]
                for k in range(hid):
                    dhp[k] += dar * rec[0, j, k] + daz * rec[1, j, k]
            for k in range(hid):
                dh[b, k] = dhp[k]
    return da


@njit(cache=True)
def lstm_forward_cache(rec, inp, ctl, bias, h0, c0, x, p, coupled, eps):
    bsz, n_t = x.shape
    hid = rec.shape[1]
    hs = np.empty((n_t + 1, bsz, hid))
    cs = np.empty((n_t + 1, bsz, hid))
    gates = np.empty((n_t, 6, bsz, hid))  # s_i, f, g, o, i, tanh(c)
    d = np.empty((4, hid))
    a = np.empty((4, hid))
    fcap = forget_cap(eps) if coupled else 1.0
    hs[0] = h0
    cs[0] = c0
    for t in range(n_t):
        for b in range(bsz):
            _drive(inp, ctl, bias, x[b, t], p[b, t], d)
            for g in range(4):
                for j in range(hid):
                    acc = 0.0
                    for k in range(hid):
                        acc += rec[g, j, k] * hs[t, b, k]
                    a[g, j] = acc + d[g, j]
            for j in range(hid):
                s_i = _sig(a[0, j])
                f = _sig(a[1, j])
                gg = math.tanh(a[2, j])
                o = _sig(a[3, j])
                if coupled:
                    if f > fcap:
                        f = fcap
                    i = (1.0 - eps) * (1.0 - f) * s_i
                else:
                    i = s_i
                cj = f * cs[t, b, j] + i * gg
                tc = math.tanh(cj)
                cs[t + 1, b, j] = cj
                hs[t + 1, b, j] = o * tc
                gates[t, 0, b, j] = s_i
                gates[t, 1, b, j] = f
                gates[t, 2, b, j] = gg
                gates[t, 3, b, j] = o
                gates[t, 4, b, j] = i
                gates[t, 5, b, j] = tc
    return hs, cs, gates


@njit(cache=True)
def lstm_backward(rec, cs, gates, dh_out, coupled, eps):
    n_t, _, bsz, hid = gates.shape
    da = np.empty((n_t, bsz, 4, hid))
    dh = np.zeros((bsz, hid))
    dc = np.zeros((bsz, hid))
    kk = 1.0 - eps
    fcap = forget_cap(eps) if coupled else 2.0
    for t in range(n_t - 1, -1, -1):
        for b in range(bsz):
            for j in range(hid):
                s_i = gates[t, 0, b, j]
                f = gates[t, 1, b, j]
                gg = gates[t, 2, b, j]
                o = gates[t, 3, b, j]
                i = gates[t, 4, b, j]
                tc = gates[t, 5, b, j]
                g = dh[b, j] + dh_out[t, b, j]
                dcj = dc[b, j] + g * o * (1.0 - tc * tc)
                di = dcj * gg
                df = dcj * cs[t, b, j]
                if coupled:
                    da[t, b, 0, j] = di * kk * (1.0 - f) * s_i * (1.0 - s_i)
                    df -= di * kk * s_i
                else:
                    da[t, b, 0, j] = di * s_i * (1.0 - s_i)
                if f >= fcap:
                    da[t, b, 1, j] = 0.0  # clamped: flat in a_f
                else:
                    da[t, b, 1, j] = df * f * (1.0 - f)
                da[t, b, 2, j] = dcj * i * (1.0 - gg * gg)
                da[t, b, 3, j] = g * tc * o * (1.0 - o)
                dc[b, j] = dcj * f
            for k in range(hid):
                dh[b, k] = 0.0
            for g4 in range(4):
                for j in range(hid):
                    v = da[t, b, g4, j]
                    for k in range(hid):
                        dh[b, k] += v * rec[g4, j, k]
    return da
