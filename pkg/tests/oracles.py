"""Independent reference implementations used as test oracles.

Everything here is written scalar-by-scalar in plain Python (math module or
mpmath), sharing no code with the package, so agreement is meaningful.
"""

import math

import mpmath


def mp_sigmoid(x, dps=50):
    with mpmath.workdps(dps):
        return float(1 / (1 + mpmath.exp(-mpmath.mpf(x))))


def mp_tanh(x, dps=50):
    with mpmath.workdps(dps):
        return float(mpmath.tanh(mpmath.mpf(x)))


def _sig(a):
    return 1.0 / (1.0 + math.exp(-a))


def _affine(rec, inp, ctl, bias, g, j, h, x, p):
    s = bias[g][j] + inp[g][j] * x
    for k in range(len(h)):
        s += rec[g][j][k] * h[k]
    for k in range(len(p)):
        s += ctl[g][j][k] * p[k]
    return s


def gru_step_scalar(rec, inp, ctl, bias, h, x, p):
    """Straight transcription of the GRU update with an audio input term.

    Gate order: reset, update, candidate. Blocks are nested lists.
    """
    hid = len(h)
    r = [_sig(_affine(rec, inp, ctl, bias, 0, j, h, x, p)) for j in range(hid)]
    z = [_sig(_affine(rec, inp, ctl, bias, 1, j, h, x, p)) for j in range(hid)]
    rh = [r[k] * h[k] for k in range(hid)]
    n = []
    for j in range(hid):
        s = bias[2][j] + inp[2][j] * x
        for k in range(hid):
            s += rec[2][j][k] * rh[k]
        for k in range(len(p)):
            s += ctl[2][j][k] * p[k]
        n.append(math.tanh(s))
    return [(1 - z[j]) * n[j] + z[j] * h[j] for j in range(hid)]


def lstm_step_scalar(rec, inp, ctl, bias, h, c, x, p, coupled=False, eps=0.0):
    """Gate order: input, forget, cell, output. Returns (h, c)."""
    hid = len(h)
    h_new, c_new = [], []
    for j in range(hid):
        s_i = _sig(_affine(rec, inp, ctl, bias, 0, j, h, x, p))
        f = _sig(_affine(rec, inp, ctl, bias, 1, j, h, x, p))
        g = math.tanh(_affine(rec, inp, ctl, bias, 2, j, h, x, p))
        o = _sig(_affine(rec, inp, ctl, bias, 3, j, h, x, p))
        i = (1 - eps) * (1 - f) * s_i if coupled else s_i
        cj = f * c[j] + i * g
        c_new.append(cj)
        h_new.append(o * math.tanh(cj))
    return h_new, c_new


def readout_scalar(w_out, b_out, skip, h, x):
    return sum(w * v for w, v in zip(w_out, h)) + b_out + skip * x


def mae_loop(a, b):
    total = 0.0
    for u, v in zip(a, b):
        total += abs(u - v)
    return total / len(a)


def adam_scalar_trace(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook ADAM recurrences on a scalar, one entry per gradient."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        theta = theta - lr * mh / (math.sqrt(vh) + eps)
        out.append(theta)
    return out


def one_pole_scalar(u, a):
    y, out = 0.0, []
    for v in u:
        y = a * y + (1 - a) * v
        out.append(y)
    return out
