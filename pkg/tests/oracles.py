"""Independent reference implementations used only by the test suite.

Everything here is written as plain scalar loops (or direct formula
evaluation) so it shares no code path with the vectorized package.
"""

import numpy as np


def conv2d_oracle(x, w, b, stride=1, padding="same"):
    """Nested-loop cross-correlation, zero padding."""
    n, c, h, w_in = x.shape
    out_c, _, kh, kw = w.shape
    ph = kh // 2 if padding == "same" else 0
    pw = kw // 2 if padding == "same" else 0
    h_out = (h + 2 * ph - kh) // stride + 1
    w_out = (w_in + 2 * pw - kw) // stride + 1
    y = np.zeros((n, out_c, h_out, w_out))
    for ni in range(n):
        for oc in range(out_c):
            for oh in range(h_out):
                for ow in range(w_out):
                    acc = 0.0
                    for ic in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                ih = oh * stride + ki - ph
                                iw = ow * stride + kj - pw
                                if 0 <= ih < h and 0 <= iw < w_in:
                                    acc += x[ni, ic, ih, iw] * w[oc, ic, ki, kj]
                    y[ni, oc, oh, ow] = acc + b[oc]
    return y


def maxpool2_oracle(x):
    """Exhaustive 2x2 window scan (even dims only)."""
    n, c, h, w = x.shape
    y = np.empty((n, c, h // 2, w // 2))
    for ni in range(n):
        for ci in range(c):
            for oh in range(h // 2):
                for ow in range(w // 2):
                    y[ni, ci, oh, ow] = max(
                        x[ni, ci, 2 * oh + di, 2 * ow + dj]
                        for di in range(2)
                        for dj in range(2)
                    )
    return y


def bilinear_upsample_oracle(x, factor):
    """Per-pixel interpolation-weight table, edge indices clamped."""
    n, c, h, w = x.shape
    y = np.zeros((n, c, h * factor, w * factor))
    for i in range(h * factor):
        sy = (i + 0.5) / factor - 0.5
        y0 = int(np.floor(sy))
        ty = sy - y0
        rows = [(min(max(y0, 0), h - 1), 1.0 - ty), (min(max(y0 + 1, 0), h - 1), ty)]
        for j in range(w * factor):
            sx = (j + 0.5) / factor - 0.5
            x0 = int(np.floor(sx))
            tx = sx - x0
            cols = [(min(max(x0, 0), w - 1), 1.0 - tx), (min(max(x0 + 1, 0), w - 1), tx)]
            for r, wr in rows:
                for cc, wc in cols:
                    y[:, :, i, j] += wr * wc * x[:, :, r, cc]
    return y


def softmax_channels_oracle(logits):
    """Direct exp/sum per pixel, no stabilization tricks."""
    n, c, h, w = logits.shape
    y = np.zeros_like(logits, dtype=np.float64)
    for ni in range(n):
        for i in range(h):
            for j in range(w):
                e = np.array([np.exp(logits[ni, ci, i, j]) for ci in range(c)])
                y[ni, :, i, j] = e / e.sum()
    return y


def convlstm_step_oracle(banks, peep, biases, x, s, o, peephole_on_new_state=True):
    """Scalar-loop ConvLSTM step with peephole gates.

    banks: dict of (out_c, in_c, kh, kw) weight arrays keyed
    xi, oi, xf, of, xs, os, xo, oo; peep: dict si, sf, so of per-channel
    vectors; biases: dict i, f, s, o of per-channel vectors.
    """

    def conv_same(inp, w):
        out_c, in_c, kh, kw = w.shape
        n, _, h, wd = inp.shape
        ph, pw = kh // 2, kw // 2
        out = np.zeros((n, out_c, h, wd))
        for ni in range(n):
            for oc in range(out_c):
                for ih in range(h):
                    for iw in range(wd):
                        acc = 0.0
                        for ic in range(in_c):
                            for ki in range(kh):
                                for kj in range(kw):
                                    src_h = ih + ki - ph
                                    src_w = iw + kj - pw
                                    if 0 <= src_h < h and 0 <= src_w < wd:
                                        acc += inp[ni, ic, src_h, src_w] * w[oc, ic, ki, kj]
                        out[ni, oc, ih, iw] = acc
        return out

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    cvec = lambda v: v.reshape(1, -1, 1, 1)
    f = sig(conv_same(x, banks["xf"]) + conv_same(o, banks["of"]) + cvec(peep["sf"]) * s + cvec(biases["f"]))
    i = sig(conv_same(x, banks["xi"]) + conv_same(o, banks["oi"]) + cvec(peep["si"]) * s + cvec(biases["i"]))
    g = np.tanh(conv_same(x, banks["xs"]) + conv_same(o, banks["os"]) + cvec(biases["s"]))
    s_new = f * s + i * g
    s_peek = s_new if peephole_on_new_state else s
    og = sig(conv_same(x, banks["xo"]) + conv_same(o, banks["oo"]) + cvec(peep["so"]) * s_peek + cvec(biases["o"]))
    o_new = og * np.tanh(s_new)
    return s_new, o_new


def weighted_cross_entropy_oracle(logits, labels, weights, ignore=255):
    """Scalar-loop class-weighted cross entropy, mean over scored pixels."""
    n, k, h, w = logits.shape
    total = 0.0
    count = 0
    for ni in range(n):
        for i in range(h):
            for j in range(w):
                y = int(labels[ni, i, j])
                if y == ignore:
                    continue
                z = logits[ni, :, i, j]
                e = np.exp(z - z.max())
                p = e / e.sum()
                total += -weights[y] * np.log(p[y])
                count += 1
    return total / count


def confusion_oracle(truth, pred, k, ignore=255):
    cm = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(truth.reshape(-1), pred.reshape(-1)):
        if t == ignore:
            continue
        cm[int(t), int(p)] += 1
    return cm
