"""Slow reference implementations used only by the tests."""

import numpy as np


def conv2d_naive(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oi] if b is not None else 0.0
                    for ci in range(c):
                        for a in range(k):
                            for bb in range(k):
                                r, s = i * stride + a - pad, j * stride + bb - pad
                                if 0 <= r < h and 0 <= s < wd:
                                    acc += x[ni, ci, r, s] * w[oi, ci, a, bb]
                    out[ni, oi, i, j] = acc
    return out


def deconv2d_naive(x, w, b, stride, pad):
    """Scatter form: every input pixel stamps the kernel onto the output."""
    n, cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    ho = (h - 1) * stride - 2 * pad + k
    wo = (wd - 1) * stride - 2 * pad + k
    out = np.zeros((n, cout, ho, wo))
    for ni in range(n):
        for ci in range(cin):
            for i in range(h):
                for j in range(wd):
                    for co in range(cout):
                        for a in range(k):
                            for bb in range(k):
                                r, s = i * stride + a - pad, j * stride + bb - pad
                                if 0 <= r < ho and 0 <= s < wo:
                                    out[ni, co, r, s] += x[ni, ci, i, j] * w[ci, co, a, bb]
    if b is not None:
        out += np.asarray(b)[None, :, None, None]
    return out


def conv_matrix(w, in_shape, stride, pad):
    """Dense matrix M with conv2d(x) == M @ x.ravel() (no bias), built
    entry by entry from the index arithmetic of the convolution."""
    c, h, wd = in_shape
    o, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    m = np.zeros((o * ho * wo, c * h * wd))
    for oi in range(o):
        for i in range(ho):
            for j in range(wo):
                row = (oi * ho + i) * wo + j
                for ci in range(c):
                    for a in range(k):
                        for bb in range(k):
                            r, s = i * stride + a - pad, j * stride + bb - pad
                            if 0 <= r < h and 0 <= s < wd:
                                m[row, (ci * h + r) * wd + s] += w[oi, ci, a, bb]
    return m, (o, ho, wo)


def matmul_naive(a, b):
    n, d = a.shape
    _, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(d):
                out[i, j] += a[i, t] * b[t, j]
    return out
