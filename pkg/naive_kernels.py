# naive_kernels.py
"""
Loop-nest reference kernels, written independently of graphlower.kernels.
They are slow on purpose and only ever run on tiny tensors in tests.
"""

import math

import numpy as np


def matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def fully_connected(x, w, b):
    return matmul(x, w) + np.asarray(b, dtype=np.float64)


def relu(x):
    return np.where(x > 0, x, 0.0)


def conv2d_nhwc(x, filt, bias, stride=(1, 1), pads=(0, 0, 0, 0)):
    n, h, w, c = x.shape
    oc, kh, kw, _ = filt.shape
    pt, pl, pb, pr = pads
    oh = (h + pt + pb - kh) // stride[0] + 1
    ow = (w + pl + pr - kw) // stride[1] + 1
    out = np.zeros((n, oh, ow, oc), dtype=np.float64)
    for b in range(n):
        for y in range(oh):
            for z in range(ow):
                for o in range(oc):
                    s = float(bias[o])
                    for i in range(kh):
                        for j in range(kw):
                            yy = y * stride[0] + i - pt
                            zz = z * stride[1] + j - pl
                            if 0 <= yy < h and 0 <= zz < w:
                                for ch in range(c):
                                    s += float(x[b, yy, zz, ch]) * float(filt[o, i, j, ch])
                    out[b, y, z, o] = s
    return out


def max_pool_nhwc(x, kernel=(2, 2), stride=(2, 2)):
    n, h, w, c = x.shape
    oh = (h - kernel[0]) // stride[0] + 1
    ow = (w - kernel[1]) // stride[1] + 1
    out = np.zeros((n, oh, ow, c), dtype=np.float64)
    for b in range(n):
        for y in range(oh):
            for z in range(ow):
                for ch in range(c):
                    best = -math.inf
                    for i in range(kernel[0]):
                        for j in range(kernel[1]):
                            best = max(best, float(x[b, y * stride[0] + i, z * stride[1] + j, ch]))
                    out[b, y, z, ch] = best
    return out


def softmax_rows(x):
    out = np.zeros(x.shape, dtype=np.float64)
    for i in range(x.shape[0]):
        row = [float(v) for v in x[i]]
        top = max(row)
        exps = [math.exp(v - top) for v in row]
        total = sum(exps)
        for j, e in enumerate(exps):
            out[i, j] = e / total
    return out


def cnn_forward(x, p):
    """The conftest CNN, evaluated with the loops above."""
    h = relu(conv2d_nhwc(x, p["f1"], p["c1"], pads=(1, 1, 1, 1)))
    h = relu(conv2d_nhwc(h, p["f2"], p["c2"], pads=(1, 1, 1, 1)))
    h = max_pool_nhwc(h)
    h = h.reshape(1, -1)
    return softmax_rows(fully_connected(h, p["w"], p["b"]))
