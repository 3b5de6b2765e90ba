"""Brute-force reference implementations used only by the tests.

Everything here is written with explicit Python loops over scalars so it
shares no code path with the vectorized kernels under test.
"""

import math

import numpy as np


def conv2d_direct(x, kernel, stride=1, pad=0, bias=None):
    h, w, cin = x.shape
    k, _, _, cout = kernel.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for co in range(cout):
                acc = 0.0 if bias is None else float(bias[co])
                for ky in range(k):
                    for kx in range(k):
                        yy = i * stride + ky - pad
                        xx = j * stride + kx - pad
                        if 0 <= yy < h and 0 <= xx < w:
                            for ci in range(cin):
                                acc += float(x[yy, xx, ci]) * float(kernel[ky, kx, ci, co])
                out[i, j, co] = acc
    return out


def batch_norm_eval_scalar(x, gamma, beta, mean, var, eps):
    out = np.empty(x.shape)
    for idx in np.ndindex(x.shape):
        c = idx[-1]
        out[idx] = gamma[c] * (x[idx] - mean[c]) / math.sqrt(var[c] + eps) + beta[c]
    return out


def batch_norm_train_scalar(x, gamma, beta, eps):
    h, w, c = x.shape
    n = h * w
    out = np.empty(x.shape)
    for ch in range(c):
        vals = [float(x[i, j, ch]) for i in range(h) for j in range(w)]
        mu = sum(vals) / n
        var = sum((v - mu) ** 2 for v in vals) / n
        for i in range(h):
            for j in range(w):
                out[i, j, ch] = gamma[ch] * (x[i, j, ch] - mu) / math.sqrt(var + eps) + beta[ch]
    return out


def edge_map_loops(f, weights):
    h, w = f.shape
    out = np.zeros((h, w))
    for x in range(h):
        for y in range(w):
            s = (f[min(x + 1, h - 1), y] + f[max(x - 1, 0), y]
                 + f[x, min(y + 1, w - 1)] + f[x, max(y - 1, 0)] - 4 * f[x, y])
            out[x, y] = weights[x, y] * abs(s)
    return out


def median_loops(d, s, support=None):
    """Lower median over the clipped window; with ``support`` only supported pixels count."""
    h, w = d.shape
    r = s // 2
    out = np.zeros((h, w))
    for x in range(h):
        for y in range(w):
            vals = []
            for p in range(max(x - r, 0), min(x + r, h - 1) + 1):
                for q in range(max(y - r, 0), min(y + r, w - 1) + 1):
                    if support is None or support[p, q]:
                        vals.append(float(d[p, q]))
            vals.sort()
            out[x, y] = vals[(len(vals) - 1) // 2] if vals else 0.0
    return out


def metrics_loops(pred, gt, cap=80.0, lo=1e-3):
    n = 0
    abs_rel = sq_rel = sq = sq_log = 0.0
    d = [0, 0, 0]
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if g <= 0:
            continue
        p = min(max(float(p), lo), cap)
        g = min(max(float(g), lo), cap)
        n += 1
        abs_rel += abs(p - g) / g
        sq_rel += (p - g) ** 2 / g
        sq += (p - g) ** 2
        sq_log += (math.log(p) - math.log(g)) ** 2
        ratio = max(p / g, g / p)
        for k in range(3):
            if ratio < 1.25 ** (k + 1):
                d[k] += 1
    return dict(abs_rel=abs_rel / n, sq_rel=sq_rel / n, rmse=math.sqrt(sq / n),
                rmse_log=math.sqrt(sq_log / n), delta1=d[0] / n, delta2=d[1] / n, delta3=d[2] / n)


def bilinear_manual(x, factor):
    """Half-pixel-centre bilinear upsampling evaluated point by point."""
    h, w, c = x.shape
    out = np.zeros((h * factor, w * factor, c))
    for oy in range(h * factor):
        sy = max((oy + 0.5) / factor - 0.5, 0.0)
        y0 = min(int(math.floor(sy)), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for ox in range(w * factor):
            sx = max((ox + 0.5) / factor - 0.5, 0.0)
            x0 = min(int(math.floor(sx)), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[oy, ox] = ((1 - fy) * (1 - fx) * x[y0, x0] + (1 - fy) * fx * x[y0, x1]
                           + fy * (1 - fx) * x[y1, x0] + fy * fx * x[y1, x1])
    return out


def central_difference(fn, arr, index, h=1e-3):
    """d fn / d arr[index] by central differences, restoring ``arr`` afterwards."""
    orig = arr[index]
    arr[index] = orig + h
    up = fn()
    arr[index] = orig - h
    down = fn()
    arr[index] = orig
    return (up - down) / (2 * h)


def rel_error(a, b, floor=1e-12):
    return abs(a - b) / max(abs(a), abs(b), floor)
