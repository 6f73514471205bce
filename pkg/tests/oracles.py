"""Slow definitional re-implementations used as ground truth in tests.

Everything here is deliberately written with plain python loops (or the
closed-form scalar formula) and no shared code with the package, so a bug
in an optimized kernel cannot hide in its own oracle.
"""

import numpy as np

from bpct.volcore import View


def loop_conv2d(x, w, b, stride, pad):
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((cin, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    for co in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = b[co]
                for ci in range(cin):
                    for ki in range(kh):
                        for kj in range(kw):
                            acc += w[co, ci, ki, kj] * xp[ci, i * stride + ki,
                                                          j * stride + kj]
                out[co, i, j] = acc
    return out


def loop_conv3d(x, w, b, stride, pad):
    cin, d, h, wd = x.shape
    cout, _, kd, kh, kw = w.shape
    xp = np.zeros((cin, d + 2 * pad, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + d, pad:pad + h, pad:pad + wd] = x
    do = (d + 2 * pad - kd) // stride + 1
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, do, ho, wo))
    for co in range(cout):
        for z in range(do):
            for i in range(ho):
                for j in range(wo):
                    acc = b[co]
                    for ci in range(cin):
                        for kz in range(kd):
                            for ki in range(kh):
                                for kj in range(kw):
                                    acc += w[co, ci, kz, ki, kj] * \
                                        xp[ci, z * stride + kz, i * stride + ki,
                                           j * stride + kj]
                    out[co, z, i, j] = acc
    return out


def loop_upsample2d(x, factor):
    """Half-pixel-center bilinear with edge clamping."""
    c, h, w = x.shape
    out = np.zeros((c, h * factor, w * factor))
    for i in range(h * factor):
        si = (i + 0.5) / factor - 0.5
        i0 = int(np.floor(si))
        ti = si - i0
        i0c, i1c = min(max(i0, 0), h - 1), min(max(i0 + 1, 0), h - 1)
        for j in range(w * factor):
            sj = (j + 0.5) / factor - 0.5
            j0 = int(np.floor(sj))
            tj = sj - j0
            j0c, j1c = min(max(j0, 0), w - 1), min(max(j0 + 1, 0), w - 1)
            for ch in range(c):
                top = (1 - tj) * x[ch, i0c, j0c] + tj * x[ch, i0c, j1c]
                bot = (1 - tj) * x[ch, i1c, j0c] + tj * x[ch, i1c, j1c]
                out[ch, i, j] = (1 - ti) * top + ti * bot
    return out


def loop_project(arr, view):
    """Per-pixel ray average."""
    d, h, w = arr.shape
    if view is View.FRONTAL:
        out = np.zeros((h, w))
        for y in range(h):
            for x in range(w):
                out[y, x] = sum(arr[z, y, x] for z in range(d)) / d
    else:
        out = np.zeros((h, d))
        for y in range(h):
            for z in range(d):
                out[y, z] = sum(arr[z, y, x] for x in range(w)) / w
    return out


def conv1x1(x, w, b):
    """Pointwise conv as an explicit per-position matrix product."""
    cout = w.shape[0]
    c, h, wd = x.shape
    out = np.zeros((cout, h, wd))
    for i in range(h):
        for j in range(wd):
            out[:, i, j] = w.reshape(cout, c) @ x[:, i, j] + b
    return out


def softmax_rows(m):
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def loop_position_attention(x, wq, bq, wk, bk, wv, bv, gamma):
    """Spatial self-attention: every position mixes all positions."""
    c, h, w = x.shape
    n = h * w
    q = conv1x1(x, wq, bq).reshape(-1, n)
    k = conv1x1(x, wk, bk).reshape(-1, n)
    v = conv1x1(x, wv, bv).reshape(c, n)
    s = softmax_rows(q.T @ k)                  # (N, N), rows sum to 1
    out = np.zeros((c, n))
    for ci in range(c):
        for i in range(n):
            out[ci, i] = sum(s[i, j] * v[ci, j] for j in range(n))
    return gamma * out.reshape(c, h, w) + x


def loop_channel_attention(x, gamma):
    """Channel self-attention via the C x C gram affinity."""
    c, h, w = x.shape
    ff = x.reshape(c, h * w)
    xaff = softmax_rows(ff @ ff.T)             # (C, C)
    out = np.zeros_like(ff)
    for i in range(c):
        for p in range(h * w):
            out[i, p] = sum(xaff[i, j] * ff[j, p] for j in range(c))
    return gamma * out.reshape(c, h, w) + x


def brute_nearest(vectors, codebook):
    """Exhaustive nearest-entry scan, lowest index on ties."""
    idx = np.zeros(len(vectors), dtype=np.int64)
    for i, v in enumerate(vectors):
        best, best_d = 0, None
        for k, e in enumerate(codebook):
            d = float(np.sum((v - e) ** 2))
            if best_d is None or d < best_d:
                best, best_d = k, d
        idx[i] = best
    return idx


def loop_psnr(a, b, peak=1.0):
    diff = (np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)).ravel()
    mse = sum(float(d) * float(d) for d in diff) / diff.size
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def loop_ssim3d(a, b, peak=1.0, win=7):
    """Per-window structural similarity, population moments, plain loops."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    d, h, w = a.shape
    vals = []
    for z in range(d - win + 1):
        for y in range(h - win + 1):
            for x in range(w - win + 1):
                pa = a[z:z + win, y:y + win, x:x + win].ravel()
                pb = b[z:z + win, y:y + win, x:x + win].ravel()
                ma, mb = pa.mean(), pb.mean()
                va = ((pa - ma) ** 2).mean()
                vb = ((pb - mb) ** 2).mean()
                cov = ((pa - ma) * (pb - mb)).mean()
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2))
                            / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.clip(np.mean(vals), -1.0, 1.0))
