"""Scalar-loop reference implementations of every metric and loss term.

Single-image (1, c, h, w) inputs only; written for clarity, not speed.
"""

import math

import numpy as np


def _refl(i, n):
    if i < 0:
        return -i
    if i >= n:
        return 2 * (n - 1) - i
    return i


def _flat(a):
    return [float(v) for v in np.ravel(a)]


def loop_psnr(a, b):
    p, t = _flat(a), _flat(b)
    mse = sum((u - v) ** 2 for u, v in zip(p, t)) / len(p)
    return 100.0 if mse == 0 else min(100.0, 10 * math.log10(1 / mse))


def loop_l1(a, b):
    p, t = _flat(a), _flat(b)
    return sum(abs(u - v) for u, v in zip(p, t)) / len(p)


def loop_mse(a, b):
    p, t = _flat(a), _flat(b)
    return sum((u - v) ** 2 for u, v in zip(p, t)) / len(p)


def loop_charbonnier(a, b, eps=1e-3):
    p, t = _flat(a), _flat(b)
    return sum(math.sqrt((u - v) ** 2 + eps * eps) for u, v in zip(p, t)) / len(p) - eps


def loop_cosine(a, b, eps=1e-8):
    _, C, H, W = a.shape
    total = 0.0
    for y in range(H):
        for x in range(W):
            pv = [float(a[0, c, y, x]) for c in range(C)]
            tv = [float(b[0, c, y, x]) for c in range(C)]
            dot = sum(u * v for u, v in zip(pv, tv))
            nrm = math.sqrt(sum(u * u for u in pv)) * math.sqrt(sum(v * v for v in tv))
            total += 1 - dot / max(nrm, eps)
    return total / (H * W)


def loop_patch(a, b, p=8, eps=1e-2, mode="rectified"):
    _, C, H, W = a.shape
    num = den = 0.0
    for c in range(C):
        for py in range(H // p):
            for px in range(W // p):
                d = [float(a[0, c, py * p + i, px * p + j] - b[0, c, py * p + i, px * p + j])
                     for i in range(p) for j in range(p)]
                m = sum(d) / len(d)
                v = sum((x - m) ** 2 for x in d) / len(d)
                e = abs(m) + v if mode == "rectified" else 1 / (abs(m) + eps) + 1 / (v + eps)
                w = math.exp(min(e, 80))
                num += w * sum(abs(x) for x in d) / len(d)
                den += w
    return num / den


def loop_histogram(a, b, bins=32):
    _, C, H, W = a.shape
    centers = [(k + 0.5) / bins for k in range(bins)]
    s = 1 / bins
    total = 0.0
    for c in range(C):
        hs = []
        for img in (a, b):
            vals = _flat(img[0, c])
            h = [sum(math.exp(-(v - mu) ** 2 / (2 * s * s)) for v in vals) / len(vals) for mu in centers]
            z = sum(h)
            hs.append([v / z for v in h])
        total += sum(abs(u - v) for u, v in zip(*hs))
    return total


def sobel_mag_loop(x):
    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    C, H, W = x.shape
    out = np.zeros(x.shape)
    for c in range(C):
        for y in range(H):
            for xx in range(W):
                gx = gy = 0.0
                for i in range(3):
                    for j in range(3):
                        v = float(x[c, min(max(y + i - 1, 0), H - 1), min(max(xx + j - 1, 0), W - 1)])
                        gx += kx[i][j] * v
                        gy += kx[j][i] * v
                out[c, y, xx] = math.sqrt(gx * gx + gy * gy + 1e-12)
    return out


def loop_edge(a, b):
    ea, eb = sobel_mag_loop(a[0]), sobel_mag_loop(b[0])
    return loop_l1(ea[None], eb[None])


def ssim_loop(a, b):
    """Direct 2-D windowed SSIM, one pixel at a time."""
    a, b = a[0], b[0]
    g1 = [math.exp(-((i - 5) ** 2) / (2 * 1.5 ** 2)) for i in range(11)]
    s = sum(g1)
    g1 = [v / s for v in g1]
    c1, c2 = 1e-4, 9e-4
    total, count = 0.0, 0
    C, H, W = a.shape
    for c in range(C):
        for y in range(H):
            for x in range(W):
                mp = mt = spp = stt = spt = 0.0
                for dy in range(11):
                    for dx in range(11):
                        wgt = g1[dy] * g1[dx]
                        p = float(a[c, _refl(y + dy - 5, H), _refl(x + dx - 5, W)])
                        t = float(b[c, _refl(y + dy - 5, H), _refl(x + dx - 5, W)])
                        mp += wgt * p
                        mt += wgt * t
                        spp += wgt * p * p
                        stt += wgt * t * t
                        spt += wgt * p * t
                vp, vt, cv = spp - mp * mp, stt - mt * mt, spt - mp * mt
                total += ((2 * mp * mt + c1) * (2 * cv + c2)) / ((mp * mp + mt * mt + c1) * (vp + vt + c2))
                count += 1
    return total / count


# loss-term name -> oracle, matching metrics.TERMS
TERM_ORACLES = {
    "l1": loop_l1,
    "mse": loop_mse,
    "charbonnier": loop_charbonnier,
    "ssim": lambda a, b: 1.0 - ssim_loop(a, b),
    "cosine": loop_cosine,
    "patch": loop_patch,
    "histogram": loop_histogram,
    "edge": loop_edge,
}
