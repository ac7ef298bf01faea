"""Slow, loop-based reference implementations used as test oracles."""

import math

import numpy as np


def psnr_oracle(a, b):
    if a.ndim == 3 and a.shape[0] == 3:
        a = 0.299 * a[0] + 0.587 * a[1] + 0.114 * a[2]
        b = 0.299 * b[0] + 0.587 * b[1] + 0.114 * b[2]
    a, b = a.reshape(-1), b.reshape(-1)
    mse = sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)) / len(a)
    return 99.0 if mse == 0 else min(10 * math.log10(1 / mse), 99.0)


def ssim_oracle_channel(x, y):
    g = [math.exp(-((i - 5) ** 2) / (2 * 1.5**2)) for i in range(11)]
    total = sum(g)
    g = [v / total for v in g]
    c1, c2 = 0.01**2, 0.03**2
    h, w = x.shape
    vals = []
    for i in range(h - 10):
        for j in range(w - 10):
            mx = my = sxx = syy = sxy = 0.0
            for u in range(11):
                for v in range(11):
                    wt = g[u] * g[v]
                    a, b = float(x[i + u, j + v]), float(y[i + u, j + v])
                    mx += wt * a
                    my += wt * b
                    sxx += wt * a * a
                    syy += wt * b * b
                    sxy += wt * a * b
            sxx -= mx * mx
            syy -= my * my
            sxy -= mx * my
            vals.append(((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2)))
    return sum(vals) / len(vals)


def ssim_oracle(a, b):
    if a.ndim == 2:
        a, b = a[None], b[None]
    return sum(ssim_oracle_channel(a[c], b[c]) for c in range(a.shape[0])) / a.shape[0]


def random_pairs(n, seed=0):
    rng = np.random.default_rng(seed)
    for i in range(n):
        c = 3 if i % 4 == 0 else 1
        h, w = int(rng.integers(11, 16)), int(rng.integers(11, 16))
        a = rng.uniform(0, 1, (c, h, w))
        b = np.clip(a + rng.normal(0, rng.uniform(0.01, 0.3), a.shape), 0, 1)
        yield a, b


def brute_force_recognition(scores, probe_ids, gallery_ids):
    n_p, n_g = scores.shape
    hits = 0
    for i in range(n_p):
        best_j, best = 0, scores[i, 0]
        for j in range(1, n_g):
            if scores[i, j] > best:
                best_j, best = j, scores[i, j]
        hits += probe_ids[i] == gallery_ids[best_j]
    genuine, impostor = [], []
    for i in range(n_p):
        for j in range(n_g):
            (genuine if probe_ids[i] == gallery_ids[j] else impostor).append(float(scores[i, j]))
    ranked = sorted(impostor)
    tars = []
    for far in (0.01, 0.001):
        # linear-interpolation quantile at 1 - far
        pos = (len(ranked) - 1) * (1 - far)
        lo = int(math.floor(pos))
        hi = min(lo + 1, len(ranked) - 1)
        thr = ranked[lo] + (ranked[hi] - ranked[lo]) * (pos - lo)
        tars.append(100.0 * sum(g > thr for g in genuine) / len(genuine))
    return 100.0 * hits / n_p, tars[0], tars[1]


