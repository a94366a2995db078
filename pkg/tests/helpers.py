"""Independent oracles shared by the test modules."""

from __future__ import annotations

import numpy as np


def naive_conv2d(x, w, b, pad):
    """Direct quadruple-loop cross-correlation in float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wd = x.shape
    k, _, f, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    out = np.zeros((n, k, h + 2 * pad - f + 1, wd + 2 * pad - f + 1))
    for ni in range(n):
        for ki in range(k):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    out[ni, ki, i, j] = b[ki] + np.sum(w[ki] * xp[ni, :, i : i + f, j : j + f])
    return out


def central_diff(fn, x, h=1e-3):
    """Central finite differences of scalar ``fn`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        up = fn()
        x[idx] = orig - h
        down = fn()
        x[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def max_rel_error(analytic, numeric, atol=1e-8):
    """Largest entrywise ``|a - n| / max(|a|, |n|)``.

    Entries whose magnitude is below 1e-3 of the gradient's largest entry
    (or below ``atol``) are compared against that floor instead, so exact
    zeros do not divide by 0.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(n).max())
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(1e-3 * scale, atol))
    return float(np.max(np.abs(a - n) / denom))


def direct_ssim(x, y, size=11, sigma=1.5, c1=0.01**2, c2=0.03**2):
    """SSIM by explicit per-pixel window sums over a mirror-reflected border."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0, 1)
    y = np.clip(np.asarray(y, dtype=np.float64), 0, 1)
    r = size // 2
    coords = np.arange(size) - r
    g1 = np.exp(-(coords**2) / (2 * sigma**2))
    win = np.outer(g1, g1)
    win /= win.sum()
    h, w = x.shape

    def reflect(i, n):
        # mirror without repeating the edge sample: -1 -> 1, n -> n-2
        while i < 0 or i >= n:
            i = -i if i < 0 else 2 * (n - 1) - i
        return i

    total = 0.0
    for i in range(h):
        for j in range(w):
            mx = my = sxx = syy = sxy = 0.0
            for u in range(size):
                for v in range(size):
                    a = x[reflect(i + u - r, h), reflect(j + v - r, w)]
                    b = y[reflect(i + u - r, h), reflect(j + v - r, w)]
                    wt = win[u, v]
                    mx += wt * a
                    my += wt * b
                    sxx += wt * a * a
                    syy += wt * b * b
                    sxy += wt * a * b
            vx, vy, cxy = sxx - mx * mx, syy - my * my, sxy - mx * my
            total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return total / (h * w)
