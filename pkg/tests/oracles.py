"""Slow, direct reference implementations used only by the tests.

Nothing here imports the code paths it is used to check: loops and explicit
formulas stand in for the vectorized library versions.
"""
import math

import numpy as np


def conv2d_loops(x, w, b=None):
    """3x3 'same' cross-correlation with zero padding, by explicit loops."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    r = k // 2
    xp = np.zeros((n, c, h + 2 * r, wd + 2 * r), dtype=np.float64)
    xp[:, :, r:r + h, r:r + wd] = x
    out = np.zeros((n, o, h, wd))
    for ni in range(n):
        for oi in range(o):
            for i in range(h):
                for j in range(wd):
                    out[ni, oi, i, j] = np.sum(xp[ni, :, i:i + k, j:j + k] * w[oi])
            if b is not None:
                out[ni, oi] += b[oi]
    return out


def instance_norm_loops(x, eps=1e-5):
    out = np.empty_like(x, dtype=np.float64)
    for n in range(x.shape[0]):
        for c in range(x.shape[1]):
            v = x[n, c].astype(np.float64)
            mu = v.sum() / v.size
            var = ((v - mu) ** 2).sum() / v.size
            out[n, c] = (v - mu) / math.sqrt(var + eps)
    return out


def central_gradient(f, x, step=1e-6):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        fp = f(x)
        x[idx] = orig - step
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * step)
    return g


def jacobian_logdet(fn, x, step=1e-5):
    """log|det dfn/dx| with the Jacobian assembled column by column."""
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    cols = []
    for i in range(d):
        e = np.zeros(d)
        e[i] = step
        plus = np.asarray(fn((x.ravel() + e).reshape(x.shape)), dtype=np.float64).ravel()
        minus = np.asarray(fn((x.ravel() - e).reshape(x.shape)), dtype=np.float64).ravel()
        cols.append((plus - minus) / (2 * step))
    J = np.stack(cols, axis=1)
    sign, logdet = np.linalg.slogdet(J)
    assert sign != 0
    return logdet


def psnr_direct(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    total = 0.0
    for a, b in zip(x, y):
        total += (a - b) ** 2
    return 10 * math.log10(1.0 / (total / x.size))


def ssim_windows(x, y, size=11, sigma=1.5, c1=1e-4, c2=9e-4):
    """Per-window weighted SSIM over every fully contained window, band mean."""
    r = size // 2
    g1 = np.array([math.exp(-0.5 * (i / sigma) ** 2) for i in range(-r, r + 1)])
    win = np.outer(g1, g1)
    win /= win.sum()
    vals = []
    for b in range(x.shape[2]):
        xb, yb = x[..., b].astype(np.float64), y[..., b].astype(np.float64)
        scores = []
        for i in range(xb.shape[0] - size + 1):
            for j in range(xb.shape[1] - size + 1):
                px, py = xb[i:i + size, j:j + size], yb[i:i + size, j:j + size]
                mx, my = np.sum(win * px), np.sum(win * py)
                vx = np.sum(win * (px - mx) ** 2)
                vy = np.sum(win * (py - my) ** 2)
                cxy = np.sum(win * (px - mx) * (py - my))
                scores.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
        vals.append(np.mean(scores))
    return float(np.mean(vals))


def sam_pixels(x, y):
    angles = []
    for p in range(x.shape[0]):
        for q in range(x.shape[1]):
            a, b = x[p, q].astype(np.float64), y[p, q].astype(np.float64)
            cos = float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
            angles.append(math.acos(min(1.0, max(-1.0, cos))))
    return float(np.mean(angles))


def ergas_direct(x, y, ratio):
    terms = []
    for b in range(x.shape[2]):
        rmse = math.sqrt(np.mean((x[..., b].astype(np.float64) - y[..., b]) ** 2))
        terms.append((rmse / np.mean(y[..., b])) ** 2)
    return 100 * ratio * math.sqrt(sum(terms) / len(terms))


def q_window(a, b):
    """Universal quality index of two equal patches (population statistics)."""
    a = a.astype(np.float64).ravel()
    b = b.astype(np.float64).ravel()
    ma, mb = a.mean(), b.mean()
    va, vb = ((a - ma) ** 2).mean(), ((b - mb) ** 2).mean()
    cov = ((a - ma) * (b - mb)).mean()
    return 4 * cov * ma * mb / ((va + vb) * (ma ** 2 + mb ** 2))


def q_sliding(a, b, block):
    """Mean of q_window over every block x block window (stride 1)."""
    s = min(block, *a.shape)
    vals = [q_window(a[i:i + s, j:j + s], b[i:i + s, j:j + s])
            for i in range(a.shape[0] - s + 1) for j in range(a.shape[1] - s + 1)]
    return float(np.mean(vals))
