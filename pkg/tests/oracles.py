"""Slow, independent reference implementations used only by the tests."""

import itertools
import math

import numpy as np


def conv2d_loops(x, w, stride=1, pad=0):
    c, h, wd = x.shape
    d, _, k, _ = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((d, ho, wo))
    for o, i, j in itertools.product(range(d), range(ho), range(wo)):
        patch = xp[:, i * stride : i * stride + k, j * stride : j * stride + k]
        out[o, i, j] = (patch * w[o]).sum()
    return out


def sep_tconv_loops(x, wd, wp, p):
    c, h, w = x.shape
    up = np.zeros((c, h * p, w * p))
    for ch, i, j, a, b in itertools.product(range(c), range(h), range(w), range(p), range(p)):
        up[ch, i * p + a, j * p + b] = x[ch, i, j] * wd[ch, a, b]
    return np.einsum("dc,chw->dhw", wp, up)


def dft2_matrix_rfft(x):
    """Direct O(N^2) DFT over the last two axes, keeping W/2+1 columns."""
    h, w = x.shape[-2:]
    fy = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    fx = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
    full = np.einsum("uy,...yx,vx->...uv", fy, x, fx)
    return full[..., : w // 2 + 1]


def circular_conv2d(a, b):
    h, w = a.shape
    out = np.zeros((h, w))
    for i, j in itertools.product(range(h), range(w)):
        s = 0.0
        for m, n in itertools.product(range(h), range(w)):
            s += a[m, n] * b[(i - m) % h, (j - n) % w]
        out[i, j] = s
    return out


def density_bruteforce(x, k):
    """tau_i from an explicit sorted list of (distance, index) pairs."""
    n = len(x)
    tau = []
    for i in range(n):
        pairs = sorted((float(((x[i] - x[j]) ** 2).sum()), j) for j in range(n) if j != i)
        tau.append(math.exp(-sum(d for d, _ in pairs[:k]) / k))
    return np.array(tau)


def attention_loops(tokens, w, wq, wk, wv, wo, bo, heads, lam):
    n, c = tokens.shape
    dk = c // heads
    q, k, v = tokens @ wq, tokens @ wk, tokens @ wv
    v = v * (lam + w)[:, None]
    out = np.zeros((n, c))
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        for i in range(n):
            s = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dk) for j in range(n)])
            a = np.exp(s - s.max())
            a /= a.sum()
            out[i, sl] = sum(a[j] * v[j, sl] for j in range(n))
    return out @ wo + bo


def psnr_scalar(a, b):
    a, b = np.ravel(a), np.ravel(b)
    mse = sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)) / len(a)
    if mse < 1e-10:
        return 99.0
    return 10 * math.log10(1.0 / mse)


def ssim_scalar(a, b, win=7):
    """Loop-based SSIM over valid windows, population statistics, one channel at a time."""
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for ch in range(a.shape[0]):
        h, w = a.shape[1:]
        for i in range(h - win + 1):
            for j in range(w - win + 1):
                pa = a[ch, i : i + win, j : j + win].ravel()
                pb = b[ch, i : i + win, j : j + win].ravel()
                n = len(pa)
                ma, mb = sum(pa) / n, sum(pb) / n
                va = sum((p - ma) ** 2 for p in pa) / n
                vb = sum((p - mb) ** 2 for p in pb) / n
                cov = sum((p - ma) * (q - mb) for p, q in zip(pa, pb)) / n
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)
