"""Independent reference implementations used as test oracles.

Everything here is written from the textbook definitions with explicit loops
or full enumeration, sharing no code with the package.
"""
import itertools
import math

import numpy as np


def all_binary(n):
    return np.array(list(itertools.product([0.0, 1.0], repeat=n)))


def bb_log_likelihood(W, b, c, data):
    """Mean log p(v) of a Bernoulli-Bernoulli RBM by enumerating every state."""
    V, H = W.shape
    vs, hs = all_binary(V), all_binary(H)
    neg_energy = vs @ b[:, None] + (hs @ c)[None, :] + vs @ W @ hs.T
    log_z = np.logaddexp.reduce(neg_energy.ravel())
    free = data @ b + np.sum(np.logaddexp(0.0, data @ W + c), axis=1)
    return float(np.mean(free) - log_z)


def bb_exact_gradient(W, b, c, data):
    """Exact d(mean log p)/d(W, b, c) from data and model expectations."""
    V, H = W.shape
    vs, hs = all_binary(V), all_binary(H)
    neg_energy = vs @ b[:, None] + (hs @ c)[None, :] + vs @ W @ hs.T
    p = np.exp(neg_energy - np.logaddexp.reduce(neg_energy.ravel()))  # (2^V, 2^H)
    model_vh = vs.T @ p @ hs
    model_v = p.sum(axis=1) @ vs
    model_h = p.sum(axis=0) @ hs
    ph = 1.0 / (1.0 + np.exp(-(data @ W + c)))
    n = len(data)
    return {
        "W": data.T @ ph / n - model_vh,
        "b": data.mean(axis=0) - model_v,
        "c": ph.mean(axis=0) - model_h,
    }


def bb_sample_model(W, b, c, n, rng):
    """Exact visible samples from an RBM's marginal p(v)."""
    V, H = W.shape
    vs = all_binary(V)
    free = vs @ b + np.sum(np.logaddexp(0.0, vs @ W + c), axis=1)
    p = np.exp(free - np.logaddexp.reduce(free))
    return vs[rng.choice(len(vs), size=n, p=p)]


def gaussian_kernel_1d(size, sigma):
    g = [math.exp(-((i - size // 2) ** 2) / (2 * sigma * sigma)) for i in range(size)]
    s = math.fsum(g)
    return [x / s for x in g]


def ssim_bruteforce(a, b, window=11, sigma=1.5, K1=0.01, K2=0.03, L=1.0):
    """Mean SSIM over every full window, computed pixel by pixel."""
    g = gaussian_kernel_1d(window, sigma)
    w = [[gi * gj for gj in g] for gi in g]
    C1, C2 = (K1 * L) ** 2, (K2 * L) ** 2
    H, W = a.shape
    vals = []
    for r in range(H - window + 1):
        for q in range(W - window + 1):
            mx = my = sxx = syy = sxy = 0.0
            for i in range(window):
                for j in range(window):
                    x, y, wt = float(a[r + i, q + j]), float(b[r + i, q + j]), w[i][j]
                    mx += wt * x
                    my += wt * y
            for i in range(window):
                for j in range(window):
                    x, y, wt = float(a[r + i, q + j]) - mx, float(b[r + i, q + j]) - my, w[i][j]
                    sxx += wt * x * x
                    syy += wt * y * y
                    sxy += wt * x * y
            vals.append(((2 * mx * my + C1) * (2 * sxy + C2)) / ((mx * mx + my * my + C1) * (sxx + syy + C2)))
    return math.fsum(vals) / len(vals)


def mutual_information(P):
    """I(P) of a joint matrix straight from the definition, skipping zero cells."""
    k = P.shape[0]
    pi = [math.fsum(P[i, :]) for i in range(k)]
    pj = [math.fsum(P[:, j]) for j in range(k)]
    total = 0.0
    for i in range(k):
        for j in range(k):
            if P[i, j] > 0:
                total += P[i, j] * math.log(P[i, j] / (pi[i] * pj[j]))
    return total
