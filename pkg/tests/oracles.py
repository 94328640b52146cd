"""Independent reference implementations used by the tests.

Each oracle is deliberately naive (loops, brute force, closed forms) and
shares no code with the package.
"""
from __future__ import annotations

import itertools

import numpy as np


def numeric_grad(f, arrays, h=1e-5):
    """Central differences of scalar ``f(*arrays)`` w.r.t. each array (float64)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f(*arrays)
            a[i] = old - h
            fm = f(*arrays)
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / den)


def set_partitions(n, k):
    """All labelings of n items into exactly k non-empty, canonically numbered groups."""
    for lab in itertools.product(range(k), repeat=n):
        # canonical form: first occurrence order 0, 1, 2, ...
        seen = []
        for x in lab:
            if x not in seen:
                seen.append(x)
        if len(seen) != k or seen != list(range(k)):
            continue
        yield np.array(lab)


def kmeans_global_optimum(x, k) -> float:
    """Exhaustive minimum of the k-means objective over all partitions."""
    best = np.inf
    for lab in set_partitions(len(x), k):
        cost = 0.0
        for c in range(k):
            pts = x[lab == c]
            cost += ((pts - pts.mean(0)) ** 2).sum()
        best = min(best, cost)
    return best


def naive_assign(x, centroids):
    out = np.empty(len(x), dtype=np.int64)
    for i, p in enumerate(x):
        best, bi = np.inf, -1
        for j, c in enumerate(centroids):
            d = sum((float(p[t]) - float(c[t])) ** 2 for t in range(len(p)))
            if d < best:
                best, bi = d, j
        out[i] = bi
    return out


def mc_masked_fraction(n, p, span, draws, seed=12345):
    """Monte-Carlo masked fraction: each frame starts a span with prob p; spans clip at the end."""
    rng = np.random.default_rng(seed)
    total = 0
    for _ in range(draws):
        m = np.zeros(n, dtype=bool)
        for s in np.flatnonzero(rng.random(n) < p):
            m[s:s + span] = True
        total += m.sum()
    return total / (draws * n)


def analytic_masked_fraction(n, p, span):
    """Expected masked fraction: frame t is unmasked iff none of the min(t+1, span) possible starts fired."""
    t = np.arange(n)
    return float(np.mean(1.0 - (1.0 - p) ** np.minimum(t + 1, span)))


def direct_dft_magnitude(frame, n_fft):
    x = np.zeros(n_fft)
    x[:len(frame)] = frame
    k = np.arange(n_fft // 2 + 1)[:, None]
    t = np.arange(n_fft)[None, :]
    re = (x * np.cos(2 * np.pi * k * t / n_fft)).sum(1)
    im = -(x * np.sin(2 * np.pi * k * t / n_fft)).sum(1)
    return np.hypot(re, im)


def scalar_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam on a single scalar for a sequence of gradients."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        theta = theta - lr * mh / (np.sqrt(vh) + eps)
    return theta


def naive_rvq(z, codebooks, pinned=None):
    """Per-level argmin by explicit loops; returns codes (levels x N)."""
    codes = np.zeros((len(codebooks), len(z)), dtype=np.int64)
    for i, x in enumerate(z):
        r = x.astype(np.float64).copy()
        for lvl, cb in enumerate(codebooks):
            if lvl == 0 and pinned is not None:
                j = int(pinned[i])
            else:
                d = [float(((r - c) ** 2).sum()) for c in cb]
                j = int(np.argmin(d))
            codes[lvl, i] = j
            r = r - cb[j]
    return codes
