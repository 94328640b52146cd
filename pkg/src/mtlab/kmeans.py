"""k-means producing per-frame cluster-ID prediction targets.

Distances are squared Euclidean accumulated in float64. Nearest-centroid
search uses the BLAS expansion ``|x|^2 - 2 x.c + |c|^2`` as a filter and
re-scores every centroid within rounding distance of the minimum exactly, so
ties resolve to the lowest index just as a naive scan would.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import seeding

log = logging.getLogger(__name__)

MINIBATCH_K_THRESHOLD = 5000
K_SWEEP = (100, 500, 2500, 5000, 10000, 25000)


@dataclass(frozen=True)
class KmeansConfig:
    k: int = 100
    init: str = "kmeanspp"
    max_iters: int = 20
    tol: float = 1e-4
    batch: str = "full"
    batch_size: int = 10000
    seed: int = 0
    standardize: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")
        if self.init not in ("kmeanspp", "random"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.batch not in ("full", "minibatch"):
            raise ValueError(f"unknown batch mode {self.batch!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def uses_minibatch(self) -> bool:
        # mini-batch is mandatory at large k
        return self.batch == "minibatch" or self.k >= MINIBATCH_K_THRESHOLD


@dataclass
class Codebook:
    centroids: np.ndarray
    source: dict = field(default_factory=dict)
    inertia: float = float("nan")
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None
    history: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dims(self) -> int:
        return self.centroids.shape[1]

    def transform(self, points: np.ndarray) -> np.ndarray:
        if self.mean is None:
            return points
        return (points - self.mean) / self.scale


class DistanceCounter:
    """Counts point-to-centroid distance evaluations."""

    def __init__(self):
        self.count = 0


def _as_points(points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"points must be n x d, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("points contain non-finite values")
    return x


def nearest(points, centroids, counter: DistanceCounter | None = None, chunk: int | None = None):
    """Index of, and squared distance to, the nearest centroid; lowest index wins ties."""
    x = _as_points(points)
    c = np.asarray(centroids, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != x.shape[1]:
        raise ValueError(f"dimension mismatch: points {x.shape} vs centroids {c.shape}")
    if counter is not None:
        counter.count += x.shape[0] * c.shape[0]
    n = x.shape[0]
    if chunk is None:
        chunk = max(1, min(4096, (1 << 22) // max(1, c.shape[0])))
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n)
    cc = (c * c).sum(1)
    cmax = cc.max() if len(cc) else 0.0
    for s in range(0, n, chunk):
        xb = x[s:s + chunk]
        xx = (xb * xb).sum(1)
        d = xx[:, None] - 2.0 * (xb @ c.T) + cc[None, :]
        best = d.min(axis=1)
        slack = 1e-9 * (xx + cmax) + 1e-300
        cand = d <= (best + slack)[:, None]
        first = cand.argmax(axis=1)
        multi = cand.sum(axis=1) > 1
        ib = first.copy()
        for r in np.flatnonzero(multi):
            cols = np.flatnonzero(cand[r])
            exact = ((xb[r] - c[cols]) ** 2).sum(1)
            ib[r] = cols[np.argmin(exact)]
        idx[s:s + chunk] = ib
        dist[s:s + chunk] = ((xb - c[ib]) ** 2).sum(1)
    return idx, dist


def assign(points, codebook: Codebook | np.ndarray, counter: DistanceCounter | None = None) -> np.ndarray:
    if isinstance(codebook, Codebook):
        return nearest(codebook.transform(_as_points(points)), codebook.centroids, counter)[0]
    return nearest(points, codebook, counter)[0]


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than k: pad with unused points
            rest = np.setdiff1d(np.arange(n), chosen)
            chosen.append(int(rest[0]))
            continue
        r = rng.random() * total
        j = int(np.searchsorted(np.cumsum(d2), r, side="right"))
        j = min(j, n - 1)
        chosen.append(j)
        d2 = np.minimum(d2, ((x - x[j]) ** 2).sum(1))
    return x[chosen].copy()


def _init(x, cfg: KmeansConfig, rng) -> np.ndarray:
    if cfg.init == "random":
        return x[rng.choice(x.shape[0], size=cfg.k, replace=False)].copy()
    return _kmeanspp(x, cfg.k, rng)


def _cluster_sums(x, labels, k) -> np.ndarray:
    n = x.shape[0]
    onehot = sparse.csr_matrix((np.ones(n), (labels, np.arange(n))), shape=(k, n))
    return np.asarray(onehot @ x)


def _repair_empty(x, centroids, labels, dist) -> bool:
    """Move each empty centroid onto the point farthest from its own centroid."""
    counts = np.bincount(labels, minlength=len(centroids))
    empty = np.flatnonzero(counts == 0)
    if not len(empty):
        return False
    dist = dist.copy()
    for j in empty:
        far = int(np.argmax(dist))  # lowest index among equal maxima
        centroids[j] = x[far]
        dist[far] = -1.0
    return True


def _lloyd(x, cfg: KmeansConfig, rng) -> tuple[np.ndarray, float, list]:
    c = _init(x, cfg, rng)
    labels, dist = nearest(x, c)
    inertia = float(dist.sum())
    history = [inertia]
    for it in range(cfg.max_iters):
        sums = _cluster_sums(x, labels, cfg.k)
        counts = np.bincount(labels, minlength=cfg.k)
        nonempty = counts > 0
        c[nonempty] = sums[nonempty] / counts[nonempty, None]
        _repair_empty(x, c, labels, dist)
        labels, dist = nearest(x, c)
        new = float(dist.sum())
        history.append(new)
        improvement = inertia - new
        inertia = new
        if inertia == 0.0 or improvement <= cfg.tol * max(abs(history[-2]), 1e-300):
            break
    return c, inertia, history


def _minibatch(x, cfg: KmeansConfig, rng) -> tuple[np.ndarray, float, list]:
    """Sculley-style mini-batch updates with per-centroid learning rates 1/count."""
    n = x.shape[0]
    c = _init(x, cfg, rng)
    counts = np.zeros(cfg.k)
    history = []
    steps = cfg.max_iters * max(1, n // cfg.batch_size)
    for _ in range(steps):
        batch = x[rng.choice(n, size=min(cfg.batch_size, n), replace=False)]
        lab, _ = nearest(batch, c)
        bc = np.bincount(lab, minlength=cfg.k)
        sums = _cluster_sums(batch, lab, cfg.k)
        hit = bc > 0
        counts[hit] += bc[hit]
        eta = bc[hit] / counts[hit]
        c[hit] = (1.0 - eta)[:, None] * c[hit] + eta[:, None] * (sums[hit] / bc[hit, None])
    labels, dist = nearest(x, c)
    if _repair_empty(x, c, labels, dist):
        labels, dist = nearest(x, c)
    inertia = float(dist.sum())
    history.append(inertia)
    return c, inertia, history


def fit(points, cfg: KmeansConfig = KmeansConfig(), source: dict | None = None, restarts: int = 1) -> Codebook:
    x = _as_points(points)
    n, d = x.shape
    if d < 1:
        raise ValueError("points need at least one dimension")
    if n < cfg.k:
        raise ValueError(f"need at least k={cfg.k} points, got {n}")
    mean = scale = None
    if cfg.standardize:
        mean = x.mean(0)
        scale = x.std(0)
        scale[scale == 0] = 1.0
        x = (x - mean) / scale
    best = None
    for r in range(restarts):
        rng = seeding.rng_for(cfg.seed, seeding.KMEANS, r)
        run = _minibatch(x, cfg, rng) if cfg.uses_minibatch else _lloyd(x, cfg, rng)
        if best is None or run[1] < best[1]:
            best = run
    c, inertia, history = best
    log.debug("kmeans k=%d n=%d inertia=%.6g iters=%d", cfg.k, n, inertia, len(history) - 1)
    return Codebook(c, dict(source or {}), inertia, mean, scale, history)


def targets_for_corpus(features, codebook: Codebook) -> list[np.ndarray]:
    """Per-utterance cluster IDs for a list of FeatureSequence (or arrays)."""
    out = []
    for f in features:
        data = getattr(f, "data", f)
        if data.shape[1] != codebook.dims:
            raise ValueError(f"feature dims {data.shape[1]} != codebook dims {codebook.dims}")
        out.append(assign(data, codebook))
    return out
