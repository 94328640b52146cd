"""Residual vector quantizer VAE over log-Mel frames, with an optional pinned level 1.

Frame-wise MLP encoder/decoder; ``n_levels`` codebooks quantize successive
residuals. Codebooks are not gradient-trained: each is an exponential moving
average of the vectors assigned to its codes (counts Laplace-smoothed).
Encoder/decoder train on reconstruction MSE plus ``beta`` times the
commitment term, with a straight-through pass from quantized latent to
encoder.

Pinned mode replaces level-1 code *selection* by externally supplied cluster
IDs; the selected level-1 vectors are still EMA-updated from the encoder
outputs assigned to them, so they keep training for reconstruction.
"""
from __future__ import annotations

import logging
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import seeding
from .kmeans import DistanceCounter, nearest
from .tensorcore import Adam, Linear, Module, Tensor, backward, gelu, mse_loss, straight_through

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RvqConfig:
    d_in: int = 40
    d_z: int = 32
    hidden: int = 128
    n_levels: int = 4
    k1: int = 100
    k_r: int = 64
    beta: float = 0.25
    decay: float = 0.99
    pinned: bool = True
    seed: int = 0
    lr: float = 1e-3
    batch_size: int = 1024
    heldout_frac: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        if self.n_levels < 1:
            raise ValueError("n_levels must be >= 1")
        if min(self.k1, self.k_r, self.d_in, self.d_z, self.hidden) < 1:
            raise ValueError("sizes must be >= 1")
        if not 0.0 <= self.decay < 1.0:
            raise ValueError("decay must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class QuantizeResult:
    codes: np.ndarray           # levels x frames
    quantized: np.ndarray       # frames x d_z
    residual_norms: np.ndarray  # mean residual norm after each level


@dataclass
class RvqTrainLog:
    train_loss: list = field(default_factory=list)
    heldout_mse: list = field(default_factory=list)
    reseeded: list = field(default_factory=list)


class RvqModel(Module):
    def __init__(self, cfg: RvqConfig = RvqConfig()):
        rng = seeding.rng_for(cfg.seed, seeding.RVQ)
        dt = cfg.dtype
        self.cfg = cfg
        self.enc1 = Linear(cfg.d_in, cfg.hidden, rng, dtype=dt)
        self.enc2 = Linear(cfg.hidden, cfg.d_z, rng, dtype=dt)
        self.dec1 = Linear(cfg.d_z, cfg.hidden, rng, dtype=dt)
        self.dec2 = Linear(cfg.hidden, cfg.d_in, rng, dtype=dt)
        self.codebooks = [rng.normal(0.0, 0.1, size=(k, cfg.d_z)) for k in self.codebook_sizes]
        self.ema_count = [np.ones(k) for k in self.codebook_sizes]
        self.ema_sum = [cb.copy() for cb in self.codebooks]
        self.feature_mean = np.zeros(cfg.d_in)
        self.feature_std = np.ones(cfg.d_in)
        self.distance_counters = [DistanceCounter() for _ in self.codebook_sizes]

    @property
    def pinned(self) -> bool:
        return self.cfg.pinned

    @property
    def n_levels(self) -> int:
        return self.cfg.n_levels

    @property
    def codebook_sizes(self) -> list[int]:
        return [self.cfg.k1] + [self.cfg.k_r] * (self.cfg.n_levels - 1)

    def normalize(self, x):
        return ((np.asarray(x) - self.feature_mean) / self.feature_std).astype(self.cfg.dtype)

    def encode(self, x: Tensor) -> Tensor:
        return self.enc2(gelu(self.enc1(x)))

    def decode(self, z: Tensor) -> Tensor:
        return self.dec2(gelu(self.dec1(z)))

    def buffers(self) -> dict[str, np.ndarray]:
        out = {"feature_mean": self.feature_mean, "feature_std": self.feature_std}
        for i in range(self.n_levels):
            out[f"codebook.{i}"] = self.codebooks[i]
            out[f"ema_count.{i}"] = self.ema_count[i]
            out[f"ema_sum.{i}"] = self.ema_sum[i]
        return out

    def load_buffers(self, buf: dict[str, np.ndarray]) -> None:
        self.feature_mean = np.asarray(buf["feature_mean"], dtype=np.float64)
        self.feature_std = np.asarray(buf["feature_std"], dtype=np.float64)
        for i in range(self.n_levels):
            self.codebooks[i] = np.asarray(buf[f"codebook.{i}"], dtype=np.float64)
            self.ema_count[i] = np.asarray(buf[f"ema_count.{i}"], dtype=np.float64)
            self.ema_sum[i] = np.asarray(buf[f"ema_sum.{i}"], dtype=np.float64)


def _check_pins(model: RvqModel, pinned_ids, n):
    if model.pinned:
        if pinned_ids is None:
            raise ValueError("pinned model requires pinned_ids")
        ids = np.asarray(pinned_ids)
        if ids.shape != (n,):
            raise ValueError(f"pinned_ids length {ids.shape} != frames {n}")
        if ids.size and (ids.min() < 0 or ids.max() >= model.codebook_sizes[0]):
            raise ValueError(f"pinned id outside [0, {model.codebook_sizes[0]})")
        return ids.astype(np.int64)
    if pinned_ids is not None:
        raise ValueError("pinned_ids given to an unpinned model")
    return None


def quantize(model: RvqModel, z, pinned_ids=None, levels: int | None = None) -> QuantizeResult:
    """Greedy residual quantization; level 1 follows ``pinned_ids`` in pinned mode."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != model.cfg.d_z:
        raise ValueError(f"z must be frames x {model.cfg.d_z}, got {z.shape}")
    ids = _check_pins(model, pinned_ids, z.shape[0])
    levels = model.n_levels if levels is None else levels
    residual = z.copy()
    quantized = np.zeros_like(z)
    codes = np.zeros((levels, z.shape[0]), dtype=np.int64)
    norms = np.zeros(levels)
    for lvl in range(levels):
        cb = model.codebooks[lvl]
        if lvl == 0 and ids is not None:
            c = ids
        else:
            c = nearest(residual, cb, counter=model.distance_counters[lvl])[0]
        codes[lvl] = c
        quantized += cb[c]
        residual -= cb[c]
        norms[lvl] = float(np.linalg.norm(residual, axis=1).mean()) if len(residual) else 0.0
    return QuantizeResult(codes, quantized, norms)


def _level_inputs(model: RvqModel, z, codes):
    """The vector each level quantized: z for level 1, then successive residuals."""
    out, r = [], z.copy()
    for lvl in range(codes.shape[0]):
        out.append(r.copy())
        r -= model.codebooks[lvl][codes[lvl]]
    return out


def _ema_update(model: RvqModel, z, codes, usage):
    d = model.cfg.decay
    for lvl, x in enumerate(_level_inputs(model, z, codes)):
        k = model.codebook_sizes[lvl]
        cnt = np.bincount(codes[lvl], minlength=k).astype(np.float64)
        sums = np.zeros((k, z.shape[1]))
        np.add.at(sums, codes[lvl], x)
        usage[lvl] += cnt
        model.ema_count[lvl] = d * model.ema_count[lvl] + (1 - d) * cnt
        model.ema_sum[lvl] = d * model.ema_sum[lvl] + (1 - d) * sums
        n = model.ema_count[lvl].sum()
        smoothed = (model.ema_count[lvl] + 1e-5) / (n + k * 1e-5) * n
        model.codebooks[lvl] = model.ema_sum[lvl] / smoothed[:, None]


def _init_codebooks(model: RvqModel, z, pinned_ids, rng):
    """Data-driven start: per-cluster means (pinned level 1) or sampled residuals."""
    r = z.copy()
    for lvl, k in enumerate(model.codebook_sizes):
        if lvl == 0 and pinned_ids is not None:
            cb = r[rng.choice(len(r), size=k, replace=len(r) < k)].copy()
            cnt = np.bincount(pinned_ids, minlength=k)
            sums = np.zeros_like(cb)
            np.add.at(sums, pinned_ids, r)
            hit = cnt > 0
            cb[hit] = sums[hit] / cnt[hit, None]
            c = pinned_ids
        else:
            cb = r[rng.choice(len(r), size=k, replace=len(r) < k)].copy()
            c = nearest(r, cb)[0]
        model.codebooks[lvl] = cb
        model.ema_count[lvl] = np.ones(k)
        model.ema_sum[lvl] = cb.copy()
        r = r - cb[c]


def _reseed_dead(model: RvqModel, usage, residual_pool, rng) -> int:
    n = 0
    for lvl in range(model.n_levels):
        dead = np.flatnonzero(usage[lvl] == 0)
        if not len(dead):
            continue
        pool = residual_pool[lvl]
        pick = rng.choice(len(pool), size=len(dead), replace=len(pool) < len(dead))
        model.codebooks[lvl][dead] = pool[pick]
        model.ema_sum[lvl][dead] = pool[pick]
        model.ema_count[lvl][dead] = 1.0
        n += len(dead)
    return n


def heldout_split(utterance_ids) -> np.ndarray:
    """True for utterances held out from RVQ training (crc32(id) % 10 == 0)."""
    return np.array([zlib.crc32(str(u).encode()) % 10 == 0 for u in utterance_ids], dtype=bool)


def _flatten(inputs, ids):
    frames = np.concatenate([np.asarray(getattr(f, "data", f)) for f in inputs])
    flat_ids = None if ids is None else np.concatenate([np.asarray(i, dtype=np.int64) for i in ids])
    if flat_ids is not None and len(flat_ids) != len(frames):
        raise ValueError("kmeans_ids are not frame-aligned with the inputs")
    return frames, flat_ids


def reconstruction_mse(model: RvqModel, frames, pinned_ids=None, levels=None) -> float:
    """MSE in standardised feature space, decoding the sum of the first ``levels`` codes."""
    x = model.normalize(frames)
    z = model.encode(Tensor(x)).data.astype(np.float64)
    q = quantize(model, z, pinned_ids, levels).quantized
    xr = model.decode(Tensor(q.astype(model.cfg.dtype))).data
    return float(np.mean((xr.astype(np.float64) - x) ** 2))


def train(model: RvqModel, inputs, kmeans_ids=None, epochs: int = 10, utterance_ids=None) -> RvqTrainLog:
    """Train in place. ``inputs`` are per-utterance log-Mel frames; ``kmeans_ids`` pin level 1."""
    cfg = model.cfg
    if model.pinned != (kmeans_ids is not None):
        raise ValueError("kmeans_ids must be given exactly when the model is pinned")
    hist = RvqTrainLog()
    if epochs <= 0:
        return hist
    uids = list(utterance_ids) if utterance_ids is not None else [str(i) for i in range(len(inputs))]
    held = heldout_split(uids) if len(inputs) > 1 and cfg.heldout_frac > 0 else np.zeros(len(inputs), bool)
    if held.all():
        held[:] = False
    tr = [i for i in range(len(inputs)) if not held[i]]
    ho = [i for i in range(len(inputs)) if held[i]]
    x_tr, id_tr = _flatten([inputs[i] for i in tr], None if kmeans_ids is None else [kmeans_ids[i] for i in tr])
    x_ho, id_ho = (_flatten([inputs[i] for i in ho], None if kmeans_ids is None else [kmeans_ids[i] for i in ho])
                   if ho else (None, None))
    model.feature_mean = x_tr.mean(0)
    sd = x_tr.std(0)
    model.feature_std = np.where(sd > 1e-8, sd, 1.0)
    xn = model.normalize(x_tr)
    rng = seeding.rng_for(cfg.seed, seeding.RVQ, "train")
    _init_codebooks(model, model.encode(Tensor(xn)).data.astype(np.float64), id_tr, rng)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    n = len(xn)
    for epoch in range(epochs):
        order = rng.permutation(n)
        usage = [np.zeros(k) for k in model.codebook_sizes]
        pool = [[] for _ in model.codebook_sizes]
        losses = []
        for s in range(0, n, cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            x = Tensor(xn[b])
            z = model.encode(x)
            pins = id_tr[b] if id_tr is not None else None
            qr = quantize(model, z.data.astype(np.float64), pins)
            qt = Tensor(qr.quantized.astype(cfg.dtype))
            recon = model.decode(straight_through(z, qt))
            loss = mse_loss(recon, x.data) + mse_loss(z, qt.data) * cfg.beta
            opt.zero_grad()
            backward(loss)
            opt.step()
            zd = z.data.astype(np.float64)
            for lvl, li in enumerate(_level_inputs(model, zd, qr.codes)):
                pool[lvl].append(li[:64])
            _ema_update(model, zd, qr.codes, usage)
            losses.append(float(loss.item()))
        reseeded = _reseed_dead(model, usage, [np.concatenate(p) for p in pool], rng)
        hist.train_loss.append(float(np.mean(losses)))
        hist.reseeded.append(reseeded)
        if x_ho is not None:
            hist.heldout_mse.append(reconstruction_mse(model, x_ho, id_ho))
        log.info("rvq epoch %d/%d loss %.5f", epoch + 1, epochs, hist.train_loss[-1])
    return hist


def quantize_corpus(model: RvqModel, inputs, kmeans_ids=None) -> list[np.ndarray]:
    """Per-utterance codes, levels x frames."""
    out = []
    for i, f in enumerate(inputs):
        x = model.normalize(np.asarray(getattr(f, "data", f)))
        z = model.encode(Tensor(x)).data.astype(np.float64)
        pins = None if kmeans_ids is None else np.asarray(kmeans_ids[i], dtype=np.int64)
        out.append(quantize(model, z, pins).codes)
    return out
