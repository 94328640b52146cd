"""Masked-prediction transformer encoder.

Layer taps follow the convention that tap 0 is the transformer input: the
projected (and mask-substituted) frames, before positional encoding. Tap
``l`` for ``l >= 1`` is the residual stream after block ``l``. Blocks are
pre-norm (LayerNorm -> multi-head self-attention -> residual, LayerNorm ->
GELU feed-forward -> residual).

Input frames are standardised with corpus statistics held by the model
(``feature_mean``/``feature_std``), so checkpoints carry them.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import seeding
from .dsp import FeatureSequence
from .tensorcore import (
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Tensor,
    dropout,
    gelu,
    masked_fill_rows,
    softmax,
)

REFERENCE_N_LAYERS = 12


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 6
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    input_dims: int = 40
    mask_prob: float = 0.065
    mask_span: int = 10
    seed: int = 0
    positional: bool = True
    dropout: float = 0.0
    front_end: str = "logmel"
    dtype: str = "float32"

    def __post_init__(self):
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 < self.mask_prob < 1.0:
            raise ValueError("mask_prob must be in (0, 1)")
        if self.mask_span < 1:
            raise ValueError("mask_span must be >= 1")
        if self.front_end not in ("logmel", "conv"):
            raise ValueError(f"unknown front_end {self.front_end!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unknown dtype {self.dtype!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def reference_layer_to_local(ref_layer: int, n_layers: int) -> int:
    """Map a tap of a 12-layer model onto an ``n_layers`` model by relative depth.

    For 6 layers: 3,5,7,9,11 -> 1..5 and 6 -> 3.
    """
    return max(1, min(n_layers, (ref_layer * n_layers) // REFERENCE_N_LAYERS))


@dataclass
class MaskSpec:
    masked: np.ndarray
    starts: np.ndarray

    @property
    def n_masked(self) -> int:
        return int(self.masked.sum())


def sample_mask(n_frames: int, mask_prob: float, mask_span: int, rng: np.random.Generator) -> MaskSpec:
    """Each frame starts a span with probability ``mask_prob``; spans are clipped at the end."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    starts = rng.random(n_frames) < mask_prob
    c = np.concatenate([[0], np.cumsum(starts)])
    lo = np.maximum(np.arange(n_frames) - mask_span + 1, 0)
    masked = (c[np.arange(n_frames) + 1] - c[lo]) > 0
    return MaskSpec(masked, np.flatnonzero(starts))


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    pe = np.zeros((n, d))
    pe[:, 0:2 * (d // 2):2] = np.sin(angle)
    pe[:, 1:2 * (d // 2):2] = np.cos(angle)
    return pe


class Block(Module):
    def __init__(self, cfg: EncoderConfig, rng):
        d, dt = cfg.d_model, cfg.dtype
        out_std = 1.0 / np.sqrt(d) / np.sqrt(2.0 * cfg.n_layers)
        self.ln1 = LayerNorm(d, dtype=dt)
        self.q = Linear(d, d, rng, dtype=dt)
        self.k = Linear(d, d, rng, dtype=dt)
        self.v = Linear(d, d, rng, dtype=dt)
        self.o = Linear(d, d, rng, dtype=dt, std=out_std)
        self.ln2 = LayerNorm(d, dtype=dt)
        self.ff1 = Linear(d, cfg.d_ff, rng, dtype=dt)
        self.ff2 = Linear(cfg.d_ff, d, rng, dtype=dt, std=1.0 / np.sqrt(cfg.d_ff) / np.sqrt(2.0 * cfg.n_layers))
        self.n_heads = cfg.n_heads
        self.p_drop = cfg.dropout

    def forward(self, h: Tensor, drop_rng=None) -> Tensor:
        b, t, d = h.shape
        nh, dh = self.n_heads, d // self.n_heads
        a = self.ln1(h)

        def heads(x):
            return x.reshape(b, t, nh, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(self.q(a)), heads(self.k(a)), heads(self.v(a))
        scores = (q @ k.transpose(0, 1, 3, 2)) * h.dtype.type(1.0 / np.sqrt(dh))
        ctx = softmax(scores, axis=-1) @ v
        attn = self.o(ctx.transpose(0, 2, 1, 3).reshape(b, t, d))
        h = h + dropout(attn, self.p_drop, drop_rng)
        f = self.ff2(gelu(self.ff1(self.ln2(h))))
        return h + dropout(f, self.p_drop, drop_rng)


class EncoderModel(Module):
    def __init__(self, cfg: EncoderConfig):
        rng = seeding.rng_for(cfg.seed, seeding.ENCODER_INIT)
        dt = cfg.dtype
        self.cfg = cfg
        self.proj = Linear(cfg.input_dims, cfg.d_model, rng, dtype=dt)
        self.mask_emb = Parameter(rng.normal(0.0, 1.0, size=cfg.d_model), dt)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_layers)]
        self.final_ln = LayerNorm(cfg.d_model, dtype=dt)
        self.feature_mean = np.zeros(cfg.input_dims)
        self.feature_std = np.ones(cfg.input_dims)

    @property
    def n_layers(self) -> int:
        return self.cfg.n_layers

    def set_feature_stats(self, features) -> None:
        data = np.concatenate([getattr(f, "data", f) for f in features])
        self.feature_mean = data.mean(0)
        std = data.std(0)
        self.feature_std = np.where(std > 1e-8, std, 1.0)

    def normalize(self, data: np.ndarray) -> np.ndarray:
        return ((data - self.feature_mean) / self.feature_std).astype(self.cfg.dtype)

    def forward(self, features, mask=None, drop_rng=None) -> list[Tensor]:
        """Per-layer hidden states [taps 0..n_layers], each (B, T, d_model) or (T, d_model)."""
        return forward(self, features, mask, drop_rng)

    def final_hidden(self, hiddens: list[Tensor]) -> Tensor:
        return self.final_ln(hiddens[-1])


def forward(model: EncoderModel, features, mask=None, drop_rng=None) -> list[Tensor]:
    data = getattr(features, "data", features)
    data = np.asarray(data)
    squeeze = data.ndim == 2
    if squeeze:
        data = data[None]
    if data.shape[-1] != model.cfg.input_dims:
        raise ValueError(f"feature dims {data.shape[-1]} != encoder input_dims {model.cfg.input_dims}")
    b, t, _ = data.shape
    x = model.proj(Tensor(model.normalize(data)))
    if mask is not None:
        m = np.asarray(getattr(mask, "masked", mask), dtype=bool).reshape(b, t)
        if m.any():
            x = masked_fill_rows(x, m, model.mask_emb)
    hiddens = [x]
    h = x
    if model.cfg.positional:
        h = h + Tensor(sinusoidal_positions(t, model.cfg.d_model).astype(model.cfg.dtype))
    for blk in model.blocks:
        h = blk(h, drop_rng)
        hiddens.append(h)
    if squeeze:
        hiddens = [hh.reshape(t, model.cfg.d_model) for hh in hiddens]
    return hiddens


def _length_groups(lengths):
    groups: dict[int, list[int]] = {}
    for i, n in enumerate(lengths):
        groups.setdefault(n, []).append(i)
    return groups


def extract_layer_features(model: EncoderModel, features, layer: int, kind="layer", batch_size=16) -> list[FeatureSequence]:
    """Unmasked forward pass; returns tap ``layer`` per utterance."""
    if not 0 <= layer <= model.n_layers:
        raise ValueError(f"layer {layer} out of range 0..{model.n_layers}")
    return extract_all_layers(model, features, layers=[layer], kind=kind, batch_size=batch_size)[layer]


def extract_all_layers(model: EncoderModel, features, layers=None, kind="layer", batch_size=16):
    """{layer: [FeatureSequence per utterance]} from one unmasked pass per batch."""
    layers = list(range(model.n_layers + 1)) if layers is None else list(layers)
    for layer in layers:
        if not 0 <= layer <= model.n_layers:
            raise ValueError(f"layer {layer} out of range 0..{model.n_layers}")
    datas = [np.asarray(getattr(f, "data", f)) for f in features]
    rate = getattr(features[0], "frame_rate", 100.0) if features else 100.0
    out = {layer: [None] * len(datas) for layer in layers}
    for _, idx in sorted(_length_groups([len(d) for d in datas]).items()):
        for s in range(0, len(idx), batch_size):
            chunk = idx[s:s + batch_size]
            hs = forward(model, np.stack([datas[i] for i in chunk]))
            for layer in layers:
                arr = hs[layer].data
                for j, i in enumerate(chunk):
                    out[layer][i] = FeatureSequence(arr[j].astype(np.float64), rate, kind)
    return out
