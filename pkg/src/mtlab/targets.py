"""Prediction-target construction for every strategy in the lab.

A ``TargetBundle`` is an ordered set of frame-aligned integer streams. Layer
bundles are ordered highest layer first (the conditioning order of
``heads``); RVQ bundles are ordered by ascending quantizer level, level 1
being the pinned k-means stream.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kmeans
from .dsp import DspConfig, FeatureSequence, mfcc_from_logmel
from .encoder import EncoderConfig, EncoderModel, extract_all_layers
from .trainer import TrainConfig, model_inputs, train_mel_predictor

STRATEGIES = ("mfcc_clusters", "melpredictor_clusters", "random_model_clusters")


@dataclass
class TargetStream:
    name: str
    ids: list
    vocab_size: int
    layer_or_level: int
    source: dict = field(default_factory=dict)


@dataclass
class TargetBundle:
    streams: list
    utterance_ids: list = field(default_factory=list)
    ordering: str = "layer_desc"
    codebooks: list = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.streams:
            return
        n_utt = len(self.streams[0].ids)
        lengths = [len(x) for x in self.streams[0].ids]
        for s in self.streams:
            if len(s.ids) != n_utt or [len(x) for x in s.ids] != lengths:
                raise ValueError(f"stream {s.name} is not frame-aligned with {self.streams[0].name}")
            for x in s.ids:
                if len(x) and (x.min() < 0 or x.max() >= s.vocab_size):
                    raise ValueError(f"stream {s.name}: id outside [0, {s.vocab_size})")
        if self.utterance_ids and len(self.utterance_ids) != n_utt:
            raise ValueError("utterance_ids length differs from stream length")
        keys = [s.layer_or_level for s in self.streams]
        if self.ordering == "layer_desc" and keys != sorted(keys, reverse=True):
            raise ValueError("layer streams must be ordered highest layer first")
        if self.ordering == "level_asc" and keys != sorted(keys):
            raise ValueError("RVQ streams must be ordered by ascending level")

    @property
    def n_streams(self) -> int:
        return len(self.streams)

    @property
    def vocab_sizes(self) -> list[int]:
        return [s.vocab_size for s in self.streams]

    def stream_ids(self) -> list[list[np.ndarray]]:
        return [s.ids for s in self.streams]


@dataclass(frozen=True)
class InitialTargetStrategy:
    kind: str = "mfcc_clusters"
    k: int = 100
    tap_layer: int | None = None

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown initial strategy {self.kind!r}")
        if self.k < 2:
            raise ValueError("initial strategies need k >= 2")

    def resolved_tap(self, n_layers: int) -> int:
        return self.tap_layer if self.tap_layer is not None else math.ceil(n_layers / 2)


def _fit_stream(features, cfg: kmeans.KmeansConfig, name, key, source) -> tuple[TargetStream, kmeans.Codebook]:
    data = [getattr(f, "data", f) for f in features]
    cb = kmeans.fit(np.concatenate(data), cfg, source=source)
    ids = kmeans.targets_for_corpus(data, cb)
    return TargetStream(name, ids, cfg.k, key, dict(source)), cb


def initial_targets(corpus, strategy: InitialTargetStrategy, dsp_cfg: DspConfig = DspConfig(),
                    enc_cfg: EncoderConfig | None = None, train_cfg: TrainConfig = TrainConfig(),
                    kmeans_cfg: kmeans.KmeansConfig | None = None, inputs=None):
    """Iteration-1 targets. Returns ``(bundle, codebook)``.

    ``inputs`` may carry precomputed log-Mel features for ``corpus``.
    """
    kcfg = kmeans_cfg or kmeans.KmeansConfig(k=strategy.k)
    if kcfg.k != strategy.k:
        kcfg = kmeans.KmeansConfig(**{**kcfg.__dict__, "k": strategy.k})
    logmel = inputs if inputs is not None else model_inputs(corpus, dsp_cfg)
    uids = [u.id for u in corpus]
    if strategy.kind == "mfcc_clusters":
        feats = [FeatureSequence(mfcc_from_logmel(f.data, dsp_cfg), f.frame_rate, "mfcc") for f in logmel]
        stream, cb = _fit_stream(feats, kcfg, "mfcc", 0,
                                 {"feature": "mfcc", "layer": -1, "iteration": 0})
        return TargetBundle([stream], uids, codebooks=[cb]), cb
    enc_cfg = enc_cfg or EncoderConfig(input_dims=logmel[0].dims)
    tap = strategy.resolved_tap(enc_cfg.n_layers)
    model = EncoderModel(enc_cfg)
    model.set_feature_stats(logmel)
    if strategy.kind == "melpredictor_clusters":
        train_mel_predictor(model, logmel, logmel, train_cfg)
        kind = "layer"
    else:
        kind = "random_layer"
    feats = extract_all_layers(model, logmel, [tap], kind=kind)[tap]
    stream, cb = _fit_stream(feats, kcfg, f"L{tap}", tap,
                             {"feature": kind, "layer": tap, "iteration": 0, "strategy": strategy.kind})
    return TargetBundle([stream], uids, codebooks=[cb]), cb


def layer_targets(model: EncoderModel, inputs, layer: int, k: int, kmeans_cfg: kmeans.KmeansConfig | None = None,
                  iteration: int = 0, utterance_ids=None):
    """Cluster one tap of ``model``. Returns ``(bundle, codebook)``."""
    bundle = multilayer_targets(model, inputs, [layer], k, kmeans_cfg, iteration, utterance_ids)
    return bundle, bundle.codebooks[0]


def multilayer_targets(model: EncoderModel, inputs, layers, k_per_layer, kmeans_cfg: kmeans.KmeansConfig | None = None,
                       iteration: int = 0, utterance_ids=None) -> TargetBundle:
    """One independently clustered stream per layer, highest layer first."""
    layers = [int(x) for x in layers]
    if not layers or any(b <= a for a, b in zip(layers, layers[1:])):
        raise ValueError(f"layers must be non-empty and strictly increasing, got {layers}")
    ks = [k_per_layer] * len(layers) if np.isscalar(k_per_layer) else list(k_per_layer)
    if len(ks) != len(layers):
        raise ValueError("need one k per layer")
    feats = extract_all_layers(model, inputs, layers)
    base = kmeans_cfg or kmeans.KmeansConfig()
    streams, cbs = [], []
    for layer, k in sorted(zip(layers, ks), reverse=True):
        cfg = kmeans.KmeansConfig(**{**base.__dict__, "k": int(k)})
        s, cb = _fit_stream(feats[layer], cfg, f"L{layer}", layer,
                            {"feature": "layer", "layer": layer, "iteration": iteration})
        streams.append(s)
        cbs.append(cb)
    uids = list(utterance_ids) if utterance_ids is not None else []
    return TargetBundle(streams, uids, codebooks=cbs)


def rvq_targets(rvq_model, logmel_inputs, kmeans_ids, levels: int, utterance_ids=None) -> TargetBundle:
    """k-means stream (level 1, pinned) followed by RVQ codes for levels 2..levels."""
    from .rvq import quantize_corpus

    if not 1 <= levels <= rvq_model.n_levels:
        raise ValueError(f"levels must be in 1..{rvq_model.n_levels}, got {levels}")
    ids1 = [np.asarray(x, dtype=np.int64) for x in kmeans_ids]
    streams = [TargetStream("rvq1", ids1, rvq_model.codebook_sizes[0], 1, {"feature": "kmeans", "level": 1})]
    if levels > 1:
        codes = quantize_corpus(rvq_model, logmel_inputs, ids1 if rvq_model.pinned else None)
        for lvl in range(2, levels + 1):
            streams.append(TargetStream(f"rvq{lvl}", [c[lvl - 1] for c in codes],
                                        rvq_model.codebook_sizes[lvl - 1], lvl, {"feature": "rvq", "level": lvl}))
    uids = list(utterance_ids) if utterance_ids is not None else []
    return TargetBundle(streams, uids, ordering="level_asc")
