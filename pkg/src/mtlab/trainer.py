"""Masked-prediction training loops for the encoder.

Utterances are batched only with others of the same frame count, so no
padding or attention masking is needed. Batch order is a seeded shuffle per
epoch; masks come from a per-(epoch, batch) stream. Everything is
reproducible bit-for-bit from ``TrainConfig.seed``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import seeding
from .dsp import DspConfig, FeatureSequence, frame_signal, log_mel
from .encoder import EncoderModel, _length_groups, sample_mask
from .heads import HeadStack, masked_loss, predict
from .tensorcore import Adam, Linear, Module, backward, l1_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 8
    lr: float = 2e-3
    warmup_frac: float = 0.1
    grad_clip: float = 5.0
    seed: int = 0
    unmasked_weight: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def model_inputs(utterances, dsp_cfg: DspConfig = DspConfig(), front_end="logmel", clean=False) -> list[FeatureSequence]:
    """Encoder input frames: log-Mel features, or raw waveform frames for the conv front-end."""
    out = []
    for u in utterances:
        x = u.clean_samples if clean and u.clean_samples is not None else u.samples
        if front_end == "conv":
            out.append(FeatureSequence(frame_signal(x, dsp_cfg), dsp_cfg.frame_rate, "frames"))
        else:
            out.append(log_mel(x, dsp_cfg))
    return out


def _batches(lengths, batch_size, rng):
    batches = []
    for _, idx in sorted(_length_groups(lengths).items()):
        idx = np.array(idx)[rng.permutation(len(idx))]
        batches.extend(idx[s:s + batch_size] for s in range(0, len(idx), batch_size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def _lr_at(step, total, cfg: TrainConfig):
    warm = max(1, int(cfg.warmup_frac * total))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    return cfg.lr * max(0.0, (total - step) / max(1, total - warm))


def _clip(params, max_norm):
    if max_norm <= 0:
        return
    sq = sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None)
    norm = np.sqrt(sq)
    if norm > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / norm)


def _draw_masks(model, n_utts, n_frames, rng):
    while True:
        m = np.stack([sample_mask(n_frames, model.cfg.mask_prob, model.cfg.mask_span, rng).masked
                      for _ in range(n_utts)])
        if m.any():
            return m


def _loop(model: EncoderModel, modules: list[Module], inputs, batch_loss, cfg: TrainConfig):
    datas = [np.asarray(getattr(f, "data", f)) for f in inputs]
    params = model.parameters() + [p for m in modules for p in m.parameters()]
    opt = Adam(params, lr=cfg.lr)
    lengths = [len(d) for d in datas]
    n_batches = len(_batches(lengths, cfg.batch_size, seeding.rng_for(cfg.seed, seeding.SHUFFLE, 0)))
    total = cfg.epochs * n_batches
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        rng = seeding.rng_for(cfg.seed, seeding.SHUFFLE, epoch)
        losses = []
        for bi, idx in enumerate(_batches(lengths, cfg.batch_size, rng)):
            mrng = seeding.rng_for(cfg.seed, seeding.MASKING, epoch, bi)
            x = np.stack([datas[i] for i in idx])
            masks = _draw_masks(model, len(idx), x.shape[1], mrng)
            drop_rng = mrng if model.cfg.dropout > 0 else None
            hiddens = model.forward(x, masks, drop_rng)
            loss = batch_loss(idx, hiddens, masks)
            opt.zero_grad()
            backward(loss)
            _clip(params, cfg.grad_clip)
            opt.step(lr=_lr_at(step, total, cfg))
            losses.append(float(loss.item()))
            step += 1
        history.append(float(np.mean(losses)) if losses else float("nan"))
        log.info("epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, history[-1])
    return history


def train_masked_prediction(model: EncoderModel, stack: HeadStack, inputs, stream_ids, cfg: TrainConfig,
                            stream_weights=None) -> list[float]:
    """Cluster-ID prediction on masked frames. ``stream_ids[s][u]`` are the IDs of stream s for utterance u."""
    if len(stream_ids) != stack.n_streams:
        raise ValueError(f"{len(stream_ids)} target streams for {stack.n_streams} heads")
    for s, per_utt in enumerate(stream_ids):
        for u, f in enumerate(inputs):
            if len(per_utt[u]) != len(getattr(f, "data", f)):
                raise ValueError(f"stream {s} utterance {u}: targets not frame-aligned")

    def batch_loss(idx, hiddens, masks):
        truth = [np.stack([stream_ids[s][i] for i in idx]) for s in range(stack.n_streams)]
        logits = predict(stack, model.final_hidden(hiddens), truth)
        return masked_loss(logits, truth, masks, stream_weights, cfg.unmasked_weight)

    return _loop(model, [stack], inputs, batch_loss, cfg)


class MelRegressionHead(Module):
    def __init__(self, d_model, n_out, seed=0, dtype="float32"):
        self.out = Linear(d_model, n_out, seeding.rng_for(seed, seeding.HEADS_INIT), dtype=dtype)

    def forward(self, h):
        return self.out(h)


def train_mel_predictor(model: EncoderModel, inputs, logmel_targets, cfg: TrainConfig) -> tuple[MelRegressionHead, list[float]]:
    """L1 regression of (standardised) log-Mel frames at masked positions."""
    targets = [np.asarray(getattr(t, "data", t)) for t in logmel_targets]
    cat = np.concatenate(targets)
    mu, sd = cat.mean(0), np.where(cat.std(0) > 1e-8, cat.std(0), 1.0)
    targets = [((t - mu) / sd).astype(model.cfg.dtype) for t in targets]
    head = MelRegressionHead(model.cfg.d_model, cat.shape[1], cfg.seed, model.cfg.dtype)

    def batch_loss(idx, hiddens, masks):
        pred = head(model.final_hidden(hiddens))
        tgt = np.stack([targets[i] for i in idx])
        b, t, d = pred.shape
        unmasked = ~masks.reshape(-1)
        loss = l1_loss(pred.reshape(b * t, d), tgt.reshape(b * t, d), weights=masks.reshape(-1))
        if cfg.unmasked_weight > 0 and unmasked.any():
            loss = loss + l1_loss(pred.reshape(b * t, d), tgt.reshape(b * t, d), weights=unmasked) * cfg.unmasked_weight
        return loss

    return head, _loop(model, [head], inputs, batch_loss, cfg)
