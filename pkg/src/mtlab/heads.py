"""Prediction heads over the final encoder state and the masked loss.

``single``/``flat``: one linear head per target stream.
``conditional``: streams are ordered highest layer first; the head for stream
``s`` reads ``final_hidden + sum(embed_h[truth_h])`` over all higher streams
``h``, using teacher-forced ground-truth IDs. The lowest stream never
conditions anything, so it has no table.
"""
from __future__ import annotations

import numpy as np

from . import seeding
from .tensorcore import Embedding, Linear, Module, Tensor, cross_entropy_loss

MODES = ("single", "flat", "conditional")


class HeadStack(Module):
    def __init__(self, mode: str, d_model: int, vocab_sizes, seed=0, dtype="float32"):
        if mode not in MODES:
            raise ValueError(f"unknown head mode {mode!r}")
        vocab_sizes = [int(v) for v in vocab_sizes]
        if not vocab_sizes:
            raise ValueError("need at least one stream")
        if mode == "single" and len(vocab_sizes) != 1:
            raise ValueError("single mode takes exactly one stream")
        rng = seeding.rng_for(seed, seeding.HEADS_INIT)
        self.mode = mode
        self.vocab_sizes = vocab_sizes
        self.heads = [Linear(d_model, v, rng, dtype=dtype) for v in vocab_sizes]
        self.embeds = []
        if mode == "conditional":
            self.embeds = [Embedding(v, d_model, rng, dtype=dtype) for v in vocab_sizes[:-1]]

    @property
    def n_streams(self) -> int:
        return len(self.heads)


def predict(stack: HeadStack, final_hidden: Tensor, truth=None) -> list[Tensor]:
    """Per-stream logits. ``truth`` holds frame-aligned ground-truth IDs per stream (conditional only)."""
    if stack.mode != "conditional":
        return [head(final_hidden) for head in stack.heads]
    if truth is None or len(truth) != stack.n_streams:
        raise ValueError("conditional heads need ground-truth IDs for every stream")
    lead = final_hidden.shape[:-1]
    ids = []
    for s, t in enumerate(truth):
        t = np.asarray(t)
        if t.shape != lead:
            raise ValueError(f"stream {s}: ground-truth shape {t.shape} != frames {lead}")
        ids.append(t)
    logits = []
    cond = None
    for s, head in enumerate(stack.heads):
        inp = final_hidden if cond is None else final_hidden + cond
        logits.append(head(inp))
        if s < len(stack.embeds):
            e = stack.embeds[s](ids[s])
            cond = e if cond is None else cond + e
    return logits


def masked_loss(logits: list[Tensor], targets, mask, stream_weights=None, unmasked_weight=0.0) -> Tensor:
    """Cross-entropy over masked frames per stream, then a weighted mean over streams."""
    if len(logits) != len(targets):
        raise ValueError(f"{len(logits)} logit streams but {len(targets)} target streams")
    m = np.asarray(getattr(mask, "masked", mask), dtype=bool).reshape(-1)
    if not m.any():
        raise ValueError("no masked frames: resample the mask")
    w = np.ones(len(logits)) if stream_weights is None else np.asarray(stream_weights, dtype=np.float64)
    if len(w) != len(logits) or (w < 0).any() or w.sum() <= 0:
        raise ValueError("stream weights must be non-negative, one per stream, not all zero")
    total = None
    for lg, tg, ws in zip(logits, targets, w):
        if ws == 0:
            continue
        flat = lg.reshape(-1, lg.shape[-1])
        tg = np.asarray(tg).reshape(-1)
        if len(tg) != len(m):
            raise ValueError(f"targets cover {len(tg)} frames, mask covers {len(m)}")
        term = cross_entropy_loss(flat, tg, weights=m)
        if unmasked_weight > 0 and (~m).any():
            term = term + cross_entropy_loss(flat, tg, weights=~m) * unmasked_weight
        term = term * float(ws / w.sum())
        total = term if total is None else total + term
    return total
