"""Weighted-layer-sum probes on a frozen encoder.

Three proxy tasks:

* ``phone_frame_cls``: per-frame phone classification, metric frame accuracy.
* ``speaker_utt_cls``: speaker classification of the mean-pooled utterance,
  metric utterance accuracy.
* ``denoise_regression``: predict clean log-Mel from the representation of
  noisy input; metric is the relative MSE improvement over the noisy input,
  ``1 - mse(pred, clean) / mse(noisy, clean)``, so the identity predictor
  scores exactly 0.

Each tap is standardised per dimension (statistics from the probe's training
split) before the softmax-weighted sum, so the learned weights compare layers
rather than their scales. Utterances go to the eval split when
``crc32(id) % 5 == 0`` (about 20%).
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .dsp import DspConfig, log_mel
from .encoder import EncoderModel, _length_groups, forward
from .formats import Report
from .trainer import model_inputs
from .tensorcore import (Adam, Linear, Module, Parameter, Tensor, backward, cross_entropy_loss, gelu,
                         mse_loss, softmax)

TASKS = ("phone_frame_cls", "speaker_utt_cls", "denoise_regression")
METRICS = {"phone_frame_cls": "accuracy", "speaker_utt_cls": "accuracy", "denoise_regression": "mse_improvement"}


class ProbeError(ValueError):
    pass


@dataclass
class LayerWeights:
    raw: np.ndarray

    @property
    def normalized(self) -> np.ndarray:
        r = np.asarray(self.raw, dtype=np.float64)
        e = np.exp(r - r.max())
        return e / e.sum()

    @property
    def n_layers(self) -> int:
        return len(self.raw) - 1


@dataclass(frozen=True)
class ProbeTask:
    kind: str
    epochs: int = 20
    lr: float = 5e-3
    batch_size: int = 512
    hidden: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"unknown probe task {self.kind!r}")

    @property
    def metric(self) -> str:
        return METRICS[self.kind]


class ProbeHead(Module):
    """Trainable part of a probe: raw layer weights plus the task head."""

    def __init__(self, task: ProbeTask, n_taps: int, d_model: int, n_out: int, dtype="float32"):
        rng = seeding.rng_for(task.seed, seeding.PROBE, task.kind)
        self.kind = task.kind
        self.raw = Parameter(np.zeros((1, n_taps)), dtype)
        if task.kind == "denoise_regression":
            self.fc1 = Linear(d_model, task.hidden, rng, dtype=dtype)
            self.fc2 = Linear(task.hidden, n_out, rng, dtype=dtype)
        else:
            self.fc1 = Linear(d_model, n_out, rng, dtype=dtype)
            self.fc2 = None
        self.tap_mean = np.zeros((n_taps, d_model))
        self.tap_std = np.ones((n_taps, d_model))
        self.target_mean = np.zeros(n_out)
        self.target_std = np.ones(n_out)

    def weighted(self, taps: np.ndarray) -> Tensor:
        """taps: n_taps x N x d, already standardised."""
        n_taps, n, d = taps.shape
        w = softmax(self.raw, axis=-1)
        return (w @ Tensor(taps.reshape(n_taps, n * d))).reshape(n, d)

    def forward(self, taps: np.ndarray) -> Tensor:
        h = self.weighted(taps)
        if self.fc2 is None:
            return self.fc1(h)
        return self.fc2(gelu(self.fc1(h)))


@dataclass
class ProbeResult:
    weights: LayerWeights
    head: ProbeHead
    history: list = field(default_factory=list)


def is_eval_utterance(utt_id: str) -> bool:
    return zlib.crc32(str(utt_id).encode()) % 5 == 0


def split_corpus(corpus):
    """(train, eval) by the stable utterance-id hash."""
    tr = [u for u in corpus if not is_eval_utterance(u.id)]
    ev = [u for u in corpus if is_eval_utterance(u.id)]
    return tr, ev


def _check_labels(corpus, kind):
    if not corpus:
        raise ProbeError(f"{kind}: empty split")
    for u in corpus:
        if kind == "phone_frame_cls" and u.phone_labels is None:
            raise ProbeError(f"{kind} requires phone_labels; utterance {u.id} has none")
        if kind == "speaker_utt_cls" and u.speaker_id is None:
            raise ProbeError(f"{kind} requires speaker_id; utterance {u.id} has none")
        if kind == "denoise_regression" and u.clean_samples is None:
            raise ProbeError(f"{kind} requires clean_samples; utterance {u.id} has none")


def _taps(model: EncoderModel, inputs, batch_size=16) -> list[np.ndarray]:
    """Per utterance: n_taps x T x d float32, from one unmasked pass."""
    out = [None] * len(inputs)
    for _, idx in sorted(_length_groups([len(x) for x in inputs]).items()):
        for s in range(0, len(idx), batch_size):
            chunk = idx[s:s + batch_size]
            hs = forward(model, np.stack([inputs[i] for i in chunk]))
            stack = np.stack([h.data for h in hs]).astype(np.float32)
            for j, i in enumerate(chunk):
                out[i] = stack[:, j]
    return out


def _prepare(model, corpus, kind, dsp_cfg):
    """(taps per utterance, labels or clean targets, noisy log-Mel or None)."""
    _check_labels(corpus, kind)
    feats = [f.data for f in model_inputs(corpus, dsp_cfg, model.cfg.front_end)]
    taps = _taps(model, feats)
    if kind == "phone_frame_cls":
        ys = []
        for u, t in zip(corpus, taps):
            lab = np.asarray(u.phone_labels, dtype=np.int64)
            if len(lab) != t.shape[1]:
                raise ProbeError(f"{u.id}: {len(lab)} phone labels for {t.shape[1]} frames")
            ys.append(lab)
        return taps, ys, None
    if kind == "speaker_utt_cls":
        return taps, [int(u.speaker_id) for u in corpus], None
    clean = [log_mel(u.clean_samples, dsp_cfg).data for u in corpus]
    noisy = [log_mel(u.samples, dsp_cfg).data for u in corpus]
    return taps, clean, noisy


def _standardise(head: ProbeHead, taps):
    return [((t - head.tap_mean[:, None, :]) / head.tap_std[:, None, :]).astype(np.float32) for t in taps]


def _design(head: ProbeHead, kind, taps, targets):
    """Stacked taps (n_taps x N x d) and row targets for the task."""
    z = _standardise(head, taps)
    if kind == "speaker_utt_cls":
        return np.stack([t.mean(axis=1) for t in z], axis=1), np.asarray(targets, dtype=np.int64)
    x = np.concatenate(z, axis=1)
    y = np.concatenate(targets)
    return x, y


def _n_out(kind, corpus, targets):
    if kind == "phone_frame_cls":
        return int(max(int(t.max()) for t in targets)) + 1
    if kind == "speaker_utt_cls":
        return int(max(targets)) + 1
    return targets[0].shape[1]


def probe_train(frozen_model: EncoderModel, corpus, task: ProbeTask, epochs: int | None = None,
                dsp_cfg: DspConfig = DspConfig(), n_classes: int | None = None) -> ProbeResult:
    """Train layer weights and head on ``corpus`` (pass the training split). Upstream is never touched."""
    epochs = task.epochs if epochs is None else epochs
    taps, targets, _ = _prepare(frozen_model, corpus, task.kind, dsp_cfg)
    n_taps, _, d = taps[0].shape
    n_out = n_classes or _n_out(task.kind, corpus, targets)
    head = ProbeHead(task, n_taps, d, n_out)
    cat = np.concatenate(taps, axis=1).astype(np.float64)
    head.tap_mean = cat.mean(axis=1)
    sd = cat.std(axis=1)
    head.tap_std = np.where(sd > 1e-8, sd, 1.0)
    del cat
    x, y = _design(head, task.kind, taps, targets)
    if task.kind == "denoise_regression":
        head.target_mean = y.mean(0)
        sd = y.std(0)
        head.target_std = np.where(sd > 1e-8, sd, 1.0)
        y = ((y - head.target_mean) / head.target_std).astype(np.float32)
    opt = Adam(head.parameters(), lr=task.lr)
    rng = seeding.rng_for(task.seed, seeding.PROBE, task.kind, "shuffle")
    n = x.shape[1]
    history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, task.batch_size):
            b = order[s:s + task.batch_size]
            out = head(x[:, b])
            if task.kind == "denoise_regression":
                loss = mse_loss(out, y[b])
            else:
                loss = cross_entropy_loss(out, y[b])
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(float(loss.item()))
        history.append(float(np.mean(losses)))
    return ProbeResult(LayerWeights(head.raw.data[0].astype(np.float64).copy()), head, history)


def _predict(head: ProbeHead, x, batch=4096) -> np.ndarray:
    return np.concatenate([head(x[:, s:s + batch]).data for s in range(0, x.shape[1], batch)])


def score(kind, predictions, targets, noisy=None) -> float:
    """Task metric from raw predictions (class IDs, or clean log-Mel estimates)."""
    if kind == "denoise_regression":
        base = float(np.mean((noisy - targets) ** 2))
        if base <= 0:
            raise ProbeError("denoise_regression: noisy input equals the clean reference")
        return 1.0 - float(np.mean((predictions - targets) ** 2)) / base
    return float(np.mean(np.asarray(predictions) == np.asarray(targets)))


def probe_eval(frozen_model: EncoderModel, weights: LayerWeights, head: ProbeHead, corpus_split, task: ProbeTask,
               dsp_cfg: DspConfig = DspConfig()) -> float:
    taps, targets, noisy = _prepare(frozen_model, corpus_split, task.kind, dsp_cfg)
    head.raw.data[0] = np.asarray(weights.raw, dtype=head.raw.dtype)
    x, y = _design(head, task.kind, taps, targets)
    out = _predict(head, x)
    if task.kind == "denoise_regression":
        pred = out.astype(np.float64) * head.target_std + head.target_mean
        return score(task.kind, pred, y, np.concatenate(noisy))
    return score(task.kind, out.argmax(axis=1), y)


def run_probe(model: EncoderModel, corpus, task: ProbeTask, dsp_cfg: DspConfig = DspConfig()):
    """Train on the hash train split, evaluate on the eval split. Returns ``(metric, result)``."""
    tr, ev = split_corpus(corpus)
    n_classes = None
    if task.kind == "phone_frame_cls":
        n_classes = 1 + max(int(np.max(u.phone_labels)) for u in corpus)
    elif task.kind == "speaker_utt_cls":
        n_classes = 1 + max(int(u.speaker_id) for u in corpus)
    res = probe_train(model, tr, task, dsp_cfg=dsp_cfg, n_classes=n_classes)
    return probe_eval(model, res.weights, res.head, ev, task, dsp_cfg), res


def layer_weight_report(weights_by_task: dict, meta: dict | None = None) -> Report:
    """One row per (task, layer): normalized weight and its magnitude relative to the task max."""
    if not weights_by_task:
        raise ProbeError("need at least one probed task")
    rows = []
    for task, w in weights_by_task.items():
        norm = w.normalized
        peak = norm.max()
        for layer, v in enumerate(norm):
            rows.append([task, layer, float(v), float(v / peak)])
    return Report(["task", "layer", "weight", "magnitude"], rows, dict(meta or {}))
