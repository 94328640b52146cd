"""Iterative clustering driver: train, extract, cluster, retrain.

Iteration 1 trains on the initial targets. Iteration ``i > 1`` trains a fresh
encoder (initialised from ``derive_seed(seed, ENCODER_INIT, i)``, never warm
started) on targets clustered from iteration ``i - 1``. After every iteration
the probes run and the convergence rule is checked: a task has converged
when its latest metric is at most previous + epsilon; the run stops when
every task has converged or ``max_iterations`` is reached.

Persistence goes through an injected store (see ``MemoryStore`` for the
interface); the filesystem store lives in ``mtlab.cli.store``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import kmeans, seeding
from .corpus import noisy_copy
from .dsp import DspConfig
from .encoder import EncoderConfig, EncoderModel, reference_layer_to_local
from .formats import Report, canonical_json
from .heads import HeadStack
from .probes import TASKS, ProbeTask, run_probe
from .rvq import RvqConfig, RvqModel
from .rvq import train as rvq_train
from .targets import InitialTargetStrategy, TargetBundle, initial_targets, multilayer_targets, rvq_targets
from .trainer import TrainConfig, model_inputs, train_masked_prediction

log = logging.getLogger(__name__)

TARGET_KINDS = ("layer", "multilayer", "rvq")
DEFAULT_EPSILONS = {"phone_frame_cls": 0.002, "speaker_utt_cls": 0.002, "denoise_regression": 0.01}
# taps of the 12-layer reference model: 6 for the second iteration, 9 afterwards;
# multi-target uses the odd taps
SCHEDULE_SECOND, SCHEDULE_LATER = 6, 9
MULTI_REFERENCE_LAYERS = (3, 5, 7, 9, 11)
GRID_AXES = ("n_clusters", "layers", "rvq_levels", "strategies")


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    name: str = "run"
    initial_strategy: InitialTargetStrategy = InitialTargetStrategy()
    target_kind: str = "layer"
    cluster_layer: int | None = None       # local tap; None follows the 6-then-9 schedule
    layers: tuple = ()                     # multilayer taps; empty maps 3,5,7,9,11
    k: int = 100
    head_mode: str = "single"
    rvq_levels: int = 2                    # token streams including the k-means level
    max_iterations: int = 2
    epsilons: tuple = tuple(sorted(DEFAULT_EPSILONS.items()))
    tasks: tuple = TASKS
    seed: int = 0
    probe_snr_db: float = 5.0
    probe_epochs: int = 20
    rvq_epochs: int = 10
    encoder: EncoderConfig = EncoderConfig()
    train: TrainConfig = TrainConfig()
    dsp: DspConfig = DspConfig()
    rvq: RvqConfig = RvqConfig()

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.target_kind not in TARGET_KINDS:
            raise ValueError(f"unknown target_kind {self.target_kind!r}")
        eps = dict(self.epsilons)
        if any(v < 0 for v in eps.values()):
            raise ValueError("epsilons must be >= 0")
        for t in self.tasks:
            if t not in TASKS:
                raise ValueError(f"unknown task {t!r}")
            if t not in eps:
                raise ValueError(f"no epsilon for task {t!r}")
        if self.target_kind == "layer" and self.head_mode not in ("single",):
            raise ValueError("single-layer targets use head_mode 'single'")
        if self.target_kind == "multilayer" and self.head_mode not in ("flat", "conditional"):
            raise ValueError("multilayer targets need head_mode 'flat' or 'conditional'")
        if self.target_kind == "rvq" and not 1 <= self.rvq_levels <= self.rvq.n_levels:
            raise ValueError(f"rvq_levels must be in 1..{self.rvq.n_levels}")
        if self.k < 2:
            raise ValueError("k must be >= 2")

    @property
    def epsilon_map(self) -> dict:
        return dict(self.epsilons)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = list(self.layers)
        d["tasks"] = list(self.tasks)
        d["epsilons"] = {k: v for k, v in self.epsilons}
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()

    def cluster_layer_for(self, iteration: int) -> int:
        if self.cluster_layer is not None:
            return self.cluster_layer
        ref = SCHEDULE_SECOND if iteration == 2 else SCHEDULE_LATER
        return reference_layer_to_local(ref, self.encoder.n_layers)

    def multi_layers(self) -> list[int]:
        if self.layers:
            return sorted(int(x) for x in self.layers)
        return sorted({reference_layer_to_local(p, self.encoder.n_layers) for p in MULTI_REFERENCE_LAYERS})

    def strategy_descriptor(self, iteration: int) -> dict:
        if iteration == 1:
            s = self.initial_strategy
            return {"kind": s.kind, "k": s.k, "tap_layer": s.resolved_tap(self.encoder.n_layers)}
        d = {"kind": self.target_kind, "k": self.k, "head_mode": self._head_mode(iteration)}
        if self.target_kind == "multilayer":
            d["layers"] = self.multi_layers()
        else:
            d["layer"] = self.cluster_layer_for(iteration)
        if self.target_kind == "rvq":
            d["rvq_levels"] = self.rvq_levels
        return d

    def _head_mode(self, iteration: int) -> str:
        if iteration == 1 or self.target_kind == "layer":
            return "single"
        if self.target_kind == "rvq":
            return "conditional" if self.rvq_levels > 1 else "single"
        return self.head_mode


@dataclass
class IterationRecord:
    index: int
    strategy: dict
    checkpoint: str
    codebooks: list
    metrics: dict
    converged_tasks: list = field(default_factory=list)
    init_hash: str = ""
    param_hash: str = ""
    targets_hash: str = ""
    train_history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "IterationRecord":
        return cls(**d)

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "IterationRecord":
        return cls.from_dict(json.loads(text))


def _metrics_of(r) -> dict:
    return r.metrics if hasattr(r, "metrics") else dict(r)


def check_convergence(records, epsilons) -> tuple[bool, dict]:
    """Per task: converged iff latest <= previous + eps. Overall: all tasks converged."""
    if len(records) < 2:
        raise ValueError("convergence needs at least two records")
    prev, last = _metrics_of(records[-2]), _metrics_of(records[-1])
    eps = dict(epsilons)
    per_task = {}
    for task in sorted(last):
        if task not in prev:
            raise ValueError(f"task {task!r} missing from the previous record")
        per_task[task] = bool(last[task] <= prev[task] + eps.get(task, 0.0))
    return all(per_task.values()), per_task


class MemoryStore:
    """In-memory store; the interface any persistence layer must provide."""

    def __init__(self):
        self.iterations: dict[int, tuple] = {}

    def lock(self):
        pass

    def unlock(self):
        pass

    def has_iteration(self, index: int) -> bool:
        return index in self.iterations

    def load_iteration(self, index: int) -> tuple[IterationRecord, EncoderModel]:
        return self.iterations[index][:2]

    def save_targets(self, index: int, bundle: TargetBundle, extras: dict) -> tuple[list, str]:
        """Persist targets before training; returns (codebook refs, targets hash)."""
        return [f"iter{index}/codebook-{i}" for i in range(len(bundle.codebooks))], bundle_hash(bundle)

    def save_iteration(self, record: IterationRecord, model: EncoderModel) -> str:
        self.iterations[record.index] = (record, model)
        return f"iter{record.index}/ckpt"


def bundle_hash(bundle: TargetBundle) -> str:
    h = hashlib.sha256()
    for s in bundle.streams:
        h.update(f"{s.name}:{s.vocab_size}:{s.layer_or_level};".encode())
        for ids in s.ids:
            h.update(np.asarray(ids, dtype="<u4").tobytes())
    return h.hexdigest()


@dataclass
class _Data:
    corpus: list
    inputs: list      # encoder inputs (log-Mel or frames)
    logmel: list
    probe_corpus: list


def _prepare_data(corpus, cfg: PipelineConfig) -> _Data:
    logmel = model_inputs(corpus, cfg.dsp)
    inputs = logmel if cfg.encoder.front_end == "logmel" else model_inputs(corpus, cfg.dsp, "conv")
    probe_corpus = noisy_copy(corpus, cfg.probe_snr_db, seeding.derive_seed(cfg.seed, seeding.PROBE))
    return _Data(corpus, inputs, logmel, probe_corpus)


def _kmeans_cfg(cfg: PipelineConfig, iteration: int, k: int) -> kmeans.KmeansConfig:
    return kmeans.KmeansConfig(k=k, seed=seeding.derive_seed(cfg.seed, seeding.KMEANS, iteration))


def make_targets(data: _Data, cfg: PipelineConfig, iteration: int, prev: EncoderModel | None):
    """Targets for ``iteration``; returns ``(bundle, extras)`` where extras may hold an RvqModel."""
    uids = [u.id for u in data.corpus]
    if iteration == 1:
        s = cfg.initial_strategy
        enc = replace(cfg.encoder, seed=seeding.derive_seed(cfg.seed, seeding.ENCODER_INIT, 0),
                      input_dims=cfg.encoder.input_dims)
        bundle, _ = initial_targets(data.corpus, s, cfg.dsp, enc, cfg.train,
                                    _kmeans_cfg(cfg, 1, s.k), inputs=data.logmel)
        return bundle, {}
    if prev is None:
        raise PipelineError(f"iteration {iteration} needs the previous model")
    if cfg.target_kind == "multilayer":
        b = multilayer_targets(prev, data.inputs, cfg.multi_layers(), cfg.k, _kmeans_cfg(cfg, iteration, cfg.k),
                               iteration - 1, uids)
        return b, {}
    layer = cfg.cluster_layer_for(iteration)
    b = multilayer_targets(prev, data.inputs, [layer], cfg.k, _kmeans_cfg(cfg, iteration, cfg.k), iteration - 1, uids)
    if cfg.target_kind == "layer" or cfg.rvq_levels == 1:
        if cfg.target_kind == "rvq":
            b = TargetBundle([replace(b.streams[0], name="rvq1", layer_or_level=1)], uids, "level_asc", b.codebooks)
        return b, {}
    rcfg = replace(cfg.rvq, k1=cfg.k, pinned=True, d_in=cfg.dsp.n_mels,
                   seed=seeding.derive_seed(cfg.seed, seeding.RVQ, iteration))
    rmodel = RvqModel(rcfg)
    ids = b.streams[0].ids
    rvq_train(rmodel, data.logmel, ids, cfg.rvq_epochs, uids)
    rb = rvq_targets(rmodel, data.logmel, ids, cfg.rvq_levels, uids)
    rb.codebooks = b.codebooks
    return rb, {"rvq": rmodel}


def fresh_encoder(cfg: PipelineConfig, iteration: int, data: _Data | None = None) -> EncoderModel:
    enc = replace(cfg.encoder, seed=seeding.derive_seed(cfg.seed, seeding.ENCODER_INIT, iteration))
    model = EncoderModel(enc)
    if data is not None:
        model.set_feature_stats(data.inputs)
    return model


def probe_all(model: EncoderModel, data: _Data, cfg: PipelineConfig, iteration: int) -> dict:
    metrics = {}
    for task in cfg.tasks:
        pt = ProbeTask(task, epochs=cfg.probe_epochs, seed=seeding.derive_seed(cfg.seed, seeding.PROBE, iteration))
        metrics[task] = float(run_probe(model, data.probe_corpus, pt, cfg.dsp)[0])
    return metrics


def train_iteration(data: _Data, cfg: PipelineConfig, iteration: int, bundle: TargetBundle):
    """Fresh encoder trained on ``bundle``. Returns ``(model, init_hash, history)``."""
    model = fresh_encoder(cfg, iteration)
    init_hash = model.param_hash()
    model.set_feature_stats(data.inputs)
    mode = cfg._head_mode(iteration)
    stack = HeadStack(mode, cfg.encoder.d_model, bundle.vocab_sizes,
                      seed=seeding.derive_seed(cfg.seed, seeding.HEADS_INIT, iteration), dtype=cfg.encoder.dtype)
    tcfg = replace(cfg.train, seed=seeding.derive_seed(cfg.seed, seeding.SHUFFLE, iteration))
    hist = train_masked_prediction(model, stack, data.inputs, bundle.stream_ids(), tcfg)
    return model, init_hash, hist


def run(corpus, cfg: PipelineConfig, store=None) -> list[IterationRecord]:
    store = store if store is not None else MemoryStore()
    store.lock()
    try:
        return _run(corpus, cfg, store)
    finally:
        store.unlock()


def _run(corpus, cfg, store) -> list[IterationRecord]:
    data = None
    records: list[IterationRecord] = []
    prev = None
    for i in range(1, cfg.max_iterations + 1):
        if store.has_iteration(i):
            rec, prev = store.load_iteration(i)
            log.info("iteration %d: already complete, skipped", i)
        else:
            data = data or _prepare_data(corpus, cfg)
            log.info("iteration %d: building targets", i)
            bundle, extras = make_targets(data, cfg, i, prev)
            cb_refs, thash = store.save_targets(i, bundle, extras)
            model, init_hash, hist = train_iteration(data, cfg, i, bundle)
            metrics = probe_all(model, data, cfg, i)
            rec = IterationRecord(i, cfg.strategy_descriptor(i), "", cb_refs, metrics, [], init_hash,
                                  model.param_hash(), thash, [float(x) for x in hist])
            if records:
                _, per_task = check_convergence(records + [rec], cfg.epsilon_map)
                rec.converged_tasks = sorted(t for t, ok in per_task.items() if ok)
            rec.checkpoint = f"iter{i}/ckpt"
            store.save_iteration(rec, model)
            prev = model
            log.info("iteration %d: %s", i, metrics)
        records.append(rec)
        if len(records) >= 2 and check_convergence(records, cfg.epsilon_map)[0]:
            log.info("converged after iteration %d", i)
            break
    return records


def iterations_to_converge(records, epsilons) -> int | None:
    """Index of the first iteration whose metrics did not improve on its predecessor, if any."""
    for j in range(2, len(records) + 1):
        if check_convergence(records[:j], epsilons)[0]:
            return records[j - 1].index
    return None


GRID_COLUMNS = ["axis", "value", "status", "iterations", *TASKS, "error"]


def _grid_cfg(base: PipelineConfig, axis: str, value) -> PipelineConfig:
    if axis == "n_clusters":
        return replace(base, target_kind="layer", head_mode="single", k=int(value))
    if axis == "layers":
        if str(value) in ("flat", "conditional"):
            return replace(base, target_kind="multilayer", head_mode=str(value))
        return replace(base, target_kind="layer", head_mode="single", cluster_layer=int(value))
    if axis == "rvq_levels":
        return replace(base, target_kind="rvq", rvq_levels=int(value))
    if axis == "strategies":
        return replace(base, initial_strategy=replace(base.initial_strategy, kind=str(value)))
    raise ValueError(f"unknown grid axis {axis!r}; expected one of {GRID_AXES}")


def experiment_grid(corpus, base_cfg: PipelineConfig, axis: str, values, shared_store=None) -> Report:
    """One row per axis value.

    ``n_clusters``/``layers``/``rvq_levels`` cells train iteration 3 from
    targets clustered on a shared iteration-2 model; ``strategies`` cells run
    the whole pipeline from their initial strategy. A failing cell is
    recorded with status ``failed`` and the grid continues.
    """
    values = list(values)
    if not values:
        raise ValueError("grid axis needs at least one value")
    if axis not in GRID_AXES:
        raise ValueError(f"unknown grid axis {axis!r}; expected one of {GRID_AXES}")
    rows = []
    shared = None
    data = None
    if axis != "strategies":
        shared_cfg = replace(base_cfg, target_kind="layer", head_mode="single", cluster_layer=None,
                             max_iterations=2)
        shared_store = shared_store if shared_store is not None else MemoryStore()
        run(corpus, shared_cfg, shared_store)
        shared = shared_store.load_iteration(2)[1]
        data = _prepare_data(corpus, base_cfg)
    for value in values:
        try:
            cfg = _grid_cfg(base_cfg, axis, value)
            if axis == "strategies":
                recs = run(corpus, cfg)
                metrics = recs[-1].metrics
                n_iter = iterations_to_converge(recs, cfg.epsilon_map) or len(recs)
            else:
                bundle, _ = make_targets(data, cfg, 3, shared)
                model, _, _ = train_iteration(data, cfg, 3, bundle)
                metrics = probe_all(model, data, cfg, 3)
                n_iter = 3
            rows.append([axis, str(value), "ok", n_iter, *[float(metrics.get(t, math.nan)) for t in TASKS], ""])
        except Exception as exc:  # noqa: BLE001 - grid keeps going and records the failure
            log.warning("grid cell %s=%s failed: %s", axis, value, exc)
            msg = f"{type(exc).__name__}: {exc}".replace("\t", " ").replace("\n", " ")
            rows.append([axis, str(value), "failed", 0, *[math.nan] * len(TASKS), msg])
    return Report(list(GRID_COLUMNS), rows, {"config_hash": base_cfg.config_hash(), "axis": axis})
