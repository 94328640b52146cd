"""Object <-> bytes codecs for the container formats (no file access here)."""
from __future__ import annotations

import numpy as np

from ..encoder import EncoderConfig, EncoderModel
from ..formats import FormatError, container_from_bytes, container_to_bytes
from ..kmeans import Codebook
from ..rvq import RvqConfig, RvqModel
from ..targets import TargetBundle, TargetStream

CKPT, TGTS, RVQM, CDBK = b"CKPT", b"TGTS", b"RVQM", b"CDBK"


def _blocks(d: dict, prefix: str) -> list:
    return [(prefix + name, np.asarray(v)) for name, v in sorted(d.items())]


def _split(blocks, prefix: str) -> dict:
    return {n[len(prefix):]: a for n, a in blocks if n.startswith(prefix)}


# -- CKPT ---------------------------------------------------------------------

def encoder_to_bytes(model: EncoderModel, extra: dict | None = None) -> bytes:
    header = {"kind": "encoder", "config": model.cfg.to_dict(), "extra": extra or {}}
    blocks = _blocks(model.state_dict(), "param.")
    blocks += [("buffer.feature_mean", model.feature_mean.astype(np.float64)),
               ("buffer.feature_std", model.feature_std.astype(np.float64))]
    return container_to_bytes(CKPT, header, blocks)


def encoder_from_bytes(data: bytes) -> tuple[EncoderModel, dict]:
    header, blocks = container_from_bytes(data, CKPT)
    if header.get("kind") != "encoder":
        raise FormatError(f"checkpoint kind {header.get('kind')!r} is not an encoder")
    model = EncoderModel(EncoderConfig(**header["config"]))
    model.load_state_dict(_split(blocks, "param."))
    buf = _split(blocks, "buffer.")
    model.feature_mean = buf["feature_mean"]
    model.feature_std = buf["feature_std"]
    return model, header.get("extra", {})


# -- CDBK ---------------------------------------------------------------------

def codebook_to_bytes(cb: Codebook) -> bytes:
    header = {"source": cb.source, "inertia": float(cb.inertia), "history": [float(x) for x in cb.history],
              "standardized": cb.mean is not None}
    blocks = [("centroids", np.asarray(cb.centroids, dtype=np.float64))]
    if cb.mean is not None:
        blocks += [("mean", np.asarray(cb.mean, np.float64)), ("scale", np.asarray(cb.scale, np.float64))]
    return container_to_bytes(CDBK, header, blocks)


def codebook_from_bytes(data: bytes) -> Codebook:
    header, blocks = container_from_bytes(data, CDBK)
    b = dict(blocks)
    return Codebook(b["centroids"], header["source"], header["inertia"], b.get("mean"), b.get("scale"),
                    header["history"])


# -- TGTS ---------------------------------------------------------------------

def targets_to_bytes(bundle: TargetBundle) -> bytes:
    """One u32 tensor per stream: all utterances concatenated, split by ``lengths``."""
    lengths = [len(x) for x in bundle.streams[0].ids] if bundle.streams else []
    header = {
        "ordering": bundle.ordering,
        "utterance_ids": list(bundle.utterance_ids),
        "lengths": lengths,
        "streams": [{"name": s.name, "vocab_size": s.vocab_size, "layer_or_level": s.layer_or_level,
                     "source": s.source} for s in bundle.streams],
    }
    blocks = []
    for s in bundle.streams:
        cat = np.concatenate(s.ids) if s.ids else np.zeros(0)
        blocks.append((s.name, cat.astype(np.uint32)))
    return container_to_bytes(TGTS, header, blocks)


def targets_from_bytes(data: bytes) -> TargetBundle:
    header, blocks = container_from_bytes(data, TGTS)
    arrays = dict(blocks)
    bounds = np.cumsum([0] + header["lengths"])
    streams = []
    for meta in header["streams"]:
        cat = arrays[meta["name"]].astype(np.int64)
        if len(cat) != bounds[-1]:
            raise FormatError(f"stream {meta['name']}: {len(cat)} ids for {bounds[-1]} frames")
        ids = [cat[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
        streams.append(TargetStream(meta["name"], ids, meta["vocab_size"], meta["layer_or_level"], meta["source"]))
    return TargetBundle(streams, header["utterance_ids"], header["ordering"])


# -- RVQM ---------------------------------------------------------------------

def rvq_to_bytes(model: RvqModel) -> bytes:
    header = {"config": model.cfg.to_dict()}
    blocks = _blocks(model.state_dict(), "param.") + _blocks(
        {k: np.asarray(v, np.float64) for k, v in model.buffers().items()}, "buffer.")
    return container_to_bytes(RVQM, header, blocks)


def rvq_from_bytes(data: bytes) -> RvqModel:
    header, blocks = container_from_bytes(data, RVQM)
    model = RvqModel(RvqConfig(**header["config"]))
    model.load_state_dict(_split(blocks, "param."))
    model.load_buffers(_split(blocks, "buffer."))
    return model
