"""Experiment config files: flat ``key = value`` lines grouped in ``[sections]``.

Sections map onto the library's config dataclasses::

    [corpus]    CorpusSpec          [kmeans]   KmeansConfig
    [dsp]       DspConfig           [rvq]      RvqConfig
    [encoder]   EncoderConfig       [probe]    epochs, snr_db
    [train]     TrainConfig         [pipeline] PipelineConfig scalars

Unknown sections or keys are errors. The config hash is the sha256 of the
canonical JSON of the *resolved* config (every field, defaults filled in,
plus the seed), so two files that differ only in comments, ordering or
spelled-out defaults hash the same.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field, fields, replace

from ..corpus import CorpusSpec
from ..dsp import DspConfig
from ..encoder import EncoderConfig
from ..formats import canonical_json
from ..kmeans import KmeansConfig
from ..pipeline import PipelineConfig
from ..rvq import RvqConfig
from ..targets import InitialTargetStrategy
from ..trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeSettings:
    epochs: int = 20
    snr_db: float = 5.0


@dataclass(frozen=True)
class PipelineSettings:
    name: str = "run"
    strategy: str = "mfcc_clusters"
    initial_k: int = 100
    tap_layer: int | None = None
    target_kind: str = "layer"
    cluster_layer: int | None = None
    layers: str = ""
    k: int = 100
    head_mode: str = "single"
    rvq_levels: int = 2
    max_iterations: int = 2
    rvq_epochs: int = 10
    eps_phone: float = 0.002
    eps_speaker: float = 0.002
    eps_denoise: float = 0.01


SECTIONS = {
    "corpus": CorpusSpec, "dsp": DspConfig, "encoder": EncoderConfig, "train": TrainConfig,
    "kmeans": KmeansConfig, "rvq": RvqConfig, "probe": ProbeSettings, "pipeline": PipelineSettings,
}
# fields owned by --seed rather than by the file
SEEDED = {"corpus", "encoder", "train", "kmeans", "rvq"}


def _convert(text: str, typ, name):
    text = text.strip()
    origin = typing.get_origin(typ)
    args = [a for a in typing.get_args(typ) if a is not type(None)]
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)) and len(args) == 1:
        if text.lower() in ("", "none"):
            return None
        return _convert(text, args[0], name)
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {typ.__name__}") from None
    raise ConfigError(f"{name}: unsupported field type {typ}")


def _build(cls, values: dict, section: str):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    kw = {}
    for key, text in values.items():
        if key not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        kw[key] = _convert(text, hints[key], f"[{section}] {key}")
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


@dataclass(frozen=True)
class Experiment:
    seed: int = 0
    sections: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.sections[name]
        except KeyError:
            raise AttributeError(name) from None

    def to_dict(self) -> dict:
        return {"seed": self.seed, **{k: dataclasses.asdict(v) for k, v in sorted(self.sections.items())}}

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()

    def pipeline_config(self, **overrides) -> PipelineConfig:
        p: PipelineSettings = self.sections["pipeline"]
        layers = tuple(int(x) for x in p.layers.replace(",", " ").split()) if p.layers else ()
        eps = (("denoise_regression", p.eps_denoise), ("phone_frame_cls", p.eps_phone),
               ("speaker_utt_cls", p.eps_speaker))
        enc = replace(self.encoder, input_dims=self.dsp.n_mels) if self.encoder.front_end == "logmel" else \
            replace(self.encoder, input_dims=self.dsp.frame_length)
        cfg = PipelineConfig(
            name=p.name,
            initial_strategy=InitialTargetStrategy(p.strategy, p.initial_k, p.tap_layer),
            target_kind=p.target_kind, cluster_layer=p.cluster_layer, layers=layers, k=p.k,
            head_mode=p.head_mode, rvq_levels=p.rvq_levels, max_iterations=p.max_iterations,
            epsilons=eps, seed=self.seed, probe_snr_db=self.probe.snr_db, probe_epochs=self.probe.epochs,
            rvq_epochs=p.rvq_epochs, encoder=enc, train=self.train, dsp=self.dsp, rvq=self.rvq,
        )
        return replace(cfg, **overrides) if overrides else cfg


def parse_config_text(text: str, seed: int = 0) -> Experiment:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}".replace("\n", " ")) from None
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
    sections = {}
    for name, cls in SECTIONS.items():
        values = dict(cp[name]) if cp.has_section(name) else {}
        if name in SEEDED:
            if "seed" in values:
                raise ConfigError(f"[{name}] seed is set by --seed, not the config file")
            values["seed"] = str(seed)
        sections[name] = _build(cls, values, name)
    return Experiment(seed, sections)


def load_config(path, seed: int = 0) -> Experiment:
    text = "" if path is None else open(path, encoding="utf-8").read()
    return parse_config_text(text, seed)


def dump_config(exp: Experiment) -> str:
    """Fully resolved config in file syntax (seeds omitted: they come from --seed)."""
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for f in fields(SECTIONS[name]):
            if f.name == "seed" and name in SEEDED:
                continue
            v = getattr(exp.sections[name], f.name)
            lines.append(f"{f.name} = {'none' if v is None else v}")
        lines.append("")
    return "\n".join(lines)
