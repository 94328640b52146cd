"""Small configurations shared by the slower integration tests."""
from mtlab.corpus import CorpusSpec, generate
from mtlab.encoder import EncoderConfig
from mtlab.pipeline import PipelineConfig
from mtlab.rvq import RvqConfig
from mtlab.targets import InitialTargetStrategy
from mtlab.trainer import TrainConfig

TINY_SPEC = CorpusSpec(n_utterances=12, utterance_seconds=0.6)


def tiny_corpus():
    return generate(TINY_SPEC)


def tiny_cfg(**kw) -> PipelineConfig:
    base = dict(
        name="tiny",
        initial_strategy=InitialTargetStrategy("mfcc_clusters", k=4),
        k=4,
        probe_epochs=1,
        rvq_epochs=1,
        encoder=EncoderConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32),
        train=TrainConfig(epochs=1, batch_size=4),
        rvq=RvqConfig(d_z=4, hidden=8, n_levels=3, k_r=4, batch_size=64),
    )
    base.update(kw)
    return PipelineConfig(**base)
