import json

import numpy as np
import pytest

from mtlab.cli.store import LockedError, RunStore
from mtlab.pipeline import (IterationRecord, MemoryStore, PipelineConfig, check_convergence, experiment_grid,
                            fresh_encoder, iterations_to_converge, run)

from tiny import tiny_cfg, tiny_corpus

EPS = {"a": 0.0, "b": 0.0}


def test_convergence_fixtures():
    assert check_convergence([{"a": 0.80}, {"a": 0.80}], {"a": 0.0}) == (True, {"a": True})
    assert check_convergence([{"a": 0.80}, {"a": 0.85}], {"a": 0.0}) == (False, {"a": False})
    ok, per = check_convergence([{"a": 0.80, "b": 0.5}, {"a": 0.90, "b": 0.5}], EPS)
    assert not ok and per == {"a": False, "b": True}
    assert check_convergence([{"a": 0.80}, {"a": 0.801}], {"a": 0.002})[0]
    assert not check_convergence([{"a": 0.80}, {"a": 0.803}], {"a": 0.002})[0]
    assert check_convergence([{"a": 0.9}, {"a": 0.7}], {"a": 0.0})[0]
    with pytest.raises(ValueError):
        check_convergence([{"a": 1.0}], EPS)


def test_iterations_to_converge():
    recs = [IterationRecord(i + 1, {}, "", [], {"a": m}) for i, m in enumerate([0.5, 0.6, 0.6, 0.7])]
    assert iterations_to_converge(recs, {"a": 0.0}) == 3
    assert iterations_to_converge(recs[:2], {"a": 0.0}) is None


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(max_iterations=0)
    with pytest.raises(ValueError):
        PipelineConfig(epsilons=(("phone_frame_cls", -1.0), ("speaker_utt_cls", 0.0), ("denoise_regression", 0.0)))
    with pytest.raises(ValueError):
        PipelineConfig(target_kind="multilayer", head_mode="single")


def test_record_round_trip():
    r = IterationRecord(2, {"kind": "layer", "k": 100}, "iter2/ckpt", ["iter2/codebook-0"],
                        {"phone_frame_cls": 0.1 + 0.2}, ["phone_frame_cls"], "a", "b", "c", [1.5, 1.25])
    assert IterationRecord.from_json(r.to_json()) == r
    assert IterationRecord.from_json(r.to_json()).to_json() == r.to_json()


@pytest.fixture(scope="module")
def corpus():
    return tiny_corpus()


def test_single_iteration(corpus):
    recs = run(corpus, tiny_cfg(max_iterations=1))
    assert len(recs) == 1 and recs[0].index == 1
    assert set(recs[0].metrics) == {"phone_frame_cls", "speaker_utt_cls", "denoise_regression"}
    assert recs[0].converged_tasks == []


def test_fresh_encoder_each_iteration(corpus):
    cfg = tiny_cfg(max_iterations=2)
    store = MemoryStore()
    recs = run(corpus, cfg, store)
    assert len(recs) == 2
    for r in recs:
        assert r.init_hash == fresh_encoder(cfg, r.index).param_hash()
    # iteration 2 starts from its own seed, not from iteration 1's weights
    assert recs[1].init_hash not in (recs[0].param_hash, recs[0].init_hash)
    assert store.load_iteration(2)[1].param_hash() == recs[1].param_hash
    assert recs[1].converged_tasks == sorted(t for t, ok in check_convergence(recs, cfg.epsilon_map)[1].items() if ok)


def test_resume_is_idempotent(corpus, tmp_path):
    cfg = tiny_cfg(max_iterations=2, tasks=("phone_frame_cls",), epsilons=(("phone_frame_cls", 0.0),))
    first = run(corpus, cfg, RunStore(tmp_path / "a"))
    files = {p.relative_to(tmp_path / "a"): p.read_bytes() for p in (tmp_path / "a").rglob("*") if p.is_file()}
    again = run(corpus, cfg, RunStore(tmp_path / "a"))
    assert [r.to_json() for r in again] == [r.to_json() for r in first]
    assert files == {p.relative_to(tmp_path / "a"): p.read_bytes() for p in (tmp_path / "a").rglob("*") if p.is_file()}
    # dropping the last metrics file redoes exactly that iteration, bit-identically
    (tmp_path / "a" / "iter2" / "metrics.json").unlink()
    redo = run(corpus, cfg, RunStore(tmp_path / "a"))
    assert [r.to_json() for r in redo] == [r.to_json() for r in first]
    assert not (tmp_path / "a" / "LOCK").exists()


def test_lock_is_exclusive(tmp_path):
    held = RunStore(tmp_path / "r")
    held.lock()
    with pytest.raises(LockedError):
        run([], tiny_cfg(), RunStore(tmp_path / "r"))
    held.unlock()


@pytest.mark.parametrize("kind,extra", [("multilayer", {"head_mode": "conditional", "layers": (1, 2)}),
                                        ("multilayer", {"head_mode": "flat", "layers": (1, 2)}),
                                        ("rvq", {"rvq_levels": 3, "cluster_layer": 2})])
def test_target_kinds_run(corpus, kind, extra):
    cfg = tiny_cfg(max_iterations=2, target_kind=kind, tasks=("phone_frame_cls",),
                   epsilons=(("phone_frame_cls", 0.0),), **extra)
    recs = run(corpus, cfg)
    assert len(recs) == 2
    assert recs[1].strategy["kind"] == kind
    assert len(recs[1].codebooks) == (2 if kind == "multilayer" else 1)


def test_grid_rows_and_failure(corpus):
    cfg = tiny_cfg(tasks=("phone_frame_cls",), epsilons=(("phone_frame_cls", 0.0),))
    rep = experiment_grid(corpus, cfg, "n_clusters", [3, 10 ** 9])
    assert [r[2] for r in rep.rows] == ["ok", "failed"]
    assert rep.rows[1][-1] and rep.meta["config_hash"] == cfg.config_hash()
    assert len(rep.columns) == len(rep.rows[0])
    one = experiment_grid(corpus, cfg, "layers", [1])
    assert len(one.rows) == 1
    with pytest.raises(ValueError):
        experiment_grid(corpus, cfg, "n_clusters", [])


def test_config_hash_stable():
    a, b = tiny_cfg(), tiny_cfg()
    assert a.config_hash() == b.config_hash() != tiny_cfg(k=5).config_hash()
    json.dumps(a.to_dict())
    assert np.isfinite(a.epsilon_map["phone_frame_cls"])
