import numpy as np
import pytest

from mtlab.cli import main
from mtlab.cli import codecs
from mtlab.cli.config import ConfigError, dump_config, load_config, parse_config_text
from mtlab.formats import parse_report, read_tensor, write_tensor
from mtlab.kmeans import Codebook, KmeansConfig, fit

TINY_INI = """
[corpus]
n_utterances = 12
utterance_seconds = 0.6

[encoder]
n_layers = 2
d_model = 16
n_heads = 2
d_ff = 32

[train]
epochs = 1
batch_size = 4

[rvq]
d_z = 4
hidden = 8
n_levels = 3
k_r = 4
batch_size = 64

[probe]
epochs = 1

[pipeline]
name = tiny
initial_k = 4
k = 4
rvq_epochs = 1
"""


@pytest.fixture
def ini(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY_INI)
    return str(p)


def _tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _err(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    return lines[-1]


def test_gen_corpus_byte_identical(tmp_path, ini):
    for d in ("a", "b"):
        assert main(["gen-corpus", "--seed", "1", "--config", ini, "--out", str(tmp_path / d)]) == 0
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a == b and len([k for k in a if k.suffix == ".wav"]) == 12
    assert main(["gen-corpus", "--seed", "2", "--config", ini, "--out", str(tmp_path / "c")]) == 0
    assert _tree(tmp_path / "c") != a


def test_kmeans_fit_fixture(tmp_path):
    write_tensor(tmp_path / "p.tensor", np.array([0.0, 1.0, 10.0, 11.0]))
    assert main(["kmeans-fit", "--points", str(tmp_path / "p.tensor"), "--k", "2", "--restarts", "5",
                 "--out", str(tmp_path / "o")]) == 0
    cb = codecs.codebook_from_bytes((tmp_path / "o" / "codebook").read_bytes())
    assert sorted(cb.centroids[:, 0]) == [0.5, 10.5] and cb.inertia == 1.0
    ids = read_tensor(tmp_path / "o" / "assign.tensor")
    assert ids[0] == ids[1] != ids[2] == ids[3]


def test_error_codes(tmp_path, capsys, ini):
    assert main(["kmeans-fit", "--k", "2"]) == 2
    assert _err(capsys).startswith("ERR usage:")
    assert main(["no-such-command"]) == 2
    assert _err(capsys).startswith("ERR usage:")
    (tmp_path / "bad.tensor").write_bytes(b"MTL1garbage")
    assert main(["kmeans-fit", "--points", str(tmp_path / "bad.tensor"), "--out", str(tmp_path / "o")]) == 4
    assert _err(capsys).startswith("ERR format:")
    assert main(["kmeans-fit", "--points", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 3
    assert _err(capsys).startswith("ERR input:")
    (tmp_path / "x.ini").write_text("[corpus]\nseed = 3\n")
    assert main(["gen-corpus", "--config", str(tmp_path / "x.ini"), "--out", str(tmp_path / "o")]) == 2
    assert "seed" in _err(capsys)
    run = tmp_path / "r" / "tiny"
    run.mkdir(parents=True)
    (run / "LOCK").write_text("1\n")
    assert main(["pipeline-run", "--config", ini, "--out", str(tmp_path / "r")]) == 6
    err = _err(capsys)
    assert err.startswith("ERR locked:") and "\n" not in err


def test_config_round_trip_and_hash(tmp_path, ini):
    exp = load_config(ini, 7)
    again = parse_config_text(dump_config(exp), 7)
    assert again.config_hash() == exp.config_hash()
    assert load_config(ini, 8).config_hash() != exp.config_hash()
    with pytest.raises(ConfigError):
        parse_config_text("[encoder]\nbogus = 1\n", 0)
    with pytest.raises(ConfigError):
        parse_config_text("[nosuch]\n", 0)


def test_codec_round_trips():
    from mtlab.encoder import EncoderConfig, EncoderModel
    from mtlab.rvq import RvqConfig, RvqModel
    from mtlab.targets import TargetBundle, TargetStream
    m = EncoderModel(EncoderConfig(n_layers=1, d_model=8, n_heads=2, d_ff=8))
    m.feature_mean = np.arange(40.0)
    data = codecs.encoder_to_bytes(m, {"iteration": 1})
    back, extra = codecs.encoder_from_bytes(data)
    assert back.param_hash() == m.param_hash() and extra["iteration"] == 1
    assert codecs.encoder_to_bytes(back, extra) == data
    cb = fit(np.random.default_rng(0).normal(size=(20, 3)), KmeansConfig(k=3, standardize=True), {"layer": 2})
    data = codecs.codebook_to_bytes(cb)
    assert codecs.codebook_to_bytes(codecs.codebook_from_bytes(data)) == data
    assert isinstance(codecs.codebook_from_bytes(data), Codebook)
    b = TargetBundle([TargetStream("L2", [np.array([0, 1, 2]), np.array([2])], 3, 2, {"layer": 2}),
                      TargetStream("L1", [np.array([1, 1, 0]), np.array([0])], 2, 1, {"layer": 1})], ["u0", "u1"])
    data = codecs.targets_to_bytes(b)
    assert codecs.targets_to_bytes(codecs.targets_from_bytes(data)) == data
    r = RvqModel(RvqConfig(d_in=4, d_z=2, hidden=4, k1=3, k_r=2))
    data = codecs.rvq_to_bytes(r)
    assert codecs.rvq_to_bytes(codecs.rvq_from_bytes(data)) == data


def test_stage_commands_chain(tmp_path, ini):
    c = ["--config", ini]
    o = lambda name: ["--out", str(tmp_path / name)]  # noqa: E731
    assert main(["gen-corpus", *c, *o("corpus"), "--noise-snr", "5"]) == 0
    corpus = ["--corpus", str(tmp_path / "corpus")]
    assert main(["extract-features", *c, *corpus, *o("feat")]) == 0
    assert read_tensor(tmp_path / "feat" / "features.tensor").shape[1] == 13
    assert main(["train-initial", *c, *corpus, *o("it1")]) == 0
    assert main(["train", *c, *corpus, "--targets", str(tmp_path / "it1" / "targets"), *o("m1")]) == 0
    ckpt = str(tmp_path / "m1" / "ckpt")
    assert main(["dump-layers", *c, *corpus, "--ckpt", ckpt, *o("layers")]) == 0
    assert {p.name for p in (tmp_path / "layers").iterdir()} >= {"layer0.tensor", "layer2.tensor"}
    assert main(["make-targets", *c, *corpus, "--ckpt", ckpt, "--layers", "1", *o("t2")]) == 0
    assert main(["rvq-train", *c, *corpus, "--targets", str(tmp_path / "t2" / "targets"), *o("rvq")]) == 0
    assert main(["make-targets", *c, *corpus, "--ckpt", ckpt, "--layers", "1", "--rvq", str(tmp_path / "rvq" / "rvq"),
                 "--levels", "3", *o("t3")]) == 0
    t3 = codecs.targets_from_bytes((tmp_path / "t3" / "targets").read_bytes())
    assert t3.n_streams == 3
    assert main(["probe", *c, *corpus, "--ckpt", ckpt, "--task", "phone_frame_cls", *o("probe")]) == 0
    rep = parse_report((tmp_path / "probe" / "probe.tsv").read_text())
    assert rep.meta["config_hash"] == load_config(ini, 0).config_hash()


def test_pipeline_grid_and_report(tmp_path, ini):
    c = ["--config", ini]
    assert main(["pipeline-run", *c, "--out", str(tmp_path / "runs")]) == 0
    run = tmp_path / "runs" / "tiny"
    assert (run / "iter1" / "ckpt").is_file() and (run / "iter2" / "metrics.json").is_file()
    assert main(["report", *c, "--run", str(run), "--out", str(tmp_path / "rep")]) == 0
    assert len(parse_report((tmp_path / "rep" / "report.tsv").read_text()).rows) == 2
    assert main(["grid", *c, "--axis", "n_clusters", "--values", "3,5", "--out", str(tmp_path / "g")]) == 0
    assert main(["report", *c, "--run", str(tmp_path / "g"), "--out", str(tmp_path / "grep")]) == 0
    rows = parse_report((tmp_path / "grep" / "report.tsv").read_text()).rows
    assert [r[1] for r in rows] == ["3", "5"]


def test_pipeline_run_deterministic(tmp_path, ini):
    for d in ("a", "b"):
        assert main(["pipeline-run", "--config", ini, "--max-iterations", "1", "--out", str(tmp_path / d)]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
