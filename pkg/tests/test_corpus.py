import numpy as np
import pytest

from mtlab.corpus import (MAX_PHONES, MAX_SPEAKERS, CorpusSpec, generate, load_manifest, measured_snr_db, noisy_copy,
                          speaker_f0, write_wav)

SMALL = CorpusSpec(n_utterances=6, utterance_seconds=1.0, seed=1)


def test_same_seed_bit_identical():
    a, b = generate(SMALL), generate(SMALL)
    for u, v in zip(a, b):
        assert u.id == v.id and u.speaker_id == v.speaker_id
        assert u.samples.tobytes() == v.samples.tobytes()
        assert np.array_equal(u.phone_labels, v.phone_labels)
    c = generate(CorpusSpec(n_utterances=6, utterance_seconds=1.0, seed=2))
    assert any(u.samples.tobytes() != w.samples.tobytes() for u, w in zip(a, c))


def test_clean_when_no_noise():
    for u in generate(SMALL):
        assert u.clean_samples is None or np.array_equal(u.clean_samples, u.samples)


def test_noisy_snr_measured_from_stored_signals():
    spec = CorpusSpec(n_utterances=5, utterance_seconds=1.0, noise_snr_db=10.0)
    for u in generate(spec):
        noise = u.samples - u.clean_samples
        snr = 10 * np.log10(np.sum(u.clean_samples ** 2) / np.sum(noise ** 2))
        assert abs(snr - 10.0) <= 0.5
    for u in noisy_copy(generate(SMALL), 0.0, seed=4):
        assert abs(measured_snr_db(u)) <= 0.5


def test_labels_speakers_and_segments():
    spec = SMALL
    for u in generate(spec):
        assert len(u.phone_labels) == spec.n_frames
        assert 0 <= u.speaker_id < spec.n_speakers
        assert u.phone_labels.min() >= 0 and u.phone_labels.max() < spec.n_phones
        runs = np.diff(np.flatnonzero(np.diff(np.r_[-1, u.phone_labels, -1]) != 0))
        # interior segments must be at least 3 frames; edge runs may be truncated by framing
        assert (runs[1:-1] >= 3).all()


def test_speaker_pitch_spacing():
    f0 = speaker_f0(MAX_SPEAKERS)
    assert np.all(np.diff(np.sort(f0)) >= 5.0)


def test_caps_rejected():
    with pytest.raises(ValueError, match="cap"):
        CorpusSpec(n_speakers=MAX_SPEAKERS + 1)
    with pytest.raises(ValueError, match="cap"):
        CorpusSpec(n_phones=MAX_PHONES + 1)
    with pytest.raises(ValueError):
        CorpusSpec(n_utterances=0)


def test_manifest(tmp_path):
    m = tmp_path / "m.tsv"
    m.write_text("")
    assert load_manifest(m) == []
    x = np.sin(np.arange(1600) / 5) * 0.2
    write_wav(tmp_path / "a.wav", x, 16000)
    write_wav(tmp_path / "b.wav", x[:800], 16000)
    (tmp_path / "b.txt").write_text("1 2 3")
    m.write_text("u2\tb.wav\t3\tb.txt\nu1\ta.wav\n")
    utts = load_manifest(m)
    assert [u.id for u in utts] == ["u2", "u1"]
    assert utts[0].speaker_id == 3 and list(utts[0].phone_labels) == [1, 2, 3]
    assert utts[1].phone_labels is None and utts[1].speaker_id is None
    assert np.allclose(utts[1].samples, x, atol=1 / 32768)
    m.write_text("u1\tmissing.wav\n")
    with pytest.raises(FileNotFoundError, match="missing.wav"):
        load_manifest(m)
    m.write_text("u1\ta.wav\nbroken\n")
    with pytest.raises(ValueError, match=":2:"):
        load_manifest(m)
