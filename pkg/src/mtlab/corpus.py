"""Synthetic speech-like corpus and WAV manifest ingestion.

Each utterance is a chain of "phone" segments voiced at the speaker's
fundamental. A phone is a fixed spectral envelope with 2-3 resonances; the
waveform is the sum of harmonics of f0 weighted by that envelope. Labels are
therefore exact: the phone at the centre sample of each analysis frame, and
the speaker index.

Randomness: corpus-level tables (envelopes, speaker tilts) come from
``rng_for(seed, CORPUS)``; utterance ``i`` uses ``rng_for(seed, CORPUS, i)``
and its noise ``rng_for(seed, NOISE, i)``. Utterances can be generated in any
order or in parallel with identical results.
"""
from __future__ import annotations

import wave
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import seeding

MAX_SPEAKERS = 64
MAX_PHONES = 64
MIN_F0_SPACING_HZ = 5.0
MIN_SEGMENT_FRAMES = 6
MAX_SEGMENT_FRAMES = 20
PEAK_LEVEL = 0.5


@dataclass
class Utterance:
    id: str
    samples: np.ndarray
    sample_rate: int
    phone_labels: np.ndarray | None = None
    speaker_id: int | None = None
    clean_samples: np.ndarray | None = None

    def __post_init__(self):
        if self.clean_samples is not None and len(self.clean_samples) != len(self.samples):
            raise ValueError(f"{self.id}: clean_samples length differs from samples")


@dataclass(frozen=True)
class CorpusSpec:
    n_speakers: int = 8
    n_phones: int = 12
    n_utterances: int = 200
    utterance_seconds: float = 2.0
    sample_rate: int = 16000
    noise_snr_db: float | None = None
    seed: int = 0
    frame_length: int = 400
    frame_shift: int = 160
    segment_gain_db: float = 12.0
    coarticulation_ms: float = 30.0

    def __post_init__(self):
        for name in ("n_speakers", "n_phones", "n_utterances"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_speakers > MAX_SPEAKERS:
            raise ValueError(f"n_speakers={self.n_speakers} exceeds cap {MAX_SPEAKERS}")
        if self.n_phones > MAX_PHONES:
            raise ValueError(f"n_phones={self.n_phones} exceeds cap {MAX_PHONES}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be > 0")
        if self.segment_gain_db < 0 or self.coarticulation_ms < 0:
            raise ValueError("segment_gain_db and coarticulation_ms must be >= 0")
        if self.n_samples < self.frame_length + MIN_SEGMENT_FRAMES * self.frame_shift:
            raise ValueError("utterance_seconds too short for one phone segment")

    @property
    def n_samples(self) -> int:
        return int(round(self.utterance_seconds * self.sample_rate))

    @property
    def n_frames(self) -> int:
        return 1 + (self.n_samples - self.frame_length) // self.frame_shift


@dataclass(frozen=True)
class _Inventory:
    f0: np.ndarray            # per speaker, Hz
    tilt: np.ndarray          # per speaker, dB per kHz
    formants: list = field(default_factory=list)  # per phone: array of (freq, bandwidth, gain)


def speaker_f0(n_speakers: int) -> np.ndarray:
    """Evenly spaced f0 grid, at least 5 Hz apart."""
    step = max(MIN_F0_SPACING_HZ, 150.0 / max(1, n_speakers - 1))
    return 100.0 + step * np.arange(n_speakers)


def _inventory(spec: CorpusSpec) -> _Inventory:
    rng = seeding.rng_for(spec.seed, seeding.CORPUS)
    tilt = rng.uniform(-4.0, 1.0, size=spec.n_speakers)
    nyq = spec.sample_rate / 2
    ranges = [(250.0, 900.0), (900.0, 2500.0), (2500.0, min(3800.0, 0.9 * nyq))]
    formants = []
    for _ in range(spec.n_phones):
        n = int(rng.integers(2, 4))
        rows = []
        for lo, hi in ranges[:n]:
            hi = max(hi, lo + 1.0)
            rows.append((rng.uniform(lo, hi), rng.uniform(60.0, 200.0), rng.uniform(0.4, 1.0)))
        formants.append(np.array(rows))
    return _Inventory(speaker_f0(spec.n_speakers), tilt, formants)


def phone_envelope(freqs, formants) -> np.ndarray:
    f = np.asarray(freqs, dtype=np.float64)[..., None]
    fc, bw, g = formants[:, 0], formants[:, 1], formants[:, 2]
    return (g / (1.0 + ((f - fc) / bw) ** 2)).sum(axis=-1) + 0.01


def _segments(rng, spec: CorpusSpec) -> tuple[np.ndarray, np.ndarray]:
    """Phone ids and sample boundaries covering the utterance."""
    total = spec.n_samples
    phones, bounds = [], [0]
    prev = -1
    while bounds[-1] < total:
        length = int(rng.integers(MIN_SEGMENT_FRAMES, MAX_SEGMENT_FRAMES + 1)) * spec.frame_shift
        p = int(rng.integers(spec.n_phones))
        if spec.n_phones > 1 and p == prev:
            p = (p + 1 + int(rng.integers(spec.n_phones - 1))) % spec.n_phones
        phones.append(p)
        bounds.append(bounds[-1] + length)
        prev = p
    bounds[-1] = total
    # a short tail would violate the minimum segment length: fold it into its neighbour
    if len(phones) > 1 and bounds[-1] - bounds[-2] < MIN_SEGMENT_FRAMES * spec.frame_shift:
        phones.pop()
        bounds.pop(-2)
    return np.array(phones), np.array(bounds)


def _crossfade_weights(bounds: np.ndarray, n: int, width: int) -> np.ndarray:
    """Per-segment weights (segments x n) that sum to 1 with linear ramps of ``width`` at joins."""
    t = np.arange(n) + 0.5
    w = np.zeros((len(bounds) - 1, n))
    for k in range(len(bounds) - 1):
        lo, hi = bounds[k], bounds[k + 1]
        rise = 1.0 if k == 0 else np.clip((t - lo) / width + 0.5, 0.0, 1.0)
        fall = 1.0 if k == len(bounds) - 2 else np.clip((hi - t) / width + 0.5, 0.0, 1.0)
        w[k] = rise * fall
    return w


def _harmonic_basis(f0: float, phase: np.ndarray, n: int, sample_rate: int) -> np.ndarray:
    """Rows sin(2 pi h f0 t + phase[h]) for h = 1..H via the complex rotation recurrence."""
    z = np.exp(2j * np.pi * f0 * np.arange(n) / sample_rate)
    basis = np.empty((len(phase), n))
    cur = z * np.exp(1j * phase[0])
    for h in range(len(phase)):
        basis[h] = cur.imag
        if h + 1 < len(phase):
            cur = cur * z * np.exp(1j * (phase[h + 1] - phase[h]))
    return basis


def _utterance(i: int, spec: CorpusSpec, inv: _Inventory) -> Utterance:
    rng = seeding.rng_for(spec.seed, seeding.CORPUS, i)
    spk = int(rng.integers(spec.n_speakers))
    f0 = inv.f0[spk]
    phones, bounds = _segments(rng, spec)
    n = spec.n_samples
    n_harm = int((0.95 * spec.sample_rate / 2) // f0)
    hfreq = f0 * np.arange(1, n_harm + 1)
    tilt = 10.0 ** (inv.tilt[spk] * hfreq / 1000.0 / 20.0)
    amps = np.stack([phone_envelope(hfreq, inv.formants[p]) * tilt for p in range(spec.n_phones)])
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n_harm)
    basis = _harmonic_basis(f0, phase, n, spec.sample_rate)
    gains = 10.0 ** (rng.uniform(-spec.segment_gain_db, spec.segment_gain_db, size=len(phones)) / 20.0)
    width = max(1, int(spec.coarticulation_ms * 1e-3 * spec.sample_rate))
    weights = _crossfade_weights(bounds, n, width) * gains[:, None]
    x = ((amps[phones] @ basis) * weights).sum(axis=0)
    x *= PEAK_LEVEL / np.max(np.abs(x))
    centres = np.arange(spec.n_frames) * spec.frame_shift + spec.frame_length // 2
    labels = phones[np.searchsorted(bounds, centres, side="right") - 1]
    utt = Utterance(f"utt{i:05d}", x, spec.sample_rate, labels.astype(np.int64), spk, x.copy())
    if spec.noise_snr_db is not None:
        utt = add_noise(utt, spec.noise_snr_db, seeding.rng_for(spec.seed, seeding.NOISE, i))
    return utt


def add_noise(utt: Utterance, snr_db: float, rng: np.random.Generator) -> Utterance:
    """White Gaussian noise scaled so the realised SNR is exactly ``snr_db``."""
    clean = utt.clean_samples if utt.clean_samples is not None else utt.samples
    noise = rng.standard_normal(len(clean))
    p_clean = np.mean(clean ** 2)
    noise *= np.sqrt(p_clean / (np.mean(noise ** 2) * 10.0 ** (snr_db / 10.0)))
    return replace(utt, samples=clean + noise, clean_samples=clean.copy())


def generate(spec: CorpusSpec = CorpusSpec()) -> list[Utterance]:
    inv = _inventory(spec)
    return [_utterance(i, spec, inv) for i in range(spec.n_utterances)]


def noisy_copy(corpus: list[Utterance], snr_db: float, seed: int) -> list[Utterance]:
    """Same utterances with fresh white noise; noise stream keyed by utterance id."""
    return [add_noise(u, snr_db, seeding.rng_for(seed, seeding.NOISE, u.id)) for u in corpus]


def measured_snr_db(utt: Utterance) -> float:
    noise = utt.samples - utt.clean_samples
    return float(10.0 * np.log10(np.sum(utt.clean_samples ** 2) / np.sum(noise ** 2)))


# -- WAV / manifest ---------------------------------------------------------

def read_wav(path) -> tuple[np.ndarray, int]:
    """16-bit PCM mono WAV to float samples in [-1, 1)."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM mono WAV")
        data = w.readframes(w.getnframes())
        sr = w.getframerate()
    return np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0, sr


def write_wav(path, samples, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(pcm.tobytes())


def _read_labels(path: Path) -> np.ndarray:
    if path.suffix == ".tensor":
        from .formats import read_tensor
        return read_tensor(path).astype(np.int64)
    return np.array(path.read_text().split(), dtype=np.int64)


def load_manifest(path) -> list[Utterance]:
    """Read ``<id>\\t<wav>\\t[speaker_id]\\t[phone-label-path]`` records.

    Relative paths resolve against the manifest's directory. A sibling
    ``<stem>.clean.wav`` next to an utterance's WAV is loaded as its clean
    reference.
    """
    path = Path(path)
    base = path.parent
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) < 2 or len(fields) > 4 or not fields[0] or not fields[1]:
            raise ValueError(f"{path}:{lineno}: malformed manifest line")
        uid, wav_path = fields[0], base / fields[1]
        if not wav_path.is_file():
            raise FileNotFoundError(f"{path}:{lineno}: missing audio file {wav_path}")
        samples, sr = read_wav(wav_path)
        speaker = None
        if len(fields) > 2 and fields[2]:
            try:
                speaker = int(fields[2])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: speaker_id {fields[2]!r} is not an integer") from None
        labels = None
        if len(fields) > 3 and fields[3]:
            lab_path = base / fields[3]
            if not lab_path.is_file():
                raise FileNotFoundError(f"{path}:{lineno}: missing label file {lab_path}")
            labels = _read_labels(lab_path)
        clean_path = wav_path.with_name(wav_path.stem + ".clean.wav")
        clean = read_wav(clean_path)[0] if clean_path.is_file() else None
        out.append(Utterance(uid, samples, sr, labels, speaker, clean))
    return out
