"""Audio buffers, SNR mixing, synthetic speech/noise, log-mel features and WAV I/O."""
from __future__ import annotations

import json
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import (EmptyCorpus, InvalidLabel, InvalidParams, IoError, LengthMismatch,
                     SchemaMismatch, SilentNoise, SilentReference, TooShort, UnsupportedFormat)

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10
NOISE_KINDS = ("white", "band", "tone")


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise UnsupportedFormat(f"expected mono samples, got shape {samples.shape}")
        if samples.size < 1:
            raise TooShort("empty audio buffer")
        if self.sample_rate <= 0:
            raise InvalidParams(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise InvalidParams("audio contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


def _energy(v: np.ndarray) -> float:
    return float(np.dot(v, v))


def mix_at_snr(s: AudioBuffer, n: AudioBuffer, snr_db: float) -> tuple[AudioBuffer, AudioBuffer]:
    """Scale ``n`` so that snr(s, k*n) equals ``snr_db`` and return (s + k*n, k*n)."""
    if len(s) != len(n) or s.sample_rate != n.sample_rate:
        raise LengthMismatch(f"speech {len(s)}@{s.sample_rate} vs noise {len(n)}@{n.sample_rate}")
    if not np.isfinite(snr_db):
        raise InvalidParams("snr_db must be finite")
    es, en = _energy(s.samples), _energy(n.samples)
    if es == 0.0:
        raise SilentReference("speech is silent")
    if en == 0.0:
        raise SilentNoise("noise is silent")
    k = np.sqrt(es / (en * 10.0 ** (snr_db / 10.0)))
    scaled = k * n.samples
    return AudioBuffer(s.samples + scaled, s.sample_rate), AudioBuffer(scaled, s.sample_rate)


# ---------------------------------------------------------------- synthesis

# (F1, F2, F3) in Hz for ten vowel-like targets
_VOWELS = np.array([
    [730, 1090, 2440], [270, 2290, 3010], [300, 870, 2240], [530, 1840, 2480],
    [570, 840, 2410], [660, 1720, 2410], [490, 1350, 1690], [520, 1190, 2390],
    [390, 1990, 2550], [440, 1020, 2240],
], dtype=np.float64)
_BANDWIDTHS = np.array([90.0, 120.0, 170.0])
_FORMANT_GAINS = np.array([1.0, 0.6, 0.35])


def _class_vowels(label: int) -> tuple[np.ndarray, np.ndarray]:
    k = len(_VOWELS)
    return _VOWELS[label % k], _VOWELS[(3 * label + 1 + label // k) % k]


def synth_speech(label: int, duration_s: float, seed: int, sample_rate: int = SAMPLE_RATE,
                 n_classes: int = 10) -> AudioBuffer:
    """Harmonic stack whose formants glide between two class-specific vowels.

    Pitch contour, formant jitter, syllable phase and level come from ``seed``;
    the vowel pair and syllable rate come from ``label``.
    """
    if not 0 <= label < n_classes:
        raise InvalidLabel(f"label {label} outside [0, {n_classes})")
    if duration_s <= 0:
        raise InvalidParams("duration_s must be positive")
    rng = np.random.default_rng([seed, label, 7919])
    t_len = max(1, int(round(duration_s * sample_rate)))
    t = np.arange(t_len) / sample_rate

    f0_base = rng.uniform(95.0, 210.0)
    drift = rng.uniform(-0.15, 0.15)
    f0 = f0_base * (1.0 + drift * t / max(duration_s, 1e-9)
                    + 0.02 * np.sin(2 * np.pi * rng.uniform(3.0, 6.0) * t))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate

    va, vb = _class_vowels(label)
    jitter = 1.0 + rng.uniform(-0.04, 0.04, size=3)
    glide = 0.5 - 0.5 * np.cos(np.pi * np.clip(t / duration_s, 0.0, 1.0))
    formants = (va[None, :] * (1 - glide[:, None]) + vb[None, :] * glide[:, None]) * jitter

    nyq = sample_rate / 2
    n_harm = int(0.95 * nyq / (f0_base * 1.2))
    out = np.zeros(t_len)
    harm_phase = rng.uniform(0, 2 * np.pi, size=n_harm)
    for h in range(1, n_harm + 1):
        fh = h * f0
        amp = np.zeros(t_len)
        for j in range(3):
            amp += _FORMANT_GAINS[j] * np.exp(-0.5 * ((fh - formants[:, j]) / _BANDWIDTHS[j]) ** 2)
        amp += 0.02 / h
        amp *= fh < nyq
        out += amp * np.sin(h * phase + harm_phase[h - 1])

    rate = 2.5 + 0.75 * (label % 4)
    syll = 0.55 + 0.45 * np.sin(np.pi * rate * t + rng.uniform(0, np.pi)) ** 2
    ramp = np.minimum(1.0, np.minimum(t, duration_s - t) / 0.02)
    out *= syll * np.clip(ramp, 0.0, 1.0)
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= rng.uniform(0.4, 0.9) / peak
    return AudioBuffer(out, sample_rate)


def synth_noise(kind: str, duration_s: float, seed: int, sample_rate: int = SAMPLE_RATE,
                freq_hz: float = 4000.0, low_hz: float = 500.0, high_hz: float = 2000.0) -> AudioBuffer:
    """Unit-RMS noise: seeded Gaussian (``white``), a sine (``tone``) or FFT band-passed
    Gaussian (``band``)."""
    if duration_s <= 0:
        raise InvalidParams("duration_s must be positive")
    nyq = sample_rate / 2
    t_len = max(1, int(round(duration_s * sample_rate)))
    rng = np.random.default_rng([seed, 104729])
    if kind == "white":
        out = rng.standard_normal(t_len)
    elif kind == "tone":
        if not 0 < freq_hz < nyq:
            raise InvalidParams(f"tone frequency {freq_hz} Hz not below Nyquist {nyq} Hz")
        t = np.arange(t_len) / sample_rate
        out = np.sin(2 * np.pi * freq_hz * t + rng.uniform(0, 2 * np.pi))
    elif kind == "band":
        if not 0 <= low_hz < high_hz <= nyq:
            raise InvalidParams(f"band [{low_hz}, {high_hz}] Hz invalid for Nyquist {nyq} Hz")
        spec = np.fft.rfft(rng.standard_normal(t_len))
        freqs = np.fft.rfftfreq(t_len, 1.0 / sample_rate)
        spec[(freqs < low_hz) | (freqs > high_hz)] = 0.0
        out = np.fft.irfft(spec, n=t_len)
    else:
        raise InvalidParams(f"unknown noise kind {kind!r}")
    rms = np.sqrt(np.mean(out ** 2))
    if rms == 0:
        raise InvalidParams("noise parameters produced silence")
    return AudioBuffer(out / rms, sample_rate)


# --------------------------------------------------------------------- mel

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelFilterbank:
    n_mels: int
    n_fft: int
    window_ms: float
    hop_ms: float
    sample_rate: int
    weights: np.ndarray = field(repr=False)

    @property
    def win_length(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000.0))

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.win_length) // self.hop_length + 1


def make_mel_filterbank(n_mels: int = 32, window_ms: float = 25.0, hop_ms: float = 10.0,
                        sample_rate: int = SAMPLE_RATE, n_fft: int | None = None) -> MelFilterbank:
    """HTK-style triangular filters spanning [0, Nyquist].

    A filter narrower than one FFT bin would be all zeros; such rows fall back
    to a unit weight on the bin nearest the filter centre.
    """
    win = int(round(window_ms * sample_rate / 1000.0))
    hop = int(round(hop_ms * sample_rate / 1000.0))
    if n_mels < 1 or win < 1 or hop < 1 or win < hop:
        raise InvalidParams(f"bad filterbank geometry n_mels={n_mels} win={win} hop={hop}")
    if n_fft is None:
        n_fft = 1 << int(np.ceil(np.log2(win)))
    if n_fft < win:
        raise InvalidParams("n_fft shorter than the window")
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    weights = np.zeros((n_mels, bins.size))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bins - lo) / (mid - lo)
        down = (hi - bins) / (hi - mid)
        weights[m] = np.maximum(0.0, np.minimum(up, down))
        if weights[m].sum() <= 0:
            weights[m, int(np.argmin(np.abs(bins - mid)))] = 1.0
    return MelFilterbank(n_mels, n_fft, window_ms, hop_ms, sample_rate, weights)


def analysis_window(win_length: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win_length) / win_length)


def dft_basis(fb: MelFilterbank) -> tuple[np.ndarray, np.ndarray]:
    """Windowed real/imaginary DFT kernels of shape (win_length, n_bins).

    Convolving a signal with these at stride hop_length yields the same power
    spectrum as :func:`logmel` computes with ``rfft``.
    """
    win = fb.win_length
    k = np.arange(fb.n_bins)
    t = np.arange(win)
    arg = 2 * np.pi * np.outer(t, k) / fb.n_fft
    w = analysis_window(win)[:, None]
    return w * np.cos(arg), -w * np.sin(arg)


def logmel(x: AudioBuffer | np.ndarray, fb: MelFilterbank) -> np.ndarray:
    """(frames, n_mels) log mel power with frames = (len - win) // hop + 1."""
    samples = x.samples if isinstance(x, AudioBuffer) else np.asarray(x, dtype=np.float64)
    win, hop = fb.win_length, fb.hop_length
    if samples.size < win:
        raise TooShort(f"{samples.size} samples shorter than one {win}-sample window")
    n = fb.n_frames(samples.size)
    frames = np.lib.stride_tricks.sliding_window_view(samples, win)[::hop][:n]
    spec = np.fft.rfft(frames * analysis_window(win), n=fb.n_fft, axis=-1)
    power = spec.real ** 2 + spec.imag ** 2
    return np.log(power @ fb.weights.T + LOG_FLOOR)


# --------------------------------------------------------------------- WAV

def wav_write(path, buf: AudioBuffer) -> None:
    """Write 16-bit PCM mono. Samples are clipped to the representable range."""
    pcm = np.clip(np.round(buf.samples * 32768.0), -32768, 32767).astype("<i2")
    try:
        with wave.open(str(path), "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(int(buf.sample_rate))
            w.writeframes(pcm.tobytes())
    except OSError as exc:
        raise IoError(str(exc)) from exc


def wav_read(path) -> AudioBuffer:
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            if w.getcomptype() != "NONE" or width != 2:
                raise UnsupportedFormat(f"{path}: only 16-bit PCM is supported")
            if channels != 1:
                raise UnsupportedFormat(f"{path}: expected mono, found {channels} channels")
            n = w.getnframes()
            raw = w.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise UnsupportedFormat(f"{path}: {exc}") from exc
    except FileNotFoundError as exc:
        raise IoError(str(exc)) from exc
    if len(raw) != 2 * n or n == 0:
        raise UnsupportedFormat(f"{path}: truncated data chunk")
    return AudioBuffer(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate)


# ------------------------------------------------------------------ corpus

@dataclass
class CorpusEntry:
    id: str
    path: str
    kind: str
    label: int | None
    duration_s: float
    seed: int
    params: dict = field(default_factory=dict)


@dataclass
class CorpusManifest:
    entries: list[CorpusEntry]
    sample_rate: int = SAMPLE_RATE
    n_classes: int = 10
    version: int = 1

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise SchemaMismatch("corpus ids are not unique")
        for e in self.entries:
            if e.kind == "speech":
                if e.label is None or not 0 <= e.label < self.n_classes:
                    raise SchemaMismatch(f"{e.id}: speech entries need a valid label")
            elif e.kind == "noise":
                if e.label is not None:
                    raise SchemaMismatch(f"{e.id}: noise entries carry no label")
            else:
                raise SchemaMismatch(f"{e.id}: unknown kind {e.kind!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CorpusManifest":
        try:
            doc = json.loads(text)
            entries = [CorpusEntry(**e) for e in doc.pop("entries")]
            return cls(entries=entries, **doc)
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise SchemaMismatch(f"bad corpus manifest: {exc}") from exc


def plan_corpus(n_per_class: int, n_noise_per_kind: int, seed: int, duration_s: float = 1.0,
                n_classes: int = 10, sample_rate: int = SAMPLE_RATE, prefix: str = "") -> CorpusManifest:
    """Deterministic manifest of speech items and white/band/tone noise items."""
    rng = np.random.default_rng([seed, 31337])
    entries = []
    for label in range(n_classes):
        for i in range(n_per_class):
            sid = f"{prefix}sp{label:02d}_{i:04d}"
            entries.append(CorpusEntry(sid, f"speech/{sid}.wav", "speech", label, duration_s,
                                       int(rng.integers(2**31))))
    for kind in NOISE_KINDS:
        for i in range(n_noise_per_kind):
            nid = f"{prefix}{kind}_{i:04d}"
            params: dict = {"kind": kind}
            if kind == "tone":
                params["freq_hz"] = float(np.round(rng.uniform(300.0, 6000.0), 1))
            elif kind == "band":
                lo = float(np.round(rng.uniform(100.0, 4000.0), 1))
                params["low_hz"] = lo
                params["high_hz"] = float(np.round(lo + rng.uniform(400.0, 2500.0), 1))
            entries.append(CorpusEntry(nid, f"noise/{nid}.wav", "noise", None, duration_s,
                                       int(rng.integers(2**31)), params))
    return CorpusManifest(entries, sample_rate, n_classes)


def render_entry(entry: CorpusEntry, manifest: CorpusManifest) -> AudioBuffer:
    if entry.kind == "speech":
        return synth_speech(entry.label, entry.duration_s, entry.seed, manifest.sample_rate,
                            manifest.n_classes)
    params = dict(entry.params)
    kind = params.pop("kind")
    return synth_noise(kind, entry.duration_s, entry.seed, manifest.sample_rate, **params)


class Corpus:
    """A manifest plus the rendered audio of every entry, held in memory."""

    def __init__(self, manifest: CorpusManifest, audio: dict[str, AudioBuffer]):
        if not manifest.entries:
            raise EmptyCorpus("corpus has no entries")
        self.manifest = manifest
        self.audio = audio
        self.speech = [e for e in manifest.entries if e.kind == "speech"]
        self.noise = [e for e in manifest.entries if e.kind == "noise"]

    @classmethod
    def render(cls, manifest: CorpusManifest) -> "Corpus":
        return cls(manifest, {e.id: render_entry(e, manifest) for e in manifest.entries})

    @classmethod
    def load(cls, root) -> "Corpus":
        root = Path(root)
        try:
            manifest = CorpusManifest.from_json((root / "manifest.json").read_text())
        except FileNotFoundError as exc:
            raise IoError(str(exc)) from exc
        audio = {}
        for e in manifest.entries:
            buf = wav_read(root / e.path)
            if e.kind == "noise":
                v = buf.samples
                buf = AudioBuffer(v / np.sqrt(np.mean(v ** 2)), buf.sample_rate)
            audio[e.id] = buf
        return cls(manifest, audio)

    def save(self, root) -> Path:
        """Write every entry as PCM16. Unit-RMS noise is peak-normalized on disk
        and restored to unit RMS by :meth:`load`."""
        root = Path(root)
        for e in self.manifest.entries:
            (root / e.path).parent.mkdir(parents=True, exist_ok=True)
            buf = self.audio[e.id]
            if e.kind == "noise":
                buf = AudioBuffer(buf.samples * (0.99 / np.max(np.abs(buf.samples))),
                                  buf.sample_rate)
            wav_write(root / e.path, buf)
        (root / "manifest.json").write_text(self.manifest.to_json())
        return root / "manifest.json"

    def noise_of_kind(self, kind: str) -> list[CorpusEntry]:
        return [e for e in self.noise if e.params.get("kind") == kind]
