"""Tone-alphabet speech proxy, synthetic noise, SNR mixing and WAV I/O."""

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .textnorm import DEFAULT_ALPHABET, PIPE

SAMPLE_RATE = 16000
NOISE_KINDS = ("white", "babble", "hum")


class AudioFormatError(ValueError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.isfinite(samples).all():
            raise ValueError("audio samples must be finite")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self):
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class SynthSpec:
    alphabet: str = DEFAULT_ALPHABET
    base_hz: float = 400.0
    step_hz: float = 200.0
    char_s: float = 0.05
    ramp_s: float = 0.005
    amplitude: float = 0.3
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        top = self.frequency(len(self.alphabet) - 1)
        if top >= self.sample_rate / 2:
            raise ValueError(f"letter frequency {top} Hz is not below Nyquist")
        if self.step_hz <= 0:
            raise ValueError("step_hz must be positive")

    def frequency(self, index):
        return self.base_hz + self.step_hz * index

    @property
    def char_samples(self):
        return int(round(self.char_s * self.sample_rate))


def _ramp_envelope(n, ramp):
    env = np.ones(n)
    if ramp > 0:
        rise = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = rise
        env[n - ramp :] = rise[::-1]
    return env


def synth_utterance(text, spec=SynthSpec(), seed=0):
    """Render each character as a pure tone (random phase), pipes as silence."""
    letters = {ch: i for i, ch in enumerate(spec.alphabet)}
    bad = sorted({ch for ch in text if ch != PIPE and ch not in letters})
    if bad:
        raise ValueError(f"characters outside synth alphabet: {''.join(bad)!r}")
    n = spec.char_samples
    ramp = int(round(spec.ramp_s * spec.sample_rate))
    env = _ramp_envelope(n, ramp)
    t = np.arange(n) / spec.sample_rate
    rng = np.random.default_rng(seed)
    out = np.zeros(n * len(text))
    for k, ch in enumerate(text):
        phase = rng.uniform(0.0, 2 * np.pi)
        if ch == PIPE:
            continue
        f = spec.frequency(letters[ch])
        out[k * n : (k + 1) * n] = spec.amplitude * env * np.sin(2 * np.pi * f * t + phase)
    return AudioClip(out, spec.sample_rate)


def _peak_normalize(x, peak):
    m = np.max(np.abs(x))
    return x if m == 0 else x * (peak / m)


def synth_noise(kind, duration_s, seed=0, spec=SynthSpec()):
    """White, babble (three off-grid tones) or mains hum, peak at ``spec.amplitude``.

    Babble tones sit at letter frequencies shifted by +100 Hz, so they overlap
    the speech band without matching any letter.
    """
    if kind not in NOISE_KINDS:
        raise ValueError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    if not duration_s > 0:
        raise ValueError(f"noise duration must be positive, got {duration_s}")
    sr = spec.sample_rate
    n = int(round(duration_s * sr))
    rng = np.random.default_rng(seed)
    t = np.arange(n) / sr
    if kind == "white":
        x = rng.uniform(-1.0, 1.0, n)
    elif kind == "babble":
        idx = rng.choice(len(spec.alphabet), size=3, replace=False)
        x = np.zeros(n)
        for i in idx:
            f = spec.frequency(int(i)) + spec.step_hz / 2
            x += np.sin(2 * np.pi * f * t + rng.uniform(0.0, 2 * np.pi))
    else:
        x = np.zeros(n)
        for h in range(1, 5):
            x += np.sin(2 * np.pi * 50.0 * h * t + rng.uniform(0.0, 2 * np.pi)) / h
    return AudioClip(_peak_normalize(x, spec.amplitude), sr)


def snr_gain(speech, noise, snr_db):
    p_s = float(np.mean(speech.samples**2))
    p_n = float(np.mean(noise.samples[: len(speech)] ** 2))
    if p_s == 0:
        raise ValueError("speech clip is silent; SNR is undefined")
    if p_n == 0:
        raise ValueError("noise clip is silent; SNR is undefined")
    return float(np.sqrt(p_s / (p_n * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(speech, noise, snr_db):
    """``speech + g * noise`` with ``g`` set by the requested SNR in dB."""
    if speech.sample_rate != noise.sample_rate:
        raise ValueError("sample rates differ")
    reps = -(-len(speech) // max(len(noise), 1))
    tiled = AudioClip(np.tile(noise.samples, reps)[: len(speech)], noise.sample_rate)
    g = snr_gain(speech, tiled, snr_db)
    out = speech.samples + g * tiled.samples
    if np.max(np.abs(out)) > 1.0:
        out = _peak_normalize(out, 1.0)
    return AudioClip(out, speech.sample_rate)


def write_wav(path, clip):
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such audio file: {path}")
    try:
        with wave.open(str(path), "rb") as r:
            channels, width, rate = r.getnchannels(), r.getsampwidth(), r.getframerate()
            if channels != 1:
                raise AudioFormatError(f"{path}: expected mono, found {channels} channels")
            if width != 2:
                raise AudioFormatError(f"{path}: expected 16-bit PCM, found {8 * width}-bit")
            raw = r.readframes(r.getnframes())
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise AudioFormatError(f"{path}: truncated header") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples, rate)
