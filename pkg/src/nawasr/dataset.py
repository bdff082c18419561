"""Manifests, split composition, batching and the synthetic corpus builder."""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import NOISE_KINDS, SynthSpec, read_wav, synth_noise, synth_utterance, write_wav
from .textnorm import LETTERS, TranscriptError, encode, normalize_transcript

MANIFEST_NAME = "manifest.jsonl"
SPEECH, NOISE = "speech", "noise"
LABEL_IDS = {SPEECH: 0, NOISE: 1}
SPLITS = ("train", "validation", "test")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    audio_path: str
    transcript: str
    label: str
    duration_s: float
    root: Path = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.label not in LABEL_IDS:
            raise ManifestError(f"label must be 'speech' or 'noise', got {self.label!r}")
        if self.label == NOISE and self.transcript:
            raise ManifestError(f"noise entry {self.audio_path} has a non-empty transcript")
        if self.label == SPEECH:
            if not self.transcript:
                raise ManifestError(f"speech entry {self.audio_path} has an empty transcript")
            try:
                normalized = normalize_transcript(self.transcript, LETTERS)
            except TranscriptError as exc:
                raise ManifestError(f"{self.audio_path}: {exc}") from None
            if normalized != self.transcript:
                raise ManifestError(f"{self.audio_path}: transcript {self.transcript!r} is not normalized")

    @property
    def label_id(self):
        return LABEL_IDS[self.label]

    @property
    def path(self):
        return Path(self.audio_path) if self.root is None else Path(self.root) / self.audio_path

    def to_record(self):
        return {
            "audio_path": self.audio_path,
            "transcript": self.transcript,
            "label": self.label,
            "duration_s": self.duration_s,
        }


def parse_manifest(text, root=None, source="<manifest>"):
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise ValueError("record is not an object")
            if set(rec) != {"audio_path", "transcript", "label", "duration_s"}:
                raise ValueError(f"unexpected keys {sorted(rec)}")
            if not isinstance(rec["audio_path"], str) or not isinstance(rec["transcript"], str):
                raise ValueError("audio_path and transcript must be strings")
            if isinstance(rec["duration_s"], bool) or not isinstance(rec["duration_s"], (int, float)):
                raise ValueError("duration_s must be a number")
            entries.append(ManifestEntry(root=root, **rec))
        except (ValueError, TypeError) as exc:
            raise ManifestError(f"{source}:{lineno}: {exc}") from None
    return entries


def serialize_manifest(entries):
    return "".join(json.dumps(e.to_record(), ensure_ascii=False) + "\n" for e in entries)


def write_manifest(data_dir, entries):
    path = Path(data_dir) / MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_manifest(entries), encoding="utf-8")
    return path


def build_manifest(data_dir):
    """Parse ``data_dir/manifest.jsonl`` and check every referenced WAV exists."""
    data_dir = Path(data_dir)
    path = data_dir / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = parse_manifest(path.read_text(encoding="utf-8"), root=data_dir, source=str(path))
    for e in entries:
        if not e.path.is_file():
            raise FileNotFoundError(f"manifest {path} references missing audio {e.path}")
    return entries


@dataclass(frozen=True)
class SplitSpec:
    name: str
    noise_fraction: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.noise_fraction <= 1.0:
            raise ValueError(f"noise_fraction must lie in [0, 1], got {self.noise_fraction}")


def noise_count(n_speech, noise_fraction):
    """Noise items needed so they form ``noise_fraction`` of the combined set."""
    if noise_fraction >= 1.0:
        raise ValueError("noise_fraction of 1 leaves no room for speech")
    return int(math.floor(noise_fraction / (1.0 - noise_fraction) * n_speech + 0.5))


def compose_split(speech, noise, spec):
    k = noise_count(len(speech), spec.noise_fraction)
    if k > len(noise):
        raise ValueError(f"split {spec.name!r} needs {k} noise entries but only {len(noise)} are available")
    rng = np.random.default_rng(spec.seed)
    picked = [noise[i] for i in sorted(rng.choice(len(noise), size=k, replace=False))] if k else []
    pool = list(speech) + picked
    return [pool[i] for i in rng.permutation(len(pool))]


@dataclass
class Batch:
    items: list
    index: int
    entries: list = field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.items)


def batch_iter(split, batch_size, seed, epoch, vocab, loader=None):
    """Deterministic shuffled batches of ``(clip, target ids, label id)``.

    Audio is read when a batch is produced, through ``loader`` (default
    :func:`read_wav` on the entry path).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    if not split:
        raise ValueError("cannot iterate an empty split")
    loader = loader or (lambda e: read_wav(e.path))
    order = np.random.default_rng([seed, epoch]).permutation(len(split))

    def gen():
        for b, start in enumerate(range(0, len(order), batch_size)):
            chosen = [split[i] for i in order[start : start + batch_size]]
            yield Batch([(loader(e), encode(e.transcript, vocab), e.label_id) for e in chosen], b, chosen)

    return gen()


# ---------------------------------------------------------------------------
# synthetic corpus


def random_transcript(rng, alphabet, max_words=3, max_word_len=4):
    """A normalized transcript of 1..max_words random words."""
    words = []
    for _ in range(int(rng.integers(1, max_words + 1))):
        n = int(rng.integers(1, max_word_len + 1))
        words.append("".join(alphabet[int(i)] for i in rng.integers(0, len(alphabet), n)))
    # dress it up as raw text so normalisation does real work
    raw = " ".join(w.capitalize() if rng.random() < 0.3 else w for w in words)
    if rng.random() < 0.5:
        raw += rng.choice([".", "!", "?", ","])
    return normalize_transcript(raw, alphabet)


def synth_split(out_dir, name, n_speech, noise_fraction, seed, spec=SynthSpec(), taken=None):
    """Write WAVs plus a composed manifest for one split; returns the entries.

    ``taken`` collects transcripts already used by other splits so split
    contents stay disjoint.
    """
    split_dir = Path(out_dir) / name
    taken = set() if taken is None else taken
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    text_seq, audio_seq, noise_seq, mix_seq = ss.spawn(4)
    rng = np.random.default_rng(text_seq)
    audio_seeds = audio_seq.generate_state(max(n_speech, 1))

    speech = []
    for i in range(n_speech):
        text = random_transcript(rng, spec.alphabet)
        while text in taken:
            text = random_transcript(rng, spec.alphabet)
        taken.add(text)
        clip = synth_utterance(text, spec, seed=int(audio_seeds[i]))
        rel = f"wav/speech_{i:05d}.wav"
        write_wav(split_dir / rel, clip)
        speech.append(ManifestEntry(rel, text, SPEECH, clip.duration_s, root=split_dir))

    k = noise_count(n_speech, noise_fraction)
    nrng = np.random.default_rng(noise_seq)
    # kinds cycle from a random offset so small splits still see every kind
    offset = int(nrng.integers(len(NOISE_KINDS)))
    noise = []
    for i in range(k):
        kind = NOISE_KINDS[(offset + i) % len(NOISE_KINDS)]
        dur = round(float(nrng.uniform(0.2, 0.6)), 3)
        clip = synth_noise(kind, dur, seed=int(nrng.integers(2**32)), spec=spec)
        rel = f"wav/noise_{i:05d}_{kind}.wav"
        write_wav(split_dir / rel, clip)
        noise.append(ManifestEntry(rel, "", NOISE, clip.duration_s, root=split_dir))

    mix_seed = int(mix_seq.generate_state(1)[0])
    entries = compose_split(speech, noise, SplitSpec(name, noise_fraction, mix_seed))
    write_manifest(split_dir, entries)
    return entries


def synth_corpus(out_dir, train_utts, eval_utts, noise_frac=0.05, seed=0, spec=SynthSpec()):
    """Train split with ``noise_frac`` noise; validation and test at 50/50.

    ``train_utts`` counts speech utterances; ``eval_utts`` is the size of each
    evaluation split. The three splits use independent seed streams.
    """
    if not 0.0 <= noise_frac < 1.0:
        raise ValueError(f"noise fraction must lie in [0, 1), got {noise_frac}")
    if train_utts < 1 or eval_utts < 2:
        raise ValueError("need at least one training and two evaluation utterances")
    seeds = np.random.SeedSequence(seed).spawn(len(SPLITS))
    taken = set()
    out = {}
    eval_speech = (eval_utts + 1) // 2
    for name, s in zip(SPLITS, seeds):
        if name == "train":
            out[name] = synth_split(out_dir, name, train_utts, noise_frac, s, spec, taken)
        else:
            out[name] = synth_split(out_dir, name, eval_speech, 0.5, s, spec, taken)
    return out


def split_by_label(entries):
    speech = [e for e in entries if e.label == SPEECH]
    noise = [e for e in entries if e.label == NOISE]
    return speech, noise
