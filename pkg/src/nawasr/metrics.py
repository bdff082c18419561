"""Greedy CTC decoding, WER/CER, noise accuracy and report formatting."""

import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import kernels
from .dataset import NOISE, SPEECH
from .textnorm import PIPE, decode


def greedy_decode(log_probs, vocab):
    """Best path: per-frame argmax, merge repeats, drop blanks."""
    data = getattr(log_probs, "data", log_probs)
    best = np.argmax(data, axis=-1)
    ids = [int(k) for i, k in enumerate(best) if k != vocab.blank and (i == 0 or k != best[i - 1])]
    return decode(ids, vocab)


def edit_distance(ref, hyp):
    """Levenshtein distance over arbitrary hashable tokens."""
    table = {}
    a = np.fromiter((table.setdefault(t, len(table)) for t in ref), dtype=np.int64)
    b = np.fromiter((table.setdefault(t, len(table)) for t in hyp), dtype=np.int64)
    return kernels.levenshtein(a, b)


def words(text):
    return [w for w in text.split(PIPE) if w]


def word_errors(ref, hyp):
    r = words(ref)
    if not r:
        raise ValueError("WER is undefined for an empty reference")
    return edit_distance(r, words(hyp)), len(r)


def char_errors(ref, hyp):
    if not ref:
        raise ValueError("CER is undefined for an empty reference")
    return edit_distance(ref, hyp), len(ref)


def wer(ref, hyp):
    d, n = word_errors(ref, hyp)
    return d / n


def cer(ref, hyp):
    d, n = char_errors(ref, hyp)
    return d / n


def infer_noise_from_transcript(decoded):
    """Empty output means noise. Pipes alone carry no speech, so they count as empty."""
    return NOISE if not decoded.replace(PIPE, "") else SPEECH


@dataclass
class MetricsReport:
    config: str
    noise_accuracy: float
    wer: float
    cer: float
    n_speech_eval: int
    n_noise_eval: int
    alpha_final: Optional[float] = None
    noise_rule: str = "transcript"
    noise_accuracy_transcript: Optional[float] = None

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=False)


def evaluate(model, speech_split, noise_split, vocab, loader, name="model", alpha_final=None):
    """Corpus-pooled WER/CER on speech items; noise accuracy over both splits.

    Noise accuracy uses the noise head when the model has one and the
    empty-transcription rule otherwise; the transcript-rule figure is always
    reported alongside.
    """
    if not speech_split or not noise_split:
        raise ValueError("evaluation needs non-empty speech and noise splits")
    has_head = model.config.noise_head_enabled
    w_err = w_tot = c_err = c_tot = 0
    correct = correct_rule = 0
    for entry in list(speech_split) + list(noise_split):
        out = model(loader(entry))
        hyp = greedy_decode(out.ctc_log_probs, vocab)
        by_rule = infer_noise_from_transcript(hyp)
        if has_head:
            probs = out.noise_probs.data
            by_head = NOISE if probs[1] > probs[0] else SPEECH
        else:
            by_head = by_rule
        correct += by_head == entry.label
        correct_rule += by_rule == entry.label
        if entry.label == SPEECH:
            d, n = word_errors(entry.transcript, hyp)
            w_err += d
            w_tot += n
            d, n = char_errors(entry.transcript, hyp)
            c_err += d
            c_tot += n
    total = len(speech_split) + len(noise_split)
    return MetricsReport(
        config=name,
        noise_accuracy=correct / total,
        wer=w_err / w_tot,
        cer=c_err / c_tot,
        n_speech_eval=len(speech_split),
        n_noise_eval=len(noise_split),
        alpha_final=alpha_final,
        noise_rule="head" if has_head else "transcript",
        noise_accuracy_transcript=correct_rule / total,
    )


def speech_wer(model, speech_split, vocab, loader):
    """Corpus WER over speech items only (checkpoint selection)."""
    err = tot = 0
    for entry in speech_split:
        hyp = greedy_decode(model(loader(entry)).ctc_log_probs, vocab)
        d, n = word_errors(entry.transcript, hyp)
        err += d
        tot += n
    return err / tot


def format_table(reports):
    header = ("Configuration", "Noise Acc (%)", "WER (%)", "CER (%)")
    rows = [
        (r.config, f"{100 * r.noise_accuracy:.1f}", f"{100 * r.wer:.2f}", f"{100 * r.cer:.2f}")
        for r in reports
    ]
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(header)]
    fmt = lambda cells: "  ".join(  # noqa: E731
        c.ljust(widths[i]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(cells)
    )
    lines = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


def format_records(reports):
    return "".join(r.to_json() + "\n" for r in reports)
