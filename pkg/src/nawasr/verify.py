"""Finite-difference check of the full joint objective on a tiny model."""

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .audio import SynthSpec, synth_noise, synth_utterance
from .dataset import random_transcript
from .loss import LossWeight, cross_entropy, ctc_loss, joint_loss
from .model import Model, ModelConfig, forward
from .textnorm import Vocab, encode

TINY_CONFIG = ModelConfig(
    conv_stack=((4, 10, 5), (4, 8, 4), (4, 4, 4)),
    model_dim=8,
    n_layers=2,
    n_heads=2,
    ffn_dim=16,
    vocab_size=10,
    noise_head_enabled=True,
    fusion_enabled=True,
)


@dataclass
class GradCheckResult:
    max_error: float
    worst: str
    per_param: dict
    n_params: int


def joint_objective(model, weight, items):
    """Sum of joint losses over ``(clip, target, label)`` items, as a closure over weights."""

    def f(w):
        total = None
        for clip, target, label in items:
            out = forward(model, clip, w)
            br = joint_loss(
                ctc_loss(out.ctc_log_probs, target),
                cross_entropy(out.noise_probs, label),
                weight,
                w.get("loss.rho"),
            )
            total = br.total if total is None else tn.add(total, br.total)
        return total

    return f


def gradcheck_suite(seed=0, eps=1e-5, corrupt=0.0, config=TINY_CONFIG):
    """One speech and one noise utterance through the dual-head fused model with trainable alpha."""
    vocab = Vocab.from_alphabet()
    rng = np.random.default_rng(seed)
    spec = SynthSpec()
    text = random_transcript(rng, spec.alphabet, max_words=2, max_word_len=2)
    speech = synth_utterance(text, spec, seed=int(rng.integers(2**31)))
    noise = synth_noise("babble", 0.1, seed=int(rng.integers(2**31)), spec=spec)
    model = Model.init(config, seed)
    weight = LossWeight("trainable", 0.01)
    params = dict(model.params)
    params[weight.rho.name] = weight.rho
    items = [(speech, encode(text, vocab), 0), (noise, [], 1)]
    report = tn.grad_check_detail(joint_objective(model, weight, items), params, eps, corrupt)
    worst = max(report, key=report.get)
    n = sum(p.value.size for p in params.values())
    return GradCheckResult(report[worst], worst, report, n)
