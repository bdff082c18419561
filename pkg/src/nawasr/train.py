"""Adam, the training loop and the Baseline/A/B/C/D experiment presets."""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as tn
from .audio import read_wav
from .dataset import SplitSpec, batch_iter, build_manifest, compose_split, split_by_label
from .loss import InfeasibleTargetError, LossWeight, cross_entropy, ctc_loss, joint_loss
from .metrics import MetricsReport, evaluate, format_records, format_table
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .textnorm import Vocab

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainHyper:
    batch_size: int = 8
    learning_rate: float = 1e-3
    epochs: int = 300
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0  # global gradient norm cap; 0 disables
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if not (self.learning_rate > 0 and self.eps > 0):
            raise ValueError("learning_rate and eps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be non-negative")

    def paper(self):
        """Published settings: batch 8, learning rate 1e-5, 30 epochs."""
        return replace(self, batch_size=8, learning_rate=1e-5, epochs=30)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    noise_fraction: float
    noise_head_enabled: bool
    alpha_mode: str
    alpha_init: float = 0.01
    fusion_enabled: bool = False
    model: ModelConfig = ModelConfig()
    hyper: TrainHyper = TrainHyper()

    def __post_init__(self):
        if self.alpha_mode not in ("fixed", "trainable"):
            raise ValueError(f"alpha_mode must be 'fixed' or 'trainable', got {self.alpha_mode!r}")
        if not 0.0 <= self.noise_fraction < 1.0:
            raise ValueError(f"noise_fraction must lie in [0, 1), got {self.noise_fraction}")
        if self.model.noise_head_enabled != self.noise_head_enabled or self.model.fusion_enabled != self.fusion_enabled:
            object.__setattr__(
                self,
                "model",
                replace(self.model, noise_head_enabled=self.noise_head_enabled, fusion_enabled=self.fusion_enabled),
            )
        if self.fusion_enabled and not self.noise_head_enabled:
            raise ValueError("fusion requires the noise head in these experiments")

    def loss_weight(self):
        return LossWeight(self.alpha_mode, self.alpha_init)


PRESETS = {
    "baseline": ExperimentConfig("baseline", 0.0, False, "fixed"),
    "A": ExperimentConfig("A", 0.05, False, "fixed"),
    "B": ExperimentConfig("B", 0.05, True, "fixed"),
    "C": ExperimentConfig("C", 0.05, True, "trainable"),
    "D": ExperimentConfig("D", 0.05, True, "trainable", fusion_enabled=True),
}


def get_preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class TrainState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    loss_history: list = field(default_factory=list)
    alpha_trajectory: list = field(default_factory=list)


def clip_grads(grads, max_norm):
    """Scale ``grads`` together so their global L2 norm is at most ``max_norm`` (0 leaves them alone)."""
    if max_norm <= 0:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {n: g * (max_norm / norm) for n, g in grads.items()}


def adam_step(params, grads, state, hyper):
    """One Adam update of every parameter in ``params`` (a name -> Parameter map)."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}; step aborted")
    grads = clip_grads(grads, hyper.grad_clip)
    state.step += 1
    t = state.step
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.value = p.value - hyper.learning_rate * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    return params, state


# ---------------------------------------------------------------------------
# training


def trainable_params(model, weight):
    params = {n: p for n, p in model.params.items() if p.trainable}
    if weight.trainable:
        params[weight.rho.name] = weight.rho
    return params


def utterance_loss(model, w, clip, target, label, weight, rho=None):
    out = model(clip, w)
    l_ctc = ctc_loss(out.ctc_log_probs, target)
    l_ce = cross_entropy(out.noise_probs, label) if out.noise_probs is not None else None
    return joint_loss(l_ctc, l_ce, weight, rho)


def train_epoch(model, split, weight, hyper, state, vocab, epoch, loader=None):
    """One pass over ``split``: per-utterance losses, batch mean, one Adam step per batch."""
    params = trainable_params(model, weight)
    sums = np.zeros(3)
    count = 0
    first_step = len(state.alpha_trajectory)
    for batch in batch_iter(split, hyper.batch_size, hyper.seed, epoch, vocab, loader):
        with tn.Tape() as tape:
            w = model.weights(tape)
            rho = tape.watch(weight.rho.value) if weight.trainable else None
            totals = []
            for i, (clip, target, label) in enumerate(batch.items):
                try:
                    br = utterance_loss(model, w, clip, target, label, weight, rho)
                except InfeasibleTargetError as exc:
                    raise InfeasibleTargetError(f"{batch.entries[i].path}: {exc}") from None
                sums += (br.l_ctc, br.l_ce, br.l_total)
                count += 1
                totals.append(br.total)
            acc = totals[0]
            for t in totals[1:]:
                acc = tn.add(acc, t)
            tape.backward(tn.scale(acc, 1.0 / len(totals)))
            grads = {n: tape.grad(w[n]) for n in model.params if n in params}
            if rho is not None:
                grads[weight.rho.name] = tape.grad(rho)
        adam_step(params, grads, state, hyper)
        state.alpha_trajectory.append(weight.value)
    mean = sums / count
    summary = {
        "epoch": epoch,
        "mean_l_ctc": float(mean[0]),
        "mean_l_ce": float(mean[1]),
        "alpha": weight.value,
        "mean_l_total": float(mean[2]),
        "alpha_steps": state.alpha_trajectory[first_step:],
    }
    state.loss_history.append(summary)
    return state, summary


def cached_loader():
    cache = {}

    def load(entry):
        key = str(entry.path)
        clip = cache.get(key)
        if clip is None:
            clip = cache[key] = read_wav(entry.path)
        return clip

    return load


# ---------------------------------------------------------------------------
# experiment driver

STATE_FILE = "state.nawv"


def _save_state(path, model, weight, state, epoch, best_wer):
    blob = {f"model.{n}": p.value for n, p in model.params.items()}
    for n in state.m:
        blob[f"adam.m.{n}"] = state.m[n]
        blob[f"adam.v.{n}"] = state.v[n]
    if weight.trainable:
        blob["loss.rho"] = weight.rho.value
    blob["meta.step"] = np.array(float(state.step))
    blob["meta.epoch"] = np.array(float(epoch))
    blob["meta.best_wer"] = np.array(best_wer)
    save_checkpoint(path, blob)


def _load_state(path, model, weight, state):
    blob = load_checkpoint(path)
    model.load_state_dict({k[6:]: v for k, v in blob.items() if k.startswith("model.")})
    for k, v in blob.items():
        if k.startswith("adam.m."):
            state.m[k[7:]] = v
        elif k.startswith("adam.v."):
            state.v[k[7:]] = v
    if weight.trainable:
        weight.rho.assign(blob["loss.rho"])
    state.step = int(blob["meta.step"])
    return int(blob["meta.epoch"]), float(blob["meta.best_wer"])


def run_experiment(preset, data_dir, out_dir, resume=False, progress=None):
    """Train one preset on ``data_dir/{train,validation,test}`` and evaluate on test.

    Writes ``train_log.jsonl``, ``best.nawv`` (lowest validation WER, later
    epochs win ties), ``last.nawv``, a resumable ``state.nawv`` and the
    ``report.txt``/``report.jsonl`` pair into ``out_dir``.
    """
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hyper = preset.hyper
    vocab = Vocab.from_alphabet()
    if preset.model.vocab_size != len(vocab):
        raise ValueError(f"model vocab_size {preset.model.vocab_size} != vocabulary size {len(vocab)}")

    train_entries = build_manifest(data_dir / "train")
    val_speech, val_noise = split_by_label(build_manifest(data_dir / "validation"))
    test_speech, test_noise = split_by_label(build_manifest(data_dir / "test"))
    speech, noise = split_by_label(train_entries)
    split = compose_split(speech, noise, SplitSpec("train", preset.noise_fraction, hyper.seed))

    loader = cached_loader()
    model = Model.init(preset.model, hyper.seed)
    weight = preset.loss_weight()
    state = TrainState()
    log_path = out_dir / "train_log.jsonl"
    start, best_wer = 0, math.inf
    if resume and (out_dir / STATE_FILE).is_file():
        start, best_wer = _load_state(out_dir / STATE_FILE, model, weight, state)
        kept = log_path.read_text().splitlines()[:start] if log_path.is_file() else []
        log_path.write_text("".join(line + "\n" for line in kept))
    else:
        log_path.write_text("")
    (out_dir / "config.txt").write_text(config_text(preset))

    for epoch in range(start, hyper.epochs):
        state, summary = train_epoch(model, split, weight, hyper, state, vocab, epoch, loader)
        val = evaluate(model, val_speech, val_noise, vocab, loader, name=preset.name)
        summary["validation_wer"] = val.wer
        summary["validation_noise_accuracy"] = val.noise_accuracy
        with log_path.open("a") as fh:
            fh.write(json.dumps(summary) + "\n")
        if summary["validation_wer"] <= best_wer:
            best_wer = summary["validation_wer"]
            model.save(out_dir / "best.nawv")
        model.save(out_dir / "last.nawv")
        _save_state(out_dir / STATE_FILE, model, weight, state, epoch + 1, best_wer)
        if progress:
            progress(preset.name, summary)

    best = Model.load(out_dir / "best.nawv", preset.model)
    report = evaluate(
        best,
        test_speech,
        test_noise,
        vocab,
        loader,
        name=preset.name,
        alpha_final=weight.value if preset.noise_head_enabled else None,
    )
    write_reports(out_dir / "report", [report])
    return report


def write_reports(stem, reports):
    stem = Path(stem)
    stem.with_suffix(".txt").write_text(format_table(reports))
    stem.with_suffix(".jsonl").write_text(format_records(reports))


def read_reports(path):
    return [MetricsReport(**json.loads(line)) for line in Path(path).read_text().splitlines() if line]


def config_text(preset):
    from .config import experiment_to_text

    return experiment_to_text(preset)
