import json
import math
from dataclasses import replace

import numpy as np
import pytest

from nawasr.dataset import NOISE, SPEECH, ManifestEntry, synth_corpus
from nawasr.loss import LossWeight
from nawasr.metrics import MetricsReport
from nawasr.model import Model, load_checkpoint
from nawasr.tensor import Parameter
from nawasr.textnorm import Vocab
from nawasr.train import (
    PRESETS,
    ExperimentConfig,
    TrainHyper,
    TrainState,
    adam_step,
    clip_grads,
    get_preset,
    read_reports,
    run_experiment,
    train_epoch,
)
from nawasr.audio import SynthSpec, synth_utterance
from nawasr.verify import TINY_CONFIG


def scalar_adam(g_seq, p0, lr, b1=0.9, b2=0.999, eps=1e-8):
    p, m, v = p0, 0.0, 0.0
    for t, g in enumerate(g_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p = p - lr * mhat / (math.sqrt(vhat) + eps)
    return p


def test_adam_first_step_magnitude():
    hyper = TrainHyper(learning_rate=1e-3)
    params = {"w": Parameter("w", np.array([2.0]))}
    adam_step(params, {"w": np.array([1.0])}, TrainState(), hyper)
    assert 2.0 - params["w"].value[0] == pytest.approx(1e-3 / (1 + 1e-8), abs=1e-15)


def test_adam_zero_gradient_leaves_parameters():
    params = {"w": Parameter("w", np.array([[1.0, -2.0]]))}
    adam_step(params, {"w": np.zeros((1, 2))}, TrainState(), TrainHyper())
    assert np.array_equal(params["w"].value, [[1.0, -2.0]])


def test_adam_two_steps_match_scalar_oracle():
    hyper = TrainHyper(learning_rate=1e-3, grad_clip=0.0)
    params = {"w": Parameter("w", np.array([0.5, -1.5, 3.0]))}
    g = np.array([0.3, -2.0, 1e-4])
    state = TrainState()
    for _ in range(2):
        adam_step(params, {"w": g}, state, hyper)
    expected = [scalar_adam([gi, gi], p0, 1e-3) for gi, p0 in zip(g, [0.5, -1.5, 3.0])]
    np.testing.assert_allclose(params["w"].value, expected, atol=1e-12, rtol=0)
    assert state.step == 2 and state.m["w"].shape == (3,)


@pytest.mark.parametrize("seed", range(5))
def test_adam_matches_oracle_on_varying_gradients(seed):
    rng = np.random.default_rng(seed)
    hyper = TrainHyper(learning_rate=3e-3, grad_clip=0.0)
    p0 = rng.normal(size=4)
    gs = rng.normal(size=(6, 4))
    params = {"w": Parameter("w", p0)}
    state = TrainState()
    for g in gs:
        adam_step(params, {"w": g}, state, hyper)
    expected = [scalar_adam(gs[:, i], p0[i], 3e-3) for i in range(4)]
    np.testing.assert_allclose(params["w"].value, expected, atol=1e-12, rtol=0)


@pytest.mark.parametrize("seed", range(5))
def test_clip_grads_caps_global_norm_and_keeps_direction(seed):
    rng = np.random.default_rng(seed)
    grads = {"a": rng.normal(size=(3, 2)) * 10, "b": rng.normal(size=4) * 10}
    clipped = clip_grads(grads, 1.0)
    norm = np.sqrt(sum(np.sum(g * g) for g in clipped.values()))
    assert norm == pytest.approx(1.0, abs=1e-12)
    ratio = clipped["a"].ravel()[0] / grads["a"].ravel()[0]
    for n in grads:
        np.testing.assert_allclose(clipped[n], grads[n] * ratio, rtol=1e-12)


def test_clip_grads_leaves_small_or_disabled_gradients():
    grads = {"a": np.array([0.3, -0.4])}
    assert clip_grads(grads, 1.0)["a"] is grads["a"]
    big = {"a": np.array([30.0, -40.0])}
    assert clip_grads(big, 0.0)["a"] is big["a"]


def test_adam_applies_clipping_before_moments():
    # a gradient of norm 50 clipped to 1 gives the same first moment as the unit vector
    state = TrainState()
    params = {"w": Parameter("w", np.zeros(2))}
    adam_step(params, {"w": np.array([30.0, -40.0])}, state, TrainHyper(grad_clip=1.0))
    np.testing.assert_allclose(state.m["w"], 0.1 * np.array([0.6, -0.8]), rtol=1e-12)


def test_adam_rejects_non_finite_gradient():
    params = {"w": Parameter("w", np.zeros(2)), "enc.b": Parameter("enc.b", np.zeros(2))}
    state = TrainState()
    with pytest.raises(FloatingPointError, match="enc.b"):
        adam_step(params, {"w": np.zeros(2), "enc.b": np.array([0.0, np.nan])}, state, TrainHyper())
    assert state.step == 0 and np.array_equal(params["w"].value, np.zeros(2))


def test_hyper_validation_and_paper_settings():
    with pytest.raises(ValueError):
        TrainHyper(beta1=1.0)
    with pytest.raises(ValueError):
        TrainHyper(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainHyper(grad_clip=-1.0)
    assert (TrainHyper().learning_rate, TrainHyper().grad_clip) == (1e-3, 1.0)
    paper = TrainHyper().paper()
    assert (paper.batch_size, paper.learning_rate, paper.epochs) == (8, 1e-5, 30)


def test_presets_table():
    rows = {
        n: (p.noise_fraction, p.noise_head_enabled, p.alpha_mode, p.alpha_init, p.fusion_enabled)
        for n, p in PRESETS.items()
    }
    assert rows == {
        "baseline": (0.0, False, "fixed", 0.01, False),
        "A": (0.05, False, "fixed", 0.01, False),
        "B": (0.05, True, "fixed", 0.01, False),
        "C": (0.05, True, "trainable", 0.01, False),
        "D": (0.05, True, "trainable", 0.01, True),
    }
    for p in PRESETS.values():
        assert p.model.noise_head_enabled == p.noise_head_enabled
        assert p.model.fusion_enabled == p.fusion_enabled
    with pytest.raises(KeyError):
        get_preset("E")
    with pytest.raises(AttributeError):
        PRESETS["B"].alpha_mode = "trainable"


def test_experiment_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig("x", 0.05, True, "learned")
    with pytest.raises(ValueError):
        ExperimentConfig("x", 1.0, True, "fixed")
    with pytest.raises(ValueError):
        ExperimentConfig("x", 0.05, False, "fixed", fusion_enabled=True)


def memory_split(n_speech, n_noise):
    """Entries whose loader synthesises audio on the fly from the transcript."""
    texts = ["ab", "c|d", "ee", "fgh", "a|b|c", "hd", "bb", "ch"]
    entries = [ManifestEntry(f"s{i}.wav", texts[i % len(texts)], SPEECH, 0.1) for i in range(n_speech)]
    entries += [ManifestEntry(f"n{i}.wav", "", NOISE, 0.1) for i in range(n_noise)]
    spec = SynthSpec()

    def loader(entry):
        if entry.label == NOISE:
            return synth_utterance("||", spec)
        return synth_utterance(entry.transcript, spec, seed=len(entry.audio_path))

    return entries, loader


def tiny_experiment(name, **hyper):
    exp = get_preset(name)
    model = replace(TINY_CONFIG, noise_head_enabled=exp.noise_head_enabled, fusion_enabled=exp.fusion_enabled)
    return replace(exp, model=model, hyper=replace(exp.hyper, **hyper))


def test_epoch_step_count_and_summary():
    exp = tiny_experiment("C", batch_size=8)
    split, loader = memory_split(9, 1)
    model = Model.init(exp.model)
    weight = exp.loss_weight()
    state, summary = train_epoch(model, split, weight, exp.hyper, TrainState(), Vocab.from_alphabet(), 0, loader)
    assert state.step == 2
    assert len(state.alpha_trajectory) == 2 and all(a > 0 for a in state.alpha_trajectory)
    assert set(summary) == {"epoch", "mean_l_ctc", "mean_l_ce", "alpha", "mean_l_total", "alpha_steps"}
    assert summary["alpha_steps"] == state.alpha_trajectory
    assert summary["mean_l_ce"] > 0
    assert summary["alpha"] != 0.01


def test_baseline_has_no_ce_contribution():
    exp = tiny_experiment("baseline")
    split, loader = memory_split(6, 0)
    model = Model.init(exp.model)
    _, summary = train_epoch(
        model, split, exp.loss_weight(), exp.hyper, TrainState(), Vocab.from_alphabet(), 0, loader
    )
    assert summary["mean_l_ce"] == 0.0
    assert summary["mean_l_total"] == summary["mean_l_ctc"]


def test_infeasible_target_names_entry():
    exp = tiny_experiment("A")
    split = [ManifestEntry("long.wav", "abcdefgh|abcdefgh", SPEECH, 0.1)]
    with pytest.raises(ValueError, match="long.wav"):
        train_epoch(
            Model.init(exp.model),
            split,
            exp.loss_weight(),
            exp.hyper,
            TrainState(),
            Vocab.from_alphabet(),
            0,
            lambda e: synth_utterance("a", SynthSpec()),
        )


def test_fixed_alpha_stays_constant():
    exp = tiny_experiment("B")
    split, loader = memory_split(9, 1)
    weight = exp.loss_weight()
    state = TrainState()
    model = Model.init(exp.model)
    for epoch in range(2):
        state, _ = train_epoch(model, split, weight, exp.hyper, state, Vocab.from_alphabet(), epoch, loader)
    assert state.alpha_trajectory == [0.01] * 4


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    synth_corpus(root, train_utts=19, eval_utts=4, noise_frac=0.05, seed=3)
    return root


def test_run_experiment_outputs(corpus, tmp_path):
    exp = tiny_experiment("B", epochs=3)
    report = run_experiment(exp, corpus, tmp_path)
    for name in ("config.txt", "train_log.jsonl", "best.nawv", "last.nawv", "state.nawv", "report.txt", "report.jsonl"):
        assert (tmp_path / name).is_file(), name
    records = [json.loads(line) for line in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records] == [0, 1, 2]
    for r in records:
        assert {"epoch", "mean_l_ctc", "mean_l_ce", "alpha", "mean_l_total", "validation_wer"} <= set(r)
        assert r["mean_l_total"] == pytest.approx(r["mean_l_ctc"] + r["alpha"] * r["mean_l_ce"], rel=1e-12)
    assert report.alpha_final == 0.01
    assert report.noise_rule == "head"
    assert (report.n_speech_eval, report.n_noise_eval) == (2, 2)
    assert read_reports(tmp_path / "report.jsonl") == [report]
    assert "name = B" in (tmp_path / "config.txt").read_text()


def test_baseline_reports_transcript_rule(corpus, tmp_path):
    report = run_experiment(tiny_experiment("baseline", epochs=1), corpus, tmp_path)
    assert report.noise_rule == "transcript"
    assert report.alpha_final is None
    assert report.noise_accuracy == report.noise_accuracy_transcript


def test_trainable_alpha_moves(corpus, tmp_path):
    report = run_experiment(tiny_experiment("C", epochs=2), corpus, tmp_path)
    assert report.alpha_final > 0 and report.alpha_final != 0.01


def test_resume_matches_uninterrupted_run(corpus, tmp_path):
    full = run_experiment(tiny_experiment("C", epochs=3), corpus, tmp_path / "full")
    run_experiment(tiny_experiment("C", epochs=2), corpus, tmp_path / "part")
    resumed = run_experiment(tiny_experiment("C", epochs=3), corpus, tmp_path / "part", resume=True)
    assert resumed == full
    for name in ("best.nawv", "last.nawv", "state.nawv", "train_log.jsonl"):
        assert (tmp_path / "part" / name).read_bytes() == (tmp_path / "full" / name).read_bytes(), name


def test_state_file_holds_optimizer_moments(corpus, tmp_path):
    run_experiment(tiny_experiment("C", epochs=1), corpus, tmp_path)
    state = load_checkpoint(tmp_path / "state.nawv")
    assert "loss.rho" in state and "adam.m.loss.rho" in state
    assert state["meta.epoch"] == 1.0


def test_missing_manifest_is_reported(tmp_path):
    with pytest.raises(FileNotFoundError, match="train"):
        run_experiment(tiny_experiment("A", epochs=1), tmp_path / "empty", tmp_path / "out")


def test_report_type():
    assert MetricsReport.__dataclass_fields__.keys() >= {"config", "noise_accuracy", "wer", "cer", "alpha_final"}
