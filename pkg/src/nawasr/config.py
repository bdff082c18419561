"""Flat ``key = value`` experiment files.

One assignment per line, ``#`` starts a comment. ``name`` picks a preset;
every other key overrides one field of it. Keys mirror the field names of
:class:`ExperimentConfig`, :class:`ModelConfig` and :class:`TrainHyper`.
"""

from dataclasses import fields, replace
from pathlib import Path

from .train import TrainHyper, get_preset


class ConfigError(ValueError):
    def __init__(self, message, lineno=None):
        super().__init__(f"line {lineno}: {message}" if lineno else message)
        self.lineno = lineno


def _bool(text):
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _conv_stack(text):
    # "32:10:5,32:8:4,32:4:4" -> ((32, 10, 5), ...)
    layers = []
    for part in text.split(","):
        vals = tuple(int(v) for v in part.strip().split(":"))
        if len(vals) != 3 or min(vals) < 1:
            raise ValueError(f"conv layer must be out:kernel:stride with positive ints, got {part!r}")
        layers.append(vals)
    return tuple(layers)


def _format_conv_stack(stack):
    return ",".join(":".join(str(v) for v in layer) for layer in stack)


_EXPERIMENT_KEYS = {
    "name": str,
    "noise_fraction": float,
    "noise_head_enabled": _bool,
    "alpha_mode": str,
    "alpha_init": float,
    "fusion_enabled": _bool,
}
_MODEL_KEYS = {
    "conv_stack": _conv_stack,
    "model_dim": int,
    "n_layers": int,
    "n_heads": int,
    "ffn_dim": int,
    "vocab_size": int,
    "fusion_target": str,
}
_HYPER_KEYS = {f.name: type(f.default) for f in fields(TrainHyper)}
KEYS = {**_EXPERIMENT_KEYS, **_MODEL_KEYS, **_HYPER_KEYS, "paper_hparams": _bool}


def parse_config(text):
    """Return ``{key: (typed value, line number)}``."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        try:
            out[key] = (KEYS[key](value), lineno)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", lineno) from None
    return out


def experiment_from_config(parsed):
    if "name" not in parsed:
        raise ConfigError("missing required key 'name'")
    name, lineno = parsed["name"]
    try:
        preset = get_preset(name)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0]), lineno) from None

    def pick(keys):
        return {k: parsed[k][0] for k in keys if k in parsed and k != "name"}

    try:
        hyper = preset.hyper
        if parsed.get("paper_hparams", (False, 0))[0]:
            hyper = hyper.paper()
        hyper = replace(hyper, **pick(_HYPER_KEYS))
        model = replace(preset.model, **pick(_MODEL_KEYS))
        return replace(preset, model=model, hyper=hyper, **pick(_EXPERIMENT_KEYS))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_experiment(path):
    return experiment_from_config(parse_config(Path(path).read_text(encoding="utf-8")))


def experiment_to_text(exp):
    lines = [f"{k} = {getattr(exp, k)}" for k in _EXPERIMENT_KEYS]
    for k in _MODEL_KEYS:
        v = getattr(exp.model, k)
        lines.append(f"{k} = {_format_conv_stack(v) if k == 'conv_stack' else v}")
    lines += [f"{k} = {getattr(exp.hyper, k)}" for k in _HYPER_KEYS]
    return "\n".join(lines) + "\n"

