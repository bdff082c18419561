"""Miniature wav2vec2-style encoder with a CTC head and an optional noise head.

Topology: strided conv feature extractor -> layer-normed linear feature
projection plus sinusoidal positions -> pre-norm transformer blocks ->
(optional fusion of projected conv features with the context) -> heads.
"""

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as tn
from .tensor import Parameter, Tensor

MAGIC = b"NAWV1"
DEFAULT_CONV_STACK = ((32, 10, 5), (32, 8, 4), (32, 4, 4))


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    conv_stack: tuple = DEFAULT_CONV_STACK
    model_dim: int = 32
    n_layers: int = 2
    n_heads: int = 2
    ffn_dim: int = 64
    vocab_size: int = 10
    noise_head_enabled: bool = False
    fusion_enabled: bool = False
    # which heads read the fused features: "both" or "noise"
    fusion_target: str = "both"

    def __post_init__(self):
        object.__setattr__(self, "conv_stack", tuple(tuple(int(v) for v in layer) for layer in self.conv_stack))
        if not self.conv_stack:
            raise ValueError("conv_stack must have at least one layer")
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.fusion_target not in ("both", "noise"):
            raise ValueError(f"fusion_target must be 'both' or 'noise', got {self.fusion_target!r}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")

    @property
    def min_samples(self):
        """Shortest waveform that yields one output frame."""
        n = 1
        for _, k, s in reversed(self.conv_stack):
            n = (n - 1) * s + k
        return n

    def frame_count(self, n_samples):
        n = n_samples
        for _, k, s in self.conv_stack:
            if n < k:
                return 0
            n = (n - k) // s + 1
        return n


@dataclass
class ModelOutput:
    ctc_log_probs: Tensor
    noise_probs: Optional[Tensor]
    frame_count: int
    attention: list = field(default_factory=list)


def _param_shapes(cfg):
    shapes = {}
    c_in = 1
    for i, (c_out, k, _) in enumerate(cfg.conv_stack):
        shapes[f"conv.{i}.weight"] = ((k, c_in, c_out), k * c_in)
        shapes[f"conv.{i}.bias"] = ((c_out,), k * c_in)
        c_in = c_out
    d = cfg.model_dim
    shapes["feature_proj.norm.gain"] = ((c_in,), None)
    shapes["feature_proj.norm.bias"] = ((c_in,), None)
    shapes["feature_proj.weight"] = ((c_in, d), c_in)
    shapes["feature_proj.bias"] = ((d,), c_in)
    for l in range(cfg.n_layers):
        p = f"encoder.layer{l}"
        shapes[f"{p}.norm1.gain"] = ((d,), None)
        shapes[f"{p}.norm1.bias"] = ((d,), None)
        shapes[f"{p}.attn.wqkv"] = ((d, 3 * d), d)
        shapes[f"{p}.attn.bqkv"] = ((3 * d,), d)
        shapes[f"{p}.attn.wo"] = ((d, d), d)
        shapes[f"{p}.attn.bo"] = ((d,), d)
        shapes[f"{p}.norm2.gain"] = ((d,), None)
        shapes[f"{p}.norm2.bias"] = ((d,), None)
        shapes[f"{p}.ffn.w1"] = ((d, cfg.ffn_dim), d)
        shapes[f"{p}.ffn.b1"] = ((cfg.ffn_dim,), d)
        shapes[f"{p}.ffn.w2"] = ((cfg.ffn_dim, d), cfg.ffn_dim)
        shapes[f"{p}.ffn.b2"] = ((d,), cfg.ffn_dim)
    shapes["encoder.norm.gain"] = ((d,), None)
    shapes["encoder.norm.bias"] = ((d,), None)
    if cfg.fusion_enabled:
        shapes["fusion.weight"] = ((2 * d, d), 2 * d)
        shapes["fusion.bias"] = ((d,), 2 * d)
    shapes["ctc_head.weight"] = ((d, cfg.vocab_size), d)
    shapes["ctc_head.bias"] = ((cfg.vocab_size,), d)
    if cfg.noise_head_enabled:
        shapes["noise_head.weight"] = ((d, 2), d)
        shapes["noise_head.bias"] = ((2,), d)
    return shapes


class Model:
    def __init__(self, config, params):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config, seed=0):
        """Uniform +-sqrt(1/fan_in) weights; layer-norm gains 1 and biases 0.

        Each parameter draws from its own stream keyed by (seed, name), so
        configurations that share a parameter name start from the same values.
        """
        params = {}
        for name, (shape, fan_in) in _param_shapes(config).items():
            if fan_in is None:
                value = np.ones(shape) if name.endswith(".gain") else np.zeros(shape)
            else:
                rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
                bound = math.sqrt(1.0 / fan_in)
                value = rng.uniform(-bound, bound, size=shape)
            params[name] = Parameter(name, value)
        return cls(config, params)

    def num_parameters(self):
        return sum(p.value.size for p in self.params.values())

    def weights(self, tape=None):
        """Tensors for every parameter, registered as leaves when ``tape`` is given."""
        if tape is None:
            return {n: Tensor(p.value) for n, p in self.params.items()}
        return {n: tape.watch(p.value) for n, p in self.params.items()}

    def state_dict(self):
        return {n: p.value for n, p in self.params.items()}

    def load_state_dict(self, state):
        expected = _param_shapes(self.config)
        if set(state) != set(expected):
            missing = sorted(set(expected) - set(state))
            extra = sorted(set(state) - set(expected))
            raise CheckpointError(f"parameter names differ from config (missing {missing}, unexpected {extra})")
        for name, (shape, _) in expected.items():
            if tuple(state[name].shape) != shape:
                raise CheckpointError(f"{name}: checkpoint shape {state[name].shape} != config shape {shape}")
            self.params[name].assign(state[name])

    def save(self, path):
        save_checkpoint(path, self.state_dict())

    @classmethod
    def load(cls, path, config):
        model = cls.init(config)
        model.load_state_dict(load_checkpoint(path))
        return model

    def __call__(self, samples, weights=None):
        return forward(self, samples, weights)


# ---------------------------------------------------------------------------
# building blocks


def linear(x, w, prefix, weight="weight", bias="bias"):
    return tn.add_bias(tn.matmul(x, w[f"{prefix}.{weight}"]), w[f"{prefix}.{bias}"])


def conv_extract(samples, config, w):
    """Conv stack with ReLU after each layer; returns ``[T', C]``."""
    samples = samples.samples if hasattr(samples, "samples") else np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < config.min_samples:
        raise ValueError(
            f"waveform has {samples.shape[0]} samples; the conv stack needs at least {config.min_samples}"
        )
    x = Tensor(samples.reshape(-1, 1))
    for i, (_, _, stride) in enumerate(config.conv_stack):
        x = tn.relu(tn.conv1d(x, w[f"conv.{i}.weight"], w[f"conv.{i}.bias"], stride))
    return x


def project_features(features, config, w):
    """Layer norm, linear map to model_dim, plus the sinusoidal position table."""
    h = tn.layer_norm(features, w["feature_proj.norm.gain"], w["feature_proj.norm.bias"])
    h = linear(h, w, "feature_proj")
    return tn.add(h, tn.position_table(h.shape[0], config.model_dim))


def self_attention(x, w, prefix, n_heads, keep=None):
    T, d = x.shape
    dk = d // n_heads
    qkv = linear(x, w, prefix, "wqkv", "bqkv")
    heads = []
    for h in range(n_heads):
        q = tn.slice_axis(qkv, h * dk, (h + 1) * dk, axis=1)
        k = tn.slice_axis(qkv, d + h * dk, d + (h + 1) * dk, axis=1)
        v = tn.slice_axis(qkv, 2 * d + h * dk, 2 * d + (h + 1) * dk, axis=1)
        scores = tn.scale(tn.matmul(q, tn.transpose(k)), 1.0 / math.sqrt(dk))
        attn = tn.exp(tn.log_softmax(scores))
        if keep is not None:
            keep.append(attn.data)
        heads.append(tn.matmul(attn, v))
    merged = heads[0] if n_heads == 1 else tn.concat(heads, axis=-1)
    return linear(merged, w, prefix, "wo", "bo")


def encoder_block(x, w, prefix, n_heads, keep=None):
    a = tn.layer_norm(x, w[f"{prefix}.norm1.gain"], w[f"{prefix}.norm1.bias"])
    x = tn.add(x, self_attention(a, w, f"{prefix}.attn", n_heads, keep))
    f = tn.layer_norm(x, w[f"{prefix}.norm2.gain"], w[f"{prefix}.norm2.bias"])
    f = tn.relu(linear(f, w, f"{prefix}.ffn", "w1", "b1"))
    return tn.add(x, linear(f, w, f"{prefix}.ffn", "w2", "b2"))


def encode_context(projected, config, w, keep=None):
    """Pre-norm transformer stack over the projected features."""
    if projected.shape[0] < 1:
        raise ValueError("encoder input has no frames")
    h = projected
    for l in range(config.n_layers):
        h = encoder_block(h, w, f"encoder.layer{l}", config.n_heads, keep)
    return tn.layer_norm(h, w["encoder.norm.gain"], w["encoder.norm.bias"])


def fuse(conv_projected, context, w):
    """Concatenate along features and map ``2*d -> d``."""
    if conv_projected.shape[0] != context.shape[0]:
        raise ValueError(f"fusion frame mismatch: {conv_projected.shape[0]} vs {context.shape[0]}")
    return linear(tn.concat([conv_projected, context], axis=-1), w, "fusion")


def ctc_head(h, w):
    return tn.log_softmax(linear(h, w, "ctc_head"))


def noise_head(h, w):
    """Mean-pool over time, linear to two classes, softmax. Index 0 speech, 1 noise."""
    pooled = tn.reshape(tn.mean(h, axis=0), (1, h.shape[1]))
    logits = linear(pooled, w, "noise_head")
    return tn.reshape(tn.exp(tn.log_softmax(logits)), (2,))


def forward(model, samples, weights=None, keep_attention=False):
    """Run the configured network on one waveform.

    Pass ``weights=model.weights(tape)`` inside an active tape to train; with
    ``weights=None`` the parameters enter as constants and nothing is recorded.
    """
    cfg = model.config
    w = model.weights() if weights is None else weights
    keep = [] if keep_attention else None
    feats = conv_extract(samples, cfg, w)
    projected = project_features(feats, cfg, w)
    context = encode_context(projected, cfg, w, keep)
    ctc_in = noise_in = context
    if cfg.fusion_enabled:
        fused = fuse(projected, context, w)
        noise_in = fused
        if cfg.fusion_target == "both":
            ctc_in = fused
    log_probs = ctc_head(ctc_in, w)
    probs = noise_head(noise_in, w) if cfg.noise_head_enabled else None
    return ModelOutput(log_probs, probs, log_probs.shape[0], keep or [])


# ---------------------------------------------------------------------------
# checkpoint file


def save_checkpoint(path, state):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<I", len(state))]
    for name, value in state.items():
        value = np.asarray(value, dtype="<f8")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value).tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    if buf[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:5]!r}")
    pos = 5

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        out = buf[pos : pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<I", take(4))
        name = take(n_name).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        state[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return state
