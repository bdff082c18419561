"""CTC loss, noise cross-entropy and the weighted joint objective."""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from . import tensor as tn
from .tensor import Parameter, Tensor

BLANK = 0
# stands in for log(0) inside the tape recursion; keeps every value finite
LOG_ZERO = -1e30
CE_FLOOR = 1e-12


class InfeasibleTargetError(ValueError):
    pass


def extend_target(target, blank=BLANK):
    """Blank-interleaved label sequence of length ``2U + 1``."""
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def min_frames(target):
    """Frames needed to emit ``target``: one per label plus one per adjacent repeat."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _check_target(log_probs, target):
    target = [int(t) for t in target]
    T, V = log_probs.shape
    if any(t == BLANK or not 0 <= t < V for t in target):
        raise ValueError(f"target {target} contains blank or out-of-range ids (V={V})")
    need = min_frames(target)
    if T < need:
        raise InfeasibleTargetError(f"CTC target of length {len(target)} needs {need} frames, got {T}")
    return target


def ctc_loss(log_probs, target):
    """``-log P(target | log_probs)`` as one tape node.

    The forward-backward sums run in :mod:`nawasr.kernels`; the node's
    gradient is the negated state-occupancy posterior per (frame, symbol).
    """
    target = _check_target(log_probs, target)
    nll, grad = kernels.ctc_alpha_beta(log_probs.data, extend_target(target))
    return tn.record("ctc", np.asarray(nll), (log_probs,), lambda g: (g.reshape(-1)[0] * grad,))


def ctc_loss_recursive(log_probs, target):
    """Same quantity built from tape primitives (matmul, slice, concat, logaddexp).

    Slower; kept as the reference path whose gradients come from the generic
    backward pass.
    """
    target = _check_target(log_probs, target)
    T, V = log_probs.shape
    if not target:
        return tn.scale(tn.sum(tn.slice_axis(log_probs, BLANK, BLANK + 1, axis=1)), -1.0)

    ext = extend_target(target)
    S = ext.shape[0]
    onehot = np.zeros((V, S))
    onehot[ext, np.arange(S)] = 1.0
    emit = tn.matmul(log_probs, Tensor(onehot))
    start = np.where(np.arange(S) < 2, 0.0, LOG_ZERO)[None, :]
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    skip_mask = Tensor(np.where(skip, 0.0, LOG_ZERO)[None, :])
    pad1 = Tensor(np.full((1, 1), LOG_ZERO))
    pad2 = Tensor(np.full((1, 2), LOG_ZERO))

    alpha = tn.add(tn.slice_axis(emit, 0, 1, axis=0), Tensor(start))
    for t in range(1, T):
        stay = alpha
        step = tn.concat([pad1, tn.slice_axis(alpha, 0, S - 1, axis=1)], axis=1)
        jump = tn.add(tn.concat([pad2, tn.slice_axis(alpha, 0, S - 2, axis=1)], axis=1), skip_mask)
        alpha = tn.add(tn.logaddexp(tn.logaddexp(stay, step), jump), tn.slice_axis(emit, t, t + 1, axis=0))
    final = tn.logsumexp(tn.slice_axis(alpha, S - 2, S, axis=1), axis=-1)
    return tn.scale(tn.sum(final), -1.0)


@dataclass
class _CEStats:
    clamped: int = 0


ce_stats = _CEStats()


def cross_entropy(noise_probs, label):
    """``-log p[label]`` with the probability floored at 1e-12.

    Each floor hit increments ``ce_stats.clamped``.
    """
    p = tn.slice_axis(noise_probs, int(label), int(label) + 1, axis=0)
    if p.data[0] < CE_FLOOR:
        ce_stats.clamped += 1
        p = tn.add(p, Tensor(np.array([CE_FLOOR - p.data[0]])))
    return tn.scale(tn.sum(tn.log(p)), -1.0)


def softplus_inverse(alpha):
    return math.log(math.expm1(alpha))


@dataclass
class LossWeight:
    """Weight on the cross-entropy term, fixed or ``softplus(rho)``."""

    mode: str = "fixed"
    fixed_value: float = 0.01
    rho: Optional[Parameter] = field(default=None)

    def __post_init__(self):
        if self.mode not in ("fixed", "trainable"):
            raise ValueError(f"alpha mode must be 'fixed' or 'trainable', got {self.mode!r}")
        if not self.fixed_value > 0:
            raise ValueError("alpha must be positive")
        if self.mode == "trainable" and self.rho is None:
            self.rho = Parameter("loss.rho", np.array(softplus_inverse(self.fixed_value)))

    @property
    def trainable(self):
        return self.mode == "trainable"

    @property
    def value(self):
        if self.trainable:
            return float(tn.softplus(Tensor(self.rho.value)).item())
        return self.fixed_value

    def tensor(self, rho=None):
        """Alpha as a tensor; pass the tape leaf for ``rho`` to train it."""
        if not self.trainable:
            return Tensor(np.array(self.fixed_value))
        return tn.softplus(rho if rho is not None else Tensor(self.rho.value))


@dataclass
class LossBreakdown:
    l_ctc: float
    l_ce: float
    alpha: float
    l_total: float
    total: Tensor = field(repr=False, compare=False)


def joint_loss(l_ctc, l_ce, weight, rho=None):
    """``l_ctc + alpha * l_ce``; ``l_ce=None`` for single-head models."""
    alpha = weight.tensor(rho)
    for name, t in (("l_ctc", l_ctc), ("l_ce", l_ce)):
        if t is not None and not np.isfinite(t.data).all():
            raise FloatingPointError(f"{name} is not finite")
    if l_ce is None:
        total = l_ctc
        ce = 0.0
    else:
        total = tn.add(tn.reshape(l_ctc, ()), tn.reshape(tn.scale(l_ce, alpha), ()))
        ce = l_ce.item()
    return LossBreakdown(l_ctc.item(), ce, alpha.item(), total.item(), total)
