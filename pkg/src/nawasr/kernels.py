"""Hot inner loops with a numba path and a pure-numpy fallback.

Set ``NAWASR_NUMBA=0`` in the environment before import to force the numpy
path. Both paths are always importable under explicit names so the benchmark
and the tests can compare them directly.
"""

import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

__all__ = [
    "BACKEND",
    "ctc_alpha_beta",
    "levenshtein",
    "ctc_alpha_beta_numpy",
    "levenshtein_numpy",
]

_NEG_INF = -np.inf


def _want_numba():
    flag = os.environ.get("NAWASR_NUMBA", "1").strip().lower()
    return numba is not None and flag not in ("0", "false", "no", "off")


# ---------------------------------------------------------------------------
# loop kernels (compiled by numba when enabled)


def _log_add(a, b):
    if a == _NEG_INF:
        return b
    if b == _NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


def _ctc_alpha_beta_loops(log_probs, ext):
    T = log_probs.shape[0]
    S = ext.shape[0]
    alpha = np.full((T, S), _NEG_INF)
    beta = np.full((T, S), _NEG_INF)

    alpha[0, 0] = log_probs[0, ext[0]]
    if S > 1:
        alpha[0, 1] = log_probs[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            a = alpha[t - 1, s]
            if s >= 1:
                a = _log_add(a, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != 0 and ext[s] != ext[s - 2]:
                a = _log_add(a, alpha[t - 1, s - 2])
            if a != _NEG_INF:
                alpha[t, s] = a + log_probs[t, ext[s]]

    # beta excludes the emission at its own frame
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        for s in range(S):
            b = beta[t + 1, s] + log_probs[t + 1, ext[s]]
            if s + 1 < S:
                b = _log_add(b, beta[t + 1, s + 1] + log_probs[t + 1, ext[s + 1]])
            if s + 2 < S and ext[s + 2] != 0 and ext[s + 2] != ext[s]:
                b = _log_add(b, beta[t + 1, s + 2] + log_probs[t + 1, ext[s + 2]])
            beta[t, s] = b

    log_p = alpha[T - 1, S - 1]
    if S > 1:
        log_p = _log_add(log_p, alpha[T - 1, S - 2])

    grad = np.zeros(log_probs.shape)
    if log_p == _NEG_INF:
        return math.inf, grad
    for t in range(T):
        for s in range(S):
            w = alpha[t, s] + beta[t, s]
            if w != _NEG_INF:
                grad[t, ext[s]] -= math.exp(w - log_p)
    return -log_p, grad


def _levenshtein_loops(a, b):
    n = a.shape[0]
    m = b.shape[0]
    prev = np.arange(m + 1)
    cur = np.empty(m + 1, dtype=prev.dtype)
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            best = prev[j - 1] + cost
            if prev[j] + 1 < best:
                best = prev[j] + 1
            if cur[j - 1] + 1 < best:
                best = cur[j - 1] + 1
            cur[j] = best
        prev, cur = cur, prev
    return int(prev[m])


# ---------------------------------------------------------------------------
# numpy fallbacks


def ctc_alpha_beta_numpy(log_probs, ext):
    """Vectorised over extended-label states, looped over frames."""
    T, _ = log_probs.shape
    S = ext.shape[0]
    emit = log_probs[:, ext]
    skip = np.zeros(S, dtype=bool)
    if S > 2:
        skip[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])

    alpha = np.full((T, S), _NEG_INF)
    beta = np.full((T, S), _NEG_INF)
    alpha[0, : min(2, S)] = emit[0, : min(2, S)]
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            prev = alpha[t - 1]
            acc = prev.copy()
            acc[1:] = np.logaddexp(acc[1:], prev[:-1])
            acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
            alpha[t] = acc + emit[t]

        beta[T - 1, max(0, S - 2):] = 0.0
        for t in range(T - 2, -1, -1):
            nxt = beta[t + 1] + emit[t + 1]
            acc = nxt.copy()
            acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
            acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
            beta[t] = acc

    log_p = np.logaddexp.reduce(alpha[T - 1, max(0, S - 2):])
    grad = np.zeros(log_probs.shape)
    if log_p == _NEG_INF:
        return math.inf, grad
    occ = np.exp(alpha + beta - log_p)
    for s in range(S):
        grad[:, ext[s]] -= occ[:, s]
    return float(-log_p), grad


def levenshtein_numpy(a, b):
    """Row-vectorised DP; the insertion chain is resolved with a running min."""
    n = a.shape[0]
    m = b.shape[0]
    if n == 0 or m == 0:
        return int(n + m)
    cols = np.arange(m + 1)
    prev = cols.copy()
    for i in range(1, n + 1):
        sub = prev[:-1] + (b != a[i - 1])
        cand = np.empty(m + 1, dtype=prev.dtype)
        cand[0] = i
        cand[1:] = np.minimum(sub, prev[1:] + 1)
        # cur[j] = min_k<=j (cand[k] + j - k)
        prev = np.minimum.accumulate(cand - cols) + cols
    return int(prev[m])


# ---------------------------------------------------------------------------
# dispatch

if _want_numba():
    BACKEND = "numba"
    _log_add = numba.njit(cache=True, nogil=True)(_log_add)
    ctc_alpha_beta_numba = numba.njit(cache=True, nogil=True)(_ctc_alpha_beta_loops)
    levenshtein_numba = numba.njit(cache=True, nogil=True)(_levenshtein_loops)
    _ctc_impl = ctc_alpha_beta_numba
    _lev_impl = levenshtein_numba
else:
    BACKEND = "numpy"
    ctc_alpha_beta_numba = None
    levenshtein_numba = None
    _ctc_impl = ctc_alpha_beta_numpy
    _lev_impl = levenshtein_numpy


def ctc_alpha_beta(log_probs, ext):
    """Negative log-likelihood of ``ext`` and its gradient w.r.t. ``log_probs``.

    ``log_probs`` is ``[T, V]`` (rows are log-distributions) and ``ext`` the
    blank-interleaved label sequence of length ``2U + 1``. Returns
    ``(nll, grad)``; ``nll`` is ``inf`` when no alignment exists.
    """
    log_probs = np.ascontiguousarray(log_probs, dtype=np.float64)
    ext = np.ascontiguousarray(ext, dtype=np.int64)
    nll, grad = _ctc_impl(log_probs, ext)
    return float(nll), grad


def levenshtein(a, b):
    """Unit-cost edit distance between two integer sequences."""
    a = np.ascontiguousarray(a, dtype=np.int64)
    b = np.ascontiguousarray(b, dtype=np.int64)
    return _lev_impl(a, b)
