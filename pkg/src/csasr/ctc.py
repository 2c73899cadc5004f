"""CTC loss in log space, a brute-force enumeration oracle, greedy decoding.

The loss runs the standard extended-label forward recursion over 2L+1
states with log-sum-exp arithmetic; its gradient is computed analytically
from the forward/backward lattice inside a single autograd node. Blank is
index 0 everywhere.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from csasr.autograd import Tensor, _make

__all__ = ["ctc_loss", "ctc_brute_force", "greedy_decode", "collapse_alignment"]

NEG_INF = -np.inf
BLANK = 0


def _validate_target(target: list[int], vocab: int) -> None:
    for t in target:
        if t == BLANK:
            raise ValueError("CTC target must not contain the blank id (0)")
        if not 0 < t < vocab:
            raise ValueError(f"CTC target id {t} out of range [1, {vocab})")


def _extended_labels(target: list[int]) -> np.ndarray:
    ext = np.zeros(2 * len(target) + 1, dtype=np.int64)
    ext[1::2] = target
    return ext


def _lse3(cand: np.ndarray) -> np.ndarray:
    """Log-sum-exp over axis 0 of a [3, S] candidate stack; -inf-safe.

    Callers hoist ``np.errstate`` around their recursion loops.
    """
    m = cand.max(axis=0)
    return np.where(np.isneginf(m), NEG_INF,
                    m + np.log(np.exp(cand - m).sum(axis=0)))


def _skip_mask(ext: np.ndarray) -> np.ndarray:
    """States reachable from s-2: non-blank labels differing from ext[s-2]."""
    skip_ok = np.zeros(ext.shape[0], dtype=bool)
    skip_ok[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return skip_ok


def _forward_lattice(emit: np.ndarray, skip_ok: np.ndarray) -> np.ndarray:
    """alpha[t, s]: log prob of all prefixes ending in state s at frame t.

    ``emit[t, s]`` is the emission log-probability of state s at frame t.
    """
    T, S = emit.shape
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    cand = np.empty((3, S))
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            prev = alpha[t - 1]
            cand[0] = prev
            cand[1, 0] = NEG_INF
            cand[1, 1:] = prev[:-1]
            cand[2, :2] = NEG_INF
            cand[2, 2:] = prev[:-2]
            cand[2, ~skip_ok] = NEG_INF
            alpha[t] = _lse3(cand) + emit[t]
    return alpha


def _backward_lattice(emit: np.ndarray, skip_ok: np.ndarray) -> np.ndarray:
    """beta[t, s]: log prob of completing the target from state s after frame t."""
    T, S = emit.shape
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    cand = np.empty((3, S))
    with np.errstate(invalid="ignore"):
        for t in range(T - 2, -1, -1):
            nxt = beta[t + 1] + emit[t + 1]
            cand[0] = nxt
            cand[1, :-1] = nxt[1:]
            cand[1, -1] = NEG_INF
            # transition s -> s+2 is legal iff state s+2 allows a skip entry
            cand[2] = NEG_INF
            cand[2, :-2][skip_ok[2:]] = nxt[2:][skip_ok[2:]]
            beta[t] = _lse3(cand)
    return beta


def ctc_loss(log_probs: Tensor, target: list[int], zero_infinity: bool = True) -> Tensor:
    """Negative log probability of all alignments collapsing to ``target``.

    ``log_probs`` is [T, V] with rows that are valid log distributions
    (checked to 1e-9). For infeasible targets the raw loss is +inf; with
    ``zero_infinity`` both the loss and its gradient are clamped to exactly 0.
    """
    y = log_probs.data
    if y.ndim != 2:
        raise ValueError(f"ctc_loss expects [T, V] log_probs, got {y.shape}")
    T, V = y.shape
    if V < 2:
        raise ValueError(f"ctc_loss needs V >= 2 (blank + one symbol), got V={V}")
    row_sums = np.exp(y).sum(axis=-1)
    if np.max(np.abs(row_sums - 1.0)) > 1e-9:
        raise ValueError("ctc_loss: rows of exp(log_probs) must sum to 1 within 1e-9")
    target = list(target)
    _validate_target(target, V)

    ext = _extended_labels(target)
    S = ext.shape[0]
    skip_ok = _skip_mask(ext)
    emit = y[:, ext]
    alpha = _forward_lattice(emit, skip_ok)
    tail = alpha[T - 1, S - 1]
    if S > 1:
        tail = np.logaddexp(tail, alpha[T - 1, S - 2])
    log_p = float(tail)

    if log_p == NEG_INF:
        # infeasible alignment set
        value = 0.0 if zero_infinity else math.inf
        return _make(np.asarray(value), (log_probs,), "ctc_loss",
                     lambda g: (np.zeros_like(y),))

    beta = _backward_lattice(emit, skip_ok)
    rows = np.arange(T)[:, None]

    def vjp(g):
        # dL/dy[t, k] = -sum_{s: ext[s]=k} exp(alpha[t,s] + beta[t,s] - log_p)
        occupancy = np.exp(alpha + beta - log_p)  # [T, S]
        grad = np.zeros_like(y)
        np.subtract.at(grad, (rows, ext[None, :]), occupancy)
        return (grad * g,)

    return _make(np.asarray(-log_p), (log_probs,), "ctc_loss", vjp)


def collapse_alignment(frames: tuple[int, ...] | list[int]) -> tuple[int, ...]:
    """Merge consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for f in frames:
        if f != prev:
            if f != BLANK:
                out.append(f)
            prev = f
    return tuple(out)


def ctc_brute_force(log_probs: np.ndarray | Tensor, target: list[int]) -> float:
    """Enumerate every frame labelling and sum those that collapse to target.

    Returns the negative log of the summed probability (+inf when no
    labelling matches). Only usable on small instances (V**T <= 1e7).
    """
    y = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    T, V = y.shape
    if V ** T > 10**7:
        raise ValueError(f"ctc_brute_force: instance too large (V**T = {V**T})")
    _validate_target(list(target), V)
    want = tuple(target)
    total = 0.0
    for frames in itertools.product(range(V), repeat=T):
        if collapse_alignment(frames) == want:
            total += math.exp(sum(y[t, k] for t, k in enumerate(frames)))
    if total == 0.0:
        return math.inf
    return -math.log(total)


def greedy_decode(log_probs: np.ndarray | Tensor,
                  token_table: list[str]) -> tuple[str, list[int]]:
    """Per-frame argmax, collapse repeats, drop blanks, map ids to strings.

    Ties break toward the lowest index; tokens whose log-probability is -inf
    at every frame (masked) can never be emitted.
    """
    y = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    best = np.argmax(y, axis=-1)
    ids = list(collapse_alignment(best.tolist()))
    text = "".join(token_table[i] for i in ids)
    return text, ids
