"""CTC loss in log space, a brute-force alignment oracle, and greedy decoding.

Label id 0 is the blank throughout.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import BlankInTargets, InfeasibleLength, TooLarge

BLANK_ID = 0
NEG_INF = -np.inf


@dataclass(frozen=True)
class CtcInput:
    log_probs: np.ndarray
    targets: tuple[int, ...]

    def __post_init__(self):
        lp = np.asarray(self.log_probs, dtype=np.float64)
        if lp.ndim != 2:
            raise ValueError("log_probs must be T x V")
        sums = np.exp(lp).sum(axis=1)
        if not np.allclose(sums, 1.0, rtol=0, atol=1e-9):
            raise ValueError("each log_probs row must be a normalised log-distribution")
        targets = tuple(int(t) for t in self.targets)
        _check_targets(targets, lp.shape[1])
        object.__setattr__(self, "log_probs", lp)
        object.__setattr__(self, "targets", targets)


def _check_targets(targets, V):
    for t in targets:
        if t == BLANK_ID:
            raise BlankInTargets("blank (0) may not appear in CTC targets")
        if not 0 < t < V:
            raise ValueError(f"target id {t} outside [1, {V - 1}]")


def min_frames(targets) -> int:
    """Shortest input that can emit ``targets``: one frame per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    return len(targets) + repeats


def is_feasible(n_frames: int, targets) -> bool:
    return n_frames >= min_frames(targets)


def _extend(targets):
    ext = np.zeros(2 * len(targets) + 1, dtype=np.intp)
    ext[1::2] = targets
    skip = np.zeros(ext.size, dtype=bool)
    # a label may be reached directly from the previous label unless both are equal
    skip[3::2] = ext[3::2] != ext[1:-2:2]
    return ext, skip


def _forward(lp, ext, skip):
    T, S = lp.shape[0], ext.size
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + lp[t, ext]
    return alpha


def _backward(lp, ext, skip):
    T, S = lp.shape[0], ext.size
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = lp[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = lp[T - 1, ext[S - 2]]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + lp[t, ext]
    return beta


def _total(alpha):
    last = alpha[-1]
    if last.size == 1:
        return last[0]
    return np.logaddexp(last[-1], last[-2])


def ctc_loss(log_probs, targets, strict: bool = False) -> float:
    """Negative log-likelihood of ``targets`` under per-frame ``log_probs`` (T x V).

    Returns ``inf`` for an infeasible length, or raises InfeasibleLength when
    ``strict``.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    targets = [int(t) for t in targets]
    _check_targets(targets, lp.shape[1])
    if not is_feasible(lp.shape[0], targets):
        if strict:
            raise InfeasibleLength(f"{lp.shape[0]} frames cannot emit {len(targets)} labels")
        return math.inf
    ext, skip = _extend(targets)
    return float(-_total(_forward(lp, ext, skip)))


def ctc_occupancy(log_probs, targets):
    """(loss, gamma) where gamma[t, v] is the posterior mass of label v at frame t.

    The gradient of the loss with respect to ``log_probs`` is ``-gamma``.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    targets = [int(t) for t in targets]
    _check_targets(targets, lp.shape[1])
    if not is_feasible(lp.shape[0], targets):
        raise InfeasibleLength(f"{lp.shape[0]} frames cannot emit {len(targets)} labels")
    ext, skip = _extend(targets)
    alpha = _forward(lp, ext, skip)
    beta = _backward(lp, ext, skip)
    logp = _total(alpha)
    # alpha and beta both include the emission at t
    post = np.exp(alpha + beta - lp[:, ext] - logp)
    gamma = np.zeros_like(lp)
    for s, v in enumerate(ext):
        gamma[:, v] += post[:, s]
    return float(-logp), gamma


def ctc_nll(log_probs: ad.Node, targets) -> ad.Node:
    """Autodiff op: CTC negative log-likelihood of a (T x V) log-probability node."""
    loss, gamma = ctc_occupancy(log_probs.value, targets)
    return log_probs.graph.record("ctc", (log_probs,), np.array(loss), lambda d: (-d * gamma,))


def collapse(path) -> list[int]:
    out, prev = [], None
    for p in path:
        p = int(p)
        if p != prev and p != BLANK_ID:
            out.append(p)
        prev = p
    return out


def ctc_brute_force(log_probs, targets, limit: int = 10**7) -> float:
    """Enumerate every alignment string; exponential, for small test instances only."""
    lp = np.asarray(log_probs, dtype=np.float64)
    T, V = lp.shape
    if V**T > limit:
        raise TooLarge(f"{V}^{T} alignments exceed the limit {limit}")
    targets = [int(t) for t in targets]
    _check_targets(targets, V)
    scores = [
        sum(lp[t, v] for t, v in enumerate(path))
        for path in itertools.product(range(V), repeat=T)
        if collapse(path) == targets
    ]
    if not scores:
        return math.inf
    scores = np.array(scores)
    m = scores.max()
    if m == NEG_INF:
        return math.inf
    return float(-(m + np.log(np.exp(scores - m).sum())))


def greedy_decode(log_probs, symbols=None) -> list:
    """Best-path decoding: frame argmax, merge repeats, drop blanks.

    Returns label ids, or symbols when a table (index 0 = blank) is given.
    """
    ids = collapse(np.argmax(np.asarray(log_probs), axis=1))
    if symbols is None:
        return ids
    return [symbols[i] for i in ids]
