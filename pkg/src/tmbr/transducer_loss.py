"""Transducer negative log-likelihood over the alignment lattice.

Lattice coordinates are 0-based: ``log_probs[t, u]`` is the output
distribution after consuming ``t`` frames' blanks and ``u`` labels.  An
alignment starts at ``(0, 0)``, emits label ``y[u]`` to move ``(t, u) ->
(t, u + 1)`` or blank to move ``(t, u) -> (t + 1, u)``, and ends with the
blank emitted at ``(T - 1, U)``.  There are ``C(T + U - 1, U)`` of them.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .autodiff.tensor import ShapeError, Tensor, record

NEG = -1e30

BLANK = 0


@dataclass
class Lattice:
    log_probs: np.ndarray
    reference: np.ndarray
    blank: int = BLANK

    def __post_init__(self):
        self.log_probs = np.asarray(self.log_probs, dtype=np.float64)
        self.reference = np.asarray(self.reference, dtype=np.int64).reshape(-1)
        _validate(self.log_probs, self.reference, self.blank)

    @property
    def T(self) -> int:
        return self.log_probs.shape[0]

    @property
    def U(self) -> int:
        return len(self.reference)

    def is_normalized(self, tol: float = 1e-6) -> bool:
        sums = np.exp(self.log_probs).sum(axis=-1)
        return bool(np.all(np.abs(sums - 1.0) <= tol))


def _validate(log_probs: np.ndarray, reference: np.ndarray, blank: int) -> None:
    if log_probs.ndim != 3:
        raise ShapeError(f"lattice log_probs must be (T, U+1, V+1), got {log_probs.shape}")
    T, U1, V1 = log_probs.shape
    if U1 != len(reference) + 1:
        raise ShapeError(f"lattice has {U1} label positions but reference length is {len(reference)}")
    if T == 0 and len(reference) > 0:
        raise ValueError("cannot align a non-empty reference to zero frames")
    if T == 0:
        raise ValueError("lattice needs at least one frame")
    if np.any(reference == blank):
        raise ValueError("reference must not contain the blank symbol")
    if reference.size and (reference.min() < 0 or reference.max() >= V1):
        raise ValueError("reference symbol outside the output vocabulary")


def _lse(a: float, b: float) -> float:
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a))


def forward_variables(log_probs: np.ndarray, labels: np.ndarray, blank: int = BLANK) -> tuple[np.ndarray, np.ndarray]:
    """Log-domain forward and backward variables, each ``(T, U + 1)``.

    ``beta[t, u]`` includes the emission at ``(t, u)`` itself, so the total
    log-likelihood equals both ``beta[0, 0]`` and ``alpha[T-1, U] +
    log_probs[T-1, U, blank]``.
    """
    T, U1, _ = log_probs.shape
    U = U1 - 1
    blank_lp = log_probs[:, :, blank]
    emit_lp = log_probs[:, np.arange(U), labels] if U else np.zeros((T, 0))

    alpha = np.full((T, U1), NEG)
    alpha[0, 0] = 0.0
    for u in range(1, U1):
        alpha[0, u] = alpha[0, u - 1] + emit_lp[0, u - 1]
    for t in range(1, T):
        row = alpha[t - 1] + blank_lp[t - 1]
        acc = row[0]
        alpha[t, 0] = acc
        for u in range(1, U1):
            acc = _lse(row[u], acc + emit_lp[t, u - 1])
            alpha[t, u] = acc

    beta = np.full((T, U1), NEG)
    beta[T - 1, U] = blank_lp[T - 1, U]
    for u in range(U - 1, -1, -1):
        beta[T - 1, u] = beta[T - 1, u + 1] + emit_lp[T - 1, u]
    for t in range(T - 2, -1, -1):
        row = beta[t + 1] + blank_lp[t]
        acc = row[U]
        beta[t, U] = acc
        for u in range(U - 1, -1, -1):
            acc = _lse(row[u], acc + emit_lp[t, u])
            beta[t, u] = acc
    return alpha, beta


def forward_backward(log_probs: np.ndarray, labels, blank: int = BLANK) -> tuple[float, np.ndarray]:
    """Negative log-likelihood and its gradient w.r.t. ``log_probs``."""
    lp = np.asarray(log_probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    _validate(lp, labels, blank)
    T, U1, _ = lp.shape
    U = U1 - 1
    alpha, beta = forward_variables(lp, labels, blank)
    ll = beta[0, 0]

    grad = np.zeros_like(lp)
    # Blank at (t, u) continues to (t+1, u); the final blank terminates.
    nxt = np.full((T, U1), NEG)
    nxt[:-1] = beta[1:]
    nxt[T - 1, U] = 0.0
    grad[:, :, blank] = -np.exp(alpha + lp[:, :, blank] + nxt - ll)
    if U:
        u_idx = np.arange(U)
        occ = np.exp(alpha[:, :U] + lp[:, u_idx, labels] + beta[:, 1:] - ll)
        grad[:, u_idx, labels] -= occ
    return float(-ll), grad


def forward_backward_loss(lattice: Lattice) -> tuple[float, np.ndarray]:
    return forward_backward(lattice.log_probs, lattice.reference, lattice.blank)


def num_alignments(T: int, U: int) -> int:
    return math.comb(T + U - 1, U)


def iter_alignments(T: int, U: int):
    """Yield each alignment as the list of step slots (0-based, among the
    first ``T + U - 1`` steps) that emit labels."""
    yield from itertools.combinations(range(T + U - 1), U)


def brute_force_loss(lattice: Lattice, limit: int = 100_000) -> float:
    """Exact NLL by enumerating every alignment (test oracle)."""
    T, U = lattice.T, lattice.U
    count = num_alignments(T, U)
    if count > limit:
        raise ValueError(f"{count} alignments exceed the enumeration limit {limit}")
    lp = lattice.log_probs
    ref = lattice.reference
    blank = lattice.blank
    scores = []
    for slots in iter_alignments(T, U):
        slot_set = set(slots)
        t = u = 0
        total = 0.0
        for step in range(T + U):
            if step in slot_set:
                total += lp[t, u, ref[u]]
                u += 1
            else:
                total += lp[t, u, blank]
                t += 1
        scores.append(total)
    scores = np.asarray(scores)
    top = scores.max()
    return float(-(top + np.log(np.exp(scores - top).sum())))


def transducer_nll(log_probs: Tensor, labels, blank: int = BLANK) -> Tensor:
    """Tape-aware loss node: scalar NLL whose backward is the lattice gradient."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    nll, grad = forward_backward(log_probs.data, labels, blank)
    dtype = log_probs.data.dtype
    out = np.asarray(nll, dtype=dtype)

    def backward(g):
        return ((grad * g).astype(dtype),)

    return record("transducer_nll", (log_probs,), out, backward)
