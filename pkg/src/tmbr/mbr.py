"""Minimum Bayes risk loss over N-best hypothesis spaces."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.tensor import record
from .beam_search import Hypothesis, remove_blank
from .model.rnnt import RNNT
from .transducer_loss import transducer_nll

DEFAULT_REG_LAMBDA = 1.0
DEFAULT_MBR_NBEST = 2


@dataclass(frozen=True)
class MbrConfig:
    nbest_size: int = DEFAULT_MBR_NBEST
    reg_lambda: float = DEFAULT_REG_LAMBDA
    use_nnlm_in_search: bool = False

    def __post_init__(self):
        if self.nbest_size < 1:
            raise ValueError("nbest_size must be positive")
        if self.reg_lambda < 0:
            raise ValueError("reg_lambda must be non-negative")


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    """Levenshtein distance with unit insert, delete and substitute costs."""
    hyp, ref = list(hyp), list(ref)
    if not hyp:
        return len(ref)
    if not ref:
        return len(hyp)
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, start=1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def risk(hypothesis: Hypothesis | Sequence[int], ref: Sequence[int]) -> int:
    """Edit distance between the blank-removed hypothesis and the reference."""
    seq = hypothesis.full_sequence if isinstance(hypothesis, Hypothesis) else hypothesis
    return edit_distance(remove_blank(seq), ref)


def _normalize(log_f: np.ndarray) -> np.ndarray:
    z = log_f - log_f.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass
class NBestSpace:
    """One utterance's hypothesis space with normalised probabilities and risks."""

    hypotheses: list
    reference: tuple
    log_f: np.ndarray = field(repr=False)
    gamma: np.ndarray
    risks: np.ndarray
    avg_risk: float

    @classmethod
    def build(cls, hypotheses: Sequence[Hypothesis], reference, risks=None) -> "NBestSpace":
        hyps = list(hypotheses)
        if not hyps:
            raise ValueError("hypothesis space is empty")
        log_f = np.array([h.log_prob for h in hyps], dtype=np.float64)
        if not np.all(np.isfinite(log_f)):
            raise ValueError("non-finite sequence log-probability")
        ref = tuple(int(r) for r in reference)
        r = np.array([risk(h, ref) for h in hyps] if risks is None else risks, dtype=np.float64)
        gamma = _normalize(log_f)
        return cls(hyps, ref, log_f, gamma, r, float(gamma @ r))

    @property
    def degenerate(self) -> bool:
        return bool(np.all(self.risks == self.risks[0]))


def mbr_loss(space: NBestSpace) -> float:
    """Expected risk over the space: sum of gamma(y) * R(y, y_ref)."""
    return float(space.gamma @ space.risks)


def batch_mbr_loss(spaces: Sequence[NBestSpace]) -> float:
    return float(sum(mbr_loss(s) for s in spaces))


def mbr_coefficients(space: NBestSpace) -> np.ndarray:
    """gamma(y) * (R(y) - avg risk), the derivative w.r.t. each emitted log-prob of y."""
    if space.degenerate:
        return np.zeros(len(space.hypotheses))
    return space.gamma * (space.risks - space.avg_risk)


def mbr_gradient(space: NBestSpace, tol: float = 1e-6) -> list[np.ndarray]:
    """Per hypothesis, the loss derivative w.r.t. each emitted step log-prob."""
    for h, lf in zip(space.hypotheses, space.log_f):
        if abs(h.log_prob - lf) > tol * max(1.0, abs(lf)):
            raise ValueError("hypothesis step log-probs disagree with the stored sequence score")
    coeff = mbr_coefficients(space)
    return [np.full(len(h.step_log_probs), c) for h, c in zip(space.hypotheses, coeff)]


def regularized_loss(mbr: float, rnnt_nll: float, reg_lambda: float = DEFAULT_REG_LAMBDA) -> float:
    if reg_lambda < 0:
        raise ValueError("reg_lambda must be non-negative")
    return mbr + reg_lambda * rnnt_nll


# ----------------------------------------------------------- tape-level loss


def expected_risk(log_f: Tensor, risks) -> Tensor:
    """Tape node: value is the normalised expected risk of the hypotheses
    whose sequence log-probabilities are ``log_f``; its backward assigns
    ``gamma(y) * (R(y) - avg risk)`` to ``log f(y)``."""
    r = np.asarray(risks, dtype=np.float64)
    if log_f.shape != r.shape:
        raise ValueError(f"expected_risk: {log_f.shape[0]} scores but {r.shape[0]} risks")
    gamma = _normalize(log_f.data.astype(np.float64))
    if np.all(r == r[0]):
        avg, coeff = float(r[0]), np.zeros_like(r)
    else:
        avg = float(gamma @ r)
        coeff = gamma * (r - avg)
    dtype = log_f.data.dtype

    def backward(g):
        return ((coeff * g).astype(dtype),)

    return record("expected_risk", (log_f,), np.asarray(avg, dtype=dtype), backward)


def sequence_log_probs(model: RNNT, enc: Tensor, hypotheses: Sequence[Hypothesis]) -> tuple[Tensor, list[Tensor]]:
    """Re-score frozen alignments through the network: (log f vector, per-step log-probs)."""
    steps = []
    totals = []
    for h in hypotheses:
        dec = model.predict_all(h.labels)
        lp = model.path_log_probs(enc, dec, h.full_sequence)
        steps.append(lp)
        totals.append(ops.reshape(ops.reduce_sum(lp), (1,)))
    return ops.concat(*totals, axis=0), steps


@dataclass
class MbrTerms:
    loss: Tensor
    mbr: float
    rnnt: float
    avg_risk: float
    space: NBestSpace


def mbr_utterance_loss(
    model: RNNT,
    features,
    reference,
    hypotheses: Sequence[Hypothesis],
    reg_lambda: float = DEFAULT_REG_LAMBDA,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> MbrTerms:
    """Regularised MBR objective for one utterance, ready for ``backward``."""
    enc = model.encode(features, training=training, rng=rng)
    reference = [int(r) for r in reference]
    log_f, steps = sequence_log_probs(model, enc, hypotheses)
    rescored = [
        Hypothesis(h.full_sequence, tuple(float(v) for v in s.data), h.fused_score) for h, s in zip(hypotheses, steps)
    ]
    space = NBestSpace.build(rescored, reference)
    nll = transducer_nll(model.lattice_log_probs(enc, model.predict_all(reference)), reference)
    if space.degenerate:
        loss = ops.scale(nll, reg_lambda) if reg_lambda != 1.0 else nll
    else:
        risk_term = expected_risk(log_f, space.risks)
        loss = ops.add(risk_term, ops.scale(nll, reg_lambda))
    return MbrTerms(loss, space.avg_risk, float(nll.item()), space.avg_risk, space)
