"""N-best transducer beam search with smoothing and blank-aware shallow fusion.

The search is frame synchronous.  Within a frame every live hypothesis is
expanded with blank (which finishes it for the frame) and with its top-K
non-blank symbols (which keeps it live); finished and live candidates
compete for the same ``beam_size`` slots, and hypotheses that finish a
frame with identical labels are merged by log-sum-exp.  At most
``max_symbols_per_step`` labels are emitted per frame, which bounds the
search.

Ranking uses the smoothed and fused distribution.  Each hypothesis also
records the raw (beta = 1, no LM) log-probability of every emission, so
downstream risk training sees the model's own sequence probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model.nnlm import NNLM, NNLMState
from .model.rnnt import RNNT, DecoderState
from .model.vocab import BLANK_ID

DEFAULT_DECODE_BEAM = 8
DEFAULT_LM_WEIGHT = 0.1
DEFAULT_BETA = 0.8


@dataclass(frozen=True)
class FusionConfig:
    lm_weight: float = DEFAULT_LM_WEIGHT
    beta: float = DEFAULT_BETA
    nnlm_enabled: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lm_weight <= 1.0:
            raise ValueError(f"lm_weight must be in [0, 1], got {self.lm_weight}")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must be in (0, 1], got {self.beta}")


def remove_blank(full_sequence: Sequence[int]) -> list[int]:
    return [int(s) for s in full_sequence if s != BLANK_ID]


@dataclass
class Hypothesis:
    full_sequence: tuple[int, ...]
    step_log_probs: tuple[float, ...]
    fused_score: float
    decoder_state: Optional[DecoderState] = field(default=None, repr=False, compare=False)
    nnlm_state: Optional[NNLMState] = field(default=None, repr=False, compare=False)

    @property
    def labels(self) -> tuple[int, ...]:
        return tuple(remove_blank(self.full_sequence))

    @property
    def log_prob(self) -> float:
        """log f(y): the summed raw emission log-probabilities."""
        return float(np.sum(self.step_log_probs))

    @property
    def num_frames(self) -> int:
        return sum(1 for s in self.full_sequence if s == BLANK_ID)


# ------------------------------------------------------------------ fusion


def _lse(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _fuse(rnnt_lp: np.ndarray, nnlm_lp: np.ndarray, lm_weight: float) -> np.ndarray:
    """Row-wise fusion of (..., V+1) transducer and (..., V) LM log-probs."""
    if lm_weight == 0.0:
        return rnnt_lp.copy()
    non_blank = rnnt_lp[..., 1:]
    interp = (1.0 - lm_weight) * non_blank + lm_weight * nnlm_lp
    log_scale = _lse(non_blank) - _lse(interp)
    out = np.empty_like(rnnt_lp)
    out[..., 0] = rnnt_lp[..., 0]
    out[..., 1:] = interp + log_scale[..., None]
    return out


def shallow_fuse(rnnt_log_probs, nnlm_log_probs, lm_weight: float) -> np.ndarray:
    """Fuse an LM into a transducer distribution, leaving blank untouched.

    Non-blank scores are log-linearly interpolated and then rescaled so they
    keep the transducer's total non-blank mass.
    """
    rnnt_lp = np.asarray(rnnt_log_probs, dtype=np.float64)
    nnlm_lp = np.asarray(nnlm_log_probs, dtype=np.float64)
    if not 0.0 <= lm_weight <= 1.0:
        raise ValueError(f"lm_weight must be in [0, 1], got {lm_weight}")
    if rnnt_lp.shape[-1] != nnlm_lp.shape[-1] + 1:
        raise ValueError(f"LM covers {nnlm_lp.shape[-1]} symbols, transducer {rnnt_lp.shape[-1] - 1}")
    for name, lp in (("transducer", rnnt_lp), ("LM", nnlm_lp)):
        if np.any(np.abs(np.exp(lp).sum(axis=-1) - 1.0) > 1e-5):
            raise ValueError(f"{name} log-probabilities are not normalized")
    return _fuse(rnnt_lp, nnlm_lp, lm_weight)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class _Scorer:
    """Raw and search-time distributions for a batch of live hypotheses."""

    def __init__(self, model: RNNT, nnlm: NNLM | None, fusion: FusionConfig):
        if fusion.nnlm_enabled and nnlm is None:
            raise ValueError("fusion enabled but no LM given")
        self.model = model
        self.nnlm = nnlm if fusion.nnlm_enabled and fusion.lm_weight > 0 else None
        self.fusion = fusion

    def __call__(self, h_enc: np.ndarray, hyps: list[Hypothesis]) -> tuple[np.ndarray, np.ndarray]:
        dec = np.stack([h.decoder_state.output for h in hyps])
        logits = self.model.joint_logits_np(h_enc, dec).astype(np.float64)
        raw = _log_softmax(logits)
        search = raw if self.fusion.beta == 1.0 else _log_softmax(self.fusion.beta * logits)
        if self.nnlm is not None:
            lm = np.stack([h.nnlm_state.log_probs for h in hyps])
            search = _fuse(search, lm, self.fusion.lm_weight)
        return raw, search

    def initial(self) -> Hypothesis:
        return Hypothesis(
            (),
            (),
            0.0,
            self.model.start_state(),
            self.nnlm.start_state() if self.nnlm is not None else None,
        )

    def extend(self, parent: Hypothesis, symbol: int, raw: float, score: float) -> Hypothesis:
        return Hypothesis(
            parent.full_sequence + (symbol,),
            parent.step_log_probs + (raw,),
            score,
            self.model.extend_state(parent.decoder_state, symbol),
            self.nnlm.advance(parent.nnlm_state, symbol) if self.nnlm is not None else None,
        )


def _rank_key(h: Hypothesis):
    labels = h.labels
    return (-h.fused_score, len(labels), labels)


def _merge_into(pool: dict, hyp: Hypothesis) -> None:
    """Merge a frame-finished hypothesis into ``pool`` keyed by labels."""
    key = hyp.labels
    prev = pool.get(key)
    if prev is None:
        pool[key] = hyp
        return
    total = float(np.logaddexp(prev.fused_score, hyp.fused_score))
    best = prev if _rank_key(prev) <= _rank_key(hyp) else hyp
    pool[key] = Hypothesis(best.full_sequence, best.step_log_probs, total, best.decoder_state, best.nnlm_state)


def beam_search_nbest(
    model: RNNT,
    features,
    beam_size: int,
    fusion: FusionConfig | None = None,
    nnlm: NNLM | None = None,
    max_symbols_per_step: int = 3,
    max_labels: int | None = None,
    expansion_k: int | None = None,
    enc: np.ndarray | None = None,
) -> list[Hypothesis]:
    """Return up to ``beam_size`` hypotheses ranked by fused score."""
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    fusion = fusion if fusion is not None else FusionConfig(nnlm_enabled=nnlm is not None)
    if enc is None:
        feats = np.asarray(features)
        if feats.size == 0:
            raise ValueError("empty feature input")
        enc = model.encode(feats).data
    scorer = _Scorer(model, nnlm, fusion)
    V = model.vocab_size
    k = min(expansion_k if expansion_k is not None else beam_size, V)

    beam = [scorer.initial()]
    for t in range(enc.shape[0]):
        h_enc = enc[t]
        finished: dict = {}
        live = beam
        for depth in range(max_symbols_per_step + 1):
            if not live:
                break
            raw, search = scorer(h_enc, live)
            cands = []  # (hypothesis-or-pending, is_finished)
            for i, h in enumerate(live):
                base = h.fused_score
                fin = Hypothesis(
                    h.full_sequence + (BLANK_ID,),
                    h.step_log_probs + (float(raw[i, 0]),),
                    base + float(search[i, 0]),
                    h.decoder_state,
                    h.nnlm_state,
                )
                _merge_into(finished, fin)
                can_emit = depth < max_symbols_per_step and (max_labels is None or len(h.labels) < max_labels)
                if can_emit:
                    sym_scores = search[i, 1:]
                    top = np.argsort(-sym_scores, kind="stable")[:k]
                    for j in top:
                        s = int(j) + 1
                        cands.append((base + float(search[i, s]), h, s, float(raw[i, s])))
            # Finished and live candidates share the beam.
            ranked = [(_rank_key(h), True, h) for h in finished.values()]
            for score, parent, s, r in cands:
                labels = parent.labels + (s,)
                ranked.append(((-score, len(labels), labels), False, (parent, s, r, score)))
            ranked.sort(key=lambda item: item[0])
            ranked = ranked[:beam_size]
            finished = {}
            live = []
            for _, done, item in ranked:
                if done:
                    finished[item.labels] = item
                else:
                    parent, s, r, score = item
                    live.append(scorer.extend(parent, s, r, score))
        beam = sorted(finished.values(), key=_rank_key)
    return sorted(beam, key=_rank_key)[:beam_size]


def greedy_decode(
    model: RNNT,
    features,
    fusion: FusionConfig | None = None,
    nnlm: NNLM | None = None,
    max_symbols_per_step: int = 3,
) -> Hypothesis:
    """Arg-max decoding: emit the best symbol until blank wins each frame."""
    fusion = fusion if fusion is not None else FusionConfig(nnlm_enabled=nnlm is not None)
    enc = model.encode(np.asarray(features)).data
    scorer = _Scorer(model, nnlm, fusion)
    hyp = scorer.initial()
    for t in range(enc.shape[0]):
        for depth in range(max_symbols_per_step + 1):
            raw, search = scorer(enc[t], [hyp])
            best = int(np.argmax(search[0])) if depth < max_symbols_per_step else BLANK_ID
            if best == BLANK_ID:
                hyp = Hypothesis(
                    hyp.full_sequence + (BLANK_ID,),
                    hyp.step_log_probs + (float(raw[0, 0]),),
                    hyp.fused_score + float(search[0, 0]),
                    hyp.decoder_state,
                    hyp.nnlm_state,
                )
                break
            hyp = scorer.extend(hyp, best, float(raw[0, best]), hyp.fused_score + float(search[0, best]))
    return hyp


# -------------------------------------------------------------- file output


def format_labels(labels, vocab) -> str:
    return " ".join(vocab.decode(labels)) if vocab is not None else " ".join(str(l) for l in labels)


def write_decode(path, results, vocab=None) -> None:
    """One line per utterance: ``utt-id<TAB>fused_score<TAB>labels``."""
    with open(path, "w", encoding="utf-8") as fh:
        for utt_id, hyps in results:
            best = hyps[0]
            fh.write(f"{utt_id}\t{best.fused_score:.6f}\t{format_labels(best.labels, vocab)}\n")


def write_nbest(path, results, vocab=None) -> None:
    """One line per hypothesis: ``utt-id<TAB>rank<TAB>fused_score<TAB>labels``."""
    with open(path, "w", encoding="utf-8") as fh:
        for utt_id, hyps in results:
            for rank, h in enumerate(hyps, start=1):
                fh.write(f"{utt_id}\t{rank}\t{h.fused_score:.6f}\t{format_labels(h.labels, vocab)}\n")


def read_decode(path, vocab=None) -> dict[str, list]:
    """Parse a decode file back into ``{utt_id: labels}``."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}: malformed decode line {line!r}")
            utt_id, _, text = parts
            tokens = text.split()
            out[utt_id] = vocab.encode(tokens) if vocab is not None else [int(x) for x in tokens]
    return out
