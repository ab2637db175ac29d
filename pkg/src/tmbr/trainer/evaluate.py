"""Character (symbol) error rate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from ..beam_search import FusionConfig, beam_search_nbest
from ..mbr import edit_distance


@dataclass(frozen=True)
class UtteranceScore:
    id: str
    reference: tuple[int, ...]
    hypothesis: tuple[int, ...]
    errors: int


@dataclass
class CerReport:
    cer: float
    errors: int
    ref_length: int
    utterances: list[UtteranceScore]


def cer_from_pairs(pairs: Sequence[tuple[str, Sequence[int], Sequence[int]]]) -> CerReport:
    """``pairs`` of (id, reference, hypothesis); CER = 100 * sum(ED) / sum(|ref|)."""
    if not pairs:
        raise ValueError("empty test set")
    rows = []
    for uid, ref, hyp in pairs:
        ref, hyp = tuple(ref), tuple(hyp)
        rows.append(UtteranceScore(uid, ref, hyp, edit_distance(hyp, ref)))
    errors = sum(r.errors for r in rows)
    total = sum(len(r.reference) for r in rows)
    if total == 0:
        raise ValueError("references are all empty")
    return CerReport(100.0 * errors / total, errors, total, rows)


def evaluate_cer(model, nnlm, testset, fusion: FusionConfig | None = None, beam_size: int = 4) -> CerReport:
    """Decode every utterance of ``testset`` and score the top hypothesis."""
    fusion = fusion if fusion is not None else FusionConfig(beta=1.0, nnlm_enabled=nnlm is not None)
    utts = list(testset)
    if not utts:
        raise ValueError("empty test set")
    pairs = []
    for u in utts:
        best = beam_search_nbest(model, u.features, beam_size, fusion, nnlm)[0]
        pairs.append((u.id, u.labels, best.labels))
    return cer_from_pairs(pairs)
