"""Independent reference computations used by self-checks and tests.

Nothing here shares code with the search or the numpy inference path:
distributions are recomputed from scratch through the tape-level model for
every prefix.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ops
from .beam_search import FusionConfig, shallow_fuse
from .model.nnlm import NNLM
from .model.rnnt import RNNT
from .model.vocab import BLANK_ID


def exhaustive_nbest(
    model: RNNT,
    features,
    fusion: FusionConfig | None = None,
    nnlm: NNLM | None = None,
    max_symbols_per_step: int = 3,
    max_labels: int | None = None,
) -> list[tuple[tuple[int, ...], float]]:
    """Every label sequence reachable under the emission limits with its
    log-sum-exp fused score over all alignments, best first."""
    fusion = fusion if fusion is not None else FusionConfig(nnlm_enabled=nnlm is not None)
    use_lm = fusion.nnlm_enabled and nnlm is not None and fusion.lm_weight > 0
    enc = model.encode(np.asarray(features))
    T = enc.shape[0]
    V = model.vocab_size
    cache: dict = {}

    def dist(t: int, labels: tuple) -> np.ndarray:
        key = (t, labels)
        if key not in cache:
            h_dec = model.predict(list(labels))
            h_enc = ops.reshape(ops.take_slice(enc, t, t + 1, axis=0), (enc.shape[1],))
            lp = model.output_distribution(model.joint(h_enc, h_dec), fusion.beta).data.astype(np.float64)
            if use_lm:
                lm = nnlm.score([nnlm.sos_id, *labels]).data.astype(np.float64)
                lp = shallow_fuse(lp, lm, fusion.lm_weight)
            cache[key] = lp
        return cache[key]

    totals: dict = {}

    def walk(t: int, labels: tuple, emitted: int, score: float) -> None:
        if t == T:
            prev = totals.get(labels)
            totals[labels] = score if prev is None else float(np.logaddexp(prev, score))
            return
        lp = dist(t, labels)
        walk(t + 1, labels, 0, score + lp[BLANK_ID])
        if emitted < max_symbols_per_step and (max_labels is None or len(labels) < max_labels):
            for s in range(1, V + 1):
                walk(t, labels + (s,), emitted + 1, score + lp[s])

    walk(0, (), 0, 0.0)
    return sorted(totals.items(), key=lambda kv: (-kv[1], len(kv[0]), kv[0]))
