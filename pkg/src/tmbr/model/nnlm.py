"""External recurrent language model over non-blank symbols.

Token indices inside the LM: symbol id ``k`` maps to row ``k - 1`` and the
start symbol to row ``V``.  The output layer has the same ``V + 1`` slots;
the start-symbol slot doubles as the sentence-boundary target in training
and is excluded when scoring, so :meth:`NNLM.score` is a distribution over
the ``V`` non-blank symbols only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor, ops
from .config import NNLMConfig
from .params import ModelParams, ParamFactory
from .rnnt import ContractError
from .vocab import BLANK_ID


@dataclass(frozen=True)
class NNLMState:
    """Hidden states after a history; ``log_probs`` scores the next symbol."""

    layers: tuple[np.ndarray, ...]
    log_probs: np.ndarray


def build_nnlm_params(config: NNLMConfig) -> ModelParams:
    f = ParamFactory(config.seed)
    V1 = config.vocab_size + 1
    f.table("nnlm.embedding", V1, config.embed_dim)
    dim = config.embed_dim
    H = config.hidden
    for l in range(config.layers):
        f.weight(f"nnlm.lstm.{l}.weight", dim + H, 4 * H)
        b = np.zeros(4 * H)
        b[H : 2 * H] = 1.0  # forget-gate bias
        f._add(f"nnlm.lstm.{l}.bias", b)
        dim = H
    if config.output_hidden:
        f.weight("nnlm.hidden.weight", dim, config.output_hidden)
        f.bias("nnlm.hidden.bias", config.output_hidden)
        dim = config.output_hidden
    f.weight("nnlm.output.weight", dim, V1)
    f.bias("nnlm.output.bias", V1)
    return f.params


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class NNLM:
    def __init__(self, config: NNLMConfig, params: ModelParams | None = None):
        self.config = config
        self.params = params if params is not None else build_nnlm_params(config)

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def sos_id(self) -> int:
        return self.config.vocab_size + 1

    def num_parameters(self) -> int:
        return self.params.num_parameters()

    def clone(self) -> "NNLM":
        return NNLM(self.config, self.params.clone())

    def _rows(self, ids: np.ndarray) -> np.ndarray:
        return np.where(ids == self.sos_id, self.vocab_size, ids - 1)

    def _check(self, history) -> np.ndarray:
        ids = np.asarray(history, dtype=np.int64).reshape(-1)
        if ids.size == 0 or ids[0] != self.sos_id:
            raise ContractError("LM history must start with the start symbol")
        body = ids[1:]
        if np.any(body == BLANK_ID):
            raise ContractError("LM history must not contain blank")
        if body.size and (body.min() < 1 or body.max() > self.vocab_size):
            raise ContractError("LM history symbol outside the vocabulary")
        return ids

    # -------------------------------------------------------- tape path

    def _zero_state(self, dtype) -> list[Tensor]:
        return [Tensor(np.zeros(2 * self.config.hidden), dtype=dtype) for _ in range(self.config.layers)]

    def sequence_logits(self, ids, state: list[Tensor] | None = None) -> tuple[Tensor, list[Tensor]]:
        """Full-output logits (L, V+1) after each input token, plus final states."""
        ids = np.asarray(ids, dtype=np.int64)
        p = self.params
        emb = ops.embedding_lookup(p["nnlm.embedding"], self._rows(ids))
        states = state if state is not None else self._zero_state(emb.data.dtype)
        H = self.config.hidden
        tops = []
        for pos in range(len(ids)):
            x = ops.reshape(ops.take_slice(emb, pos, pos + 1, axis=0), (emb.shape[1],))
            new_states = []
            for l, s in enumerate(states):
                s = ops.lstm_cell(x, s, p[f"nnlm.lstm.{l}.weight"], p[f"nnlm.lstm.{l}.bias"])
                new_states.append(s)
                x = ops.take_slice(s, 0, H)
            states = new_states
            tops.append(ops.reshape(x, (1, H)))
        h = ops.concat(*tops, axis=0)
        if self.config.output_hidden:
            h = ops.tanh(ops.add(ops.matmul(h, p["nnlm.hidden.weight"]), p["nnlm.hidden.bias"]))
        logits = ops.add(ops.matmul(h, p["nnlm.output.weight"]), p["nnlm.output.bias"])
        return logits, states

    def score(self, history) -> Tensor:
        """Log-distribution over non-blank symbols following ``history``
        (which starts with the start symbol) recomputed from scratch."""
        ids = self._check(history)
        logits, _ = self.sequence_logits(ids)
        last = ops.take_slice(logits, len(ids) - 1, len(ids), axis=0)
        symbols = ops.take_slice(last, 0, self.vocab_size, axis=-1)
        return ops.reshape(ops.log_softmax(symbols), (self.vocab_size,))

    def stream_nll(self, tokens, state: list[Tensor] | None = None):
        """Summed cross-entropy of ``tokens[1:]`` given ``tokens[:-1]``.

        ``tokens`` is a symbol stream in which the start symbol also marks
        sentence boundaries, e.g. ``[SOS, a, b, SOS, c, SOS]``.  Returns
        ``(nll, number of predictions, final states)`` so a long stream can
        be processed in truncated-BPTT windows.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if len(tokens) < 2:
            raise ValueError("need at least two tokens")
        logits, states = self.sequence_logits(tokens[:-1], state)
        lp = ops.log_softmax(logits, axis=-1)
        targets = tokens[1:]
        picked = ops.gather(lp, (np.arange(len(targets)), self._rows(targets)))
        return ops.scale(ops.reduce_sum(picked), -1.0), len(targets), states

    # ------------------------------------------------- incremental path

    def _step(self, layers: tuple[np.ndarray, ...], token: int) -> NNLMState:
        p = self.params
        H = self.config.hidden
        x = p["nnlm.embedding"].data[self._rows(np.asarray(token))]
        new = []
        for l, s in enumerate(layers):
            h, c = s[:H], s[H:]
            z = np.concatenate([x, h]) @ p[f"nnlm.lstm.{l}.weight"].data + p[f"nnlm.lstm.{l}.bias"].data
            sig = lambda v: 0.5 * (1.0 + np.tanh(0.5 * v))  # noqa: E731
            i, f, g, o = sig(z[:H]), sig(z[H : 2 * H]), np.tanh(z[2 * H : 3 * H]), sig(z[3 * H :])
            c = f * c + i * g
            h = o * np.tanh(c)
            new.append(np.concatenate([h, c]))
            x = h
        if self.config.output_hidden:
            x = np.tanh(x @ p["nnlm.hidden.weight"].data + p["nnlm.hidden.bias"].data)
        logits = x @ p["nnlm.output.weight"].data + p["nnlm.output.bias"].data
        return NNLMState(tuple(new), _log_softmax_np(logits[: self.vocab_size]))

    def start_state(self) -> NNLMState:
        dtype = self.params["nnlm.embedding"].data.dtype
        zeros = tuple(np.zeros(2 * self.config.hidden, dtype=dtype) for _ in range(self.config.layers))
        return self._step(zeros, self.sos_id)

    def advance(self, state: NNLMState, label: int) -> NNLMState:
        if label == BLANK_ID or not 1 <= label <= self.vocab_size:
            raise ContractError(f"cannot advance the LM with symbol {label}")
        return self._step(state.layers, int(label))
