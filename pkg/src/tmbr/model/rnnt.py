"""Convolution + transformer transducer: encoder, prediction network, GLU joint."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import ShapeError, Tensor, ops
from .config import CausalConvLayer, RNNTConfig, TDNNLayer, TransformerLayer
from .layers import (
    causal_conv_cache,
    causal_conv_forward,
    causal_conv_step,
    init_causal_conv,
    init_tdnn,
    init_transformer,
    tdnn_forward,
    transformer_cache,
    transformer_forward,
    transformer_step,
)
from .params import ModelParams, ParamFactory
from .vocab import BLANK_ID


class EncoderLengthError(ValueError):
    """Input shorter than the encoder's receptive field."""


class ContractError(ValueError):
    """A caller broke an input contract (e.g. blank inside a label history)."""


@dataclass(frozen=True)
class DecoderState:
    """Cached prediction-network state after consuming a label history.

    ``output`` is the prediction vector for the next emission; ``caches``
    hold per-layer context for extending the history by one label.
    """

    labels: tuple[int, ...]
    caches: tuple
    output: np.ndarray


def build_params(config: RNNTConfig) -> ModelParams:
    f = ParamFactory(config.seed)
    dim = config.encoder.feat_dim
    for i, layer in enumerate(config.encoder.layers):
        if isinstance(layer, TDNNLayer):
            init_tdnn(f, f"encoder.{i}", layer, dim)
            dim = layer.dim
        else:
            if layer.d_model != dim:
                raise ShapeError(f"encoder layer {i}: d_model {layer.d_model} != input dim {dim}")
            init_transformer(f, f"encoder.{i}", layer)
    # Row 0 (the blank id, never part of a history) is the learned start embedding.
    f.table("decoder.embedding", config.vocab_size + 1, config.decoder.embed_dim)
    dim = config.decoder.embed_dim
    for i, layer in enumerate(config.decoder.layers):
        if isinstance(layer, CausalConvLayer):
            if layer.in_dim != dim:
                raise ShapeError(f"decoder layer {i}: in_dim {layer.in_dim} != input dim {dim}")
            init_causal_conv(f, f"decoder.{i}", layer)
            dim = layer.out_dim
        else:
            if layer.d_model != dim:
                raise ShapeError(f"decoder layer {i}: d_model {layer.d_model} != input dim {dim}")
            init_transformer(f, f"decoder.{i}", layer)
    joint_in = config.encoder.output_dim + config.decoder.output_dim
    f.weight("joint.w_f", joint_in, config.joint_dim)
    f.bias("joint.b_f", config.joint_dim)
    f.weight("joint.w_g", joint_in, config.joint_dim)
    f.bias("joint.b_g", config.joint_dim)
    f.weight("output.weight", config.joint_dim, config.vocab_size + 1)
    f.bias("output.bias", config.vocab_size + 1)
    return f.params


def alignment_points(full_sequence, T: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lattice coordinates ``(t, u)`` and symbol of every emission."""
    ts, us, syms = [], [], []
    t = u = 0
    for s in full_sequence:
        if t >= T:
            raise ContractError("alignment emits past the last frame")
        ts.append(t)
        us.append(u)
        syms.append(int(s))
        if s == BLANK_ID:
            t += 1
        else:
            u += 1
    if t != T:
        raise ContractError(f"alignment consumes {t} frames, encoder produced {T}")
    return np.asarray(ts), np.asarray(us), np.asarray(syms)


class RNNT:
    """Transducer with size-configurable encoder, prediction network and joint."""

    def __init__(self, config: RNNTConfig, params: ModelParams | None = None):
        self.config = config
        self.params = params if params is not None else build_params(config)

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def num_outputs(self) -> int:
        return self.config.vocab_size + 1

    def num_parameters(self) -> int:
        return self.params.num_parameters()

    def clone(self) -> "RNNT":
        return RNNT(self.config, self.params.clone())

    # ---------------------------------------------------------- encoder

    def encode(self, features, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """(T, F) features -> (ceil(T / stride), D_enc) hidden states."""
        x = features if isinstance(features, Tensor) else Tensor(np.asarray(features))
        cfg = self.config.encoder
        if x.ndim != 2 or x.shape[1] != cfg.feat_dim:
            raise ShapeError(f"encode: expected (T, {cfg.feat_dim}) features, got {x.shape}")
        if x.shape[0] == 0:
            raise EncoderLengthError("encode: empty feature matrix")
        if x.shape[0] < cfg.min_frames:
            raise EncoderLengthError(f"encode: {x.shape[0]} frames is shorter than the {cfg.min_frames}-frame receptive field")
        for i, layer in enumerate(cfg.layers):
            if isinstance(layer, TDNNLayer):
                x = tdnn_forward(self.params, f"encoder.{i}", layer, x)
            else:
                x = transformer_forward(self.params, f"encoder.{i}", layer, x, causal=False, training=training, rng=rng)
        return x

    def encoded_length(self, num_frames: int) -> int:
        stride = self.config.encoder.stride
        return -(-num_frames // stride)

    # ---------------------------------------------------- prediction net

    def _check_history(self, labels) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if np.any(labels == BLANK_ID):
            raise ContractError("label history must not contain blank")
        if labels.size and (labels.min() < 1 or labels.max() > self.vocab_size):
            raise ContractError("label outside the vocabulary")
        return labels

    def predict_all(self, labels) -> Tensor:
        """Prediction vectors for histories ``y[:0], ..., y[:U]``, shape (U+1, D_dec)."""
        labels = self._check_history(labels)
        ids = np.concatenate([[BLANK_ID], labels])
        x = ops.embedding_lookup(self.params["decoder.embedding"], ids)
        for i, layer in enumerate(self.config.decoder.layers):
            if isinstance(layer, CausalConvLayer):
                x = causal_conv_forward(self.params, f"decoder.{i}", layer, x)
            else:
                x = transformer_forward(self.params, f"decoder.{i}", layer, x, causal=True)
        return x

    def predict(self, history) -> Tensor:
        """Prediction vector conditioned on the non-blank history only."""
        out = self.predict_all(history)
        return ops.reshape(ops.take_slice(out, out.shape[0] - 1, out.shape[0], axis=0), (out.shape[1],))

    def _decoder_input_step(self, caches: tuple, token: int) -> tuple[tuple, np.ndarray]:
        x = self.params["decoder.embedding"].data[token]
        new = []
        for i, (layer, cache) in enumerate(zip(self.config.decoder.layers, caches)):
            if isinstance(layer, CausalConvLayer):
                x, c = causal_conv_step(self.params, f"decoder.{i}", layer, x, cache)
            else:
                x, c = transformer_step(self.params, f"decoder.{i}", layer, x, cache)
            new.append(c)
        return tuple(new), x

    def start_state(self) -> DecoderState:
        dtype = self.params["decoder.embedding"].data.dtype
        caches = tuple(
            causal_conv_cache(l, dtype) if isinstance(l, CausalConvLayer) else transformer_cache(l, dtype)
            for l in self.config.decoder.layers
        )
        caches, out = self._decoder_input_step(caches, BLANK_ID)
        return DecoderState((), caches, out)

    def extend_state(self, state: DecoderState, label: int) -> DecoderState:
        """Extend the history by one label at the cost of a single step."""
        self._check_history([label])
        caches, out = self._decoder_input_step(state.caches, int(label))
        return DecoderState(state.labels + (int(label),), caches, out)

    # ------------------------------------------------------------ joint

    def joint(self, h_enc: Tensor, h_dec: Tensor) -> Tensor:
        """tanh(W_f [h_enc; h_dec] + b_f) * sigmoid(W_g [h_enc; h_dec] + b_g)."""
        de, dd = self.config.encoder.output_dim, self.config.decoder.output_dim
        if h_enc.shape[-1] != de or h_dec.shape[-1] != dd:
            raise ShapeError(f"joint: expected dims ({de}, {dd}), got {h_enc.shape} and {h_dec.shape}")
        z = ops.concat(h_enc, h_dec, axis=-1)
        return self._glu(z)

    def _glu(self, z: Tensor) -> Tensor:
        p = self.params
        f = ops.tanh(ops.add(ops.matmul(z, p["joint.w_f"]), p["joint.b_f"]))
        g = ops.sigmoid(ops.add(ops.matmul(z, p["joint.w_g"]), p["joint.b_g"]))
        return ops.element_mul(f, g)

    def logits(self, h_joint: Tensor) -> Tensor:
        return ops.add(ops.matmul(h_joint, self.params["output.weight"]), self.params["output.bias"])

    def output_distribution(self, h_joint: Tensor, beta: float = 1.0) -> Tensor:
        """Log-probabilities over blank + symbols of softmax(beta * logits)."""
        if beta <= 0:
            raise ValueError(f"smoothing factor beta must be positive, got {beta}")
        z = self.logits(h_joint)
        if beta != 1.0:
            z = ops.scale(z, beta)
        return ops.log_softmax(z, axis=-1)

    def lattice_log_probs(self, enc: Tensor, dec: Tensor, beta: float = 1.0) -> Tensor:
        """Output log-distribution at every (t, u): shape (T', U+1, V+1)."""
        return self.output_distribution(self._glu(ops.outer_concat(enc, dec)), beta)

    def path_log_probs(self, enc: Tensor, dec: Tensor, full_sequence) -> Tensor:
        """Log-probability of each emission along one alignment, shape (T'+U,)."""
        ts, us, syms = alignment_points(full_sequence, enc.shape[0])
        if us.size and us.max() >= dec.shape[0]:
            raise ContractError("alignment uses more labels than the prediction vectors cover")
        z = ops.concat(ops.gather(enc, (ts,)), ops.gather(dec, (us,)), axis=-1)
        lp = self.output_distribution(self._glu(z))
        return ops.gather(lp, (np.arange(len(syms)), syms))

    # ----------------------------------------------- numpy inference path

    def joint_logits_np(self, h_enc: np.ndarray, h_dec: np.ndarray) -> np.ndarray:
        """Logits for one encoder frame against a stack of prediction vectors."""
        p = self.params
        h_dec = np.atleast_2d(h_dec)
        z = np.concatenate([np.broadcast_to(h_enc, (h_dec.shape[0], h_enc.shape[-1])), h_dec], axis=-1)
        f = np.tanh(z @ p["joint.w_f"].data + p["joint.b_f"].data)
        a = z @ p["joint.w_g"].data + p["joint.b_g"].data
        g = 0.5 * (1.0 + np.tanh(0.5 * a))
        return (f * g) @ p["output.weight"].data + p["output.bias"].data
