"""Architecture configuration for the transducer and the external LM."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Union


@dataclass
class TDNNLayer:
    context: tuple[int, ...]
    dim: int
    stride: int = 1
    type: str = "tdnn"


@dataclass
class TransformerLayer:
    d_model: int
    d_ff: int
    heads: int
    dropout: float = 0.0
    type: str = "transformer"


@dataclass
class CausalConvLayer:
    in_dim: int
    out_dim: int
    kernel: int
    type: str = "causal_conv"


Layer = Union[TDNNLayer, TransformerLayer, CausalConvLayer]

_LAYER_TYPES = {"tdnn": TDNNLayer, "transformer": TransformerLayer, "causal_conv": CausalConvLayer}


def _layer_from_dict(d: dict) -> Layer:
    d = dict(d)
    cls = _LAYER_TYPES[d.pop("type")]
    if "context" in d:
        d["context"] = tuple(d["context"])
    return cls(**d)


@dataclass
class EncoderConfig:
    feat_dim: int
    layers: list

    def __post_init__(self):
        self.layers = [_layer_from_dict(l) if isinstance(l, dict) else l for l in self.layers]
        strided = [l for l in self.layers if isinstance(l, TDNNLayer) and l.stride > 1]
        if len(strided) > 1:
            raise ValueError("at most one encoder layer may subsample (stride > 1)")
        for l in self.layers:
            if isinstance(l, TDNNLayer) and sorted(l.context) != sorted(-c for c in l.context):
                raise ValueError(f"TDNN context {l.context} is not symmetric")
            if isinstance(l, CausalConvLayer):
                raise ValueError("causal convolutions belong in the decoder")

    @property
    def stride(self) -> int:
        s = 1
        for l in self.layers:
            if isinstance(l, TDNNLayer):
                s *= l.stride
        return s

    @property
    def output_dim(self) -> int:
        dim = self.feat_dim
        for l in self.layers:
            dim = l.dim if isinstance(l, TDNNLayer) else l.d_model
        return dim

    def context_frames(self) -> tuple[int, int]:
        """Left and right input-frame context of the TDNN stack."""
        left = right = 0
        scale = 1
        for l in self.layers:
            if isinstance(l, TDNNLayer):
                left += -min(l.context) * scale
                right += max(l.context) * scale
                scale *= l.stride
        return left, right

    @property
    def min_frames(self) -> int:
        left, right = self.context_frames()
        return 1 + left + right


@dataclass
class DecoderConfig:
    embed_dim: int
    layers: list

    def __post_init__(self):
        self.layers = [_layer_from_dict(l) if isinstance(l, dict) else l for l in self.layers]
        for l in self.layers:
            if isinstance(l, TDNNLayer):
                raise ValueError("the prediction network only takes causal layers")

    @property
    def output_dim(self) -> int:
        dim = self.embed_dim
        for l in self.layers:
            dim = l.out_dim if isinstance(l, CausalConvLayer) else l.d_model
        return dim


@dataclass
class RNNTConfig:
    vocab_size: int
    encoder: EncoderConfig
    decoder: DecoderConfig
    joint_dim: int
    seed: int = 0

    def to_dict(self) -> dict:
        return {"kind": "rnnt", **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "RNNTConfig":
        d = {k: v for k, v in d.items() if k != "kind"}
        return cls(
            vocab_size=d["vocab_size"],
            encoder=EncoderConfig(**d["encoder"]),
            decoder=DecoderConfig(**d["decoder"]),
            joint_dim=d["joint_dim"],
            seed=d.get("seed", 0),
        )


@dataclass
class NNLMConfig:
    vocab_size: int
    embed_dim: int
    hidden: int
    layers: int = 1
    output_hidden: int | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        return {"kind": "nnlm", **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "NNLMConfig":
        return cls(**{k: v for k, v in d.items() if k != "kind"})


def config_from_dict(d: dict):
    return NNLMConfig.from_dict(d) if d.get("kind") == "nnlm" else RNNTConfig.from_dict(d)


# ------------------------------------------------------------------ presets


def desk_config(vocab_size: int = 16, feat_dim: int = 8, seed: int = 0, dropout: float = 0.0) -> RNNTConfig:
    """Small CPU-trainable transducer: one encoder block, one decoder block."""
    return RNNTConfig(
        vocab_size=vocab_size,
        encoder=EncoderConfig(
            feat_dim=feat_dim,
            layers=[
                TDNNLayer(context=(-1, 0, 1), dim=32),
                TDNNLayer(context=(-1, 0, 1), dim=32, stride=2),
                TransformerLayer(d_model=32, d_ff=64, heads=2, dropout=dropout),
            ],
        ),
        decoder=DecoderConfig(
            embed_dim=32,
            layers=[CausalConvLayer(32, 32, kernel=3), TransformerLayer(d_model=32, d_ff=64, heads=2)],
        ),
        joint_dim=32,
        seed=seed,
    )


def tiny_config(vocab_size: int = 2, feat_dim: int = 3, seed: int = 0, stride: int = 1) -> RNNTConfig:
    """A few hundred parameters; for exhaustive and finite-difference oracles."""
    return RNNTConfig(
        vocab_size=vocab_size,
        encoder=EncoderConfig(
            feat_dim=feat_dim,
            layers=[TDNNLayer(context=(-1, 0, 1), dim=4, stride=stride), TransformerLayer(4, 6, heads=2)],
        ),
        decoder=DecoderConfig(embed_dim=4, layers=[CausalConvLayer(4, 4, kernel=2), TransformerLayer(4, 6, heads=2)]),
        joint_dim=5,
        seed=seed,
    )


def desk_nnlm_config(vocab_size: int = 16, seed: int = 0) -> NNLMConfig:
    return NNLMConfig(vocab_size=vocab_size, embed_dim=32, hidden=64, layers=1, seed=seed)


FULL_VOCAB = 6267  # non-blank output symbols; 6268 outputs with blank
FULL_JOINT_DIM = 850


def full_config(vocab_size: int = FULL_VOCAB, feat_dim: int = 40) -> RNNTConfig:
    """Full-size architecture (never trained here).  A joint width of 850
    gives a total of about 65.1M parameters."""
    ctx1, ctx3 = (-1, 0, 1), (-3, 0, 3)
    enc = []
    for block, heads in enumerate((16, 16, 8)):
        ctx = ctx1 if block == 0 else ctx3
        for i in range(3):
            stride = 3 if block == 2 and i == 2 else 1
            enc.append(TDNNLayer(context=ctx, dim=1024, stride=stride))
        enc.append(TransformerLayer(d_model=1024, d_ff=1024, heads=heads, dropout=0.2))
    dec = []
    for i in range(3):
        dec.append(CausalConvLayer(100 if i == 0 else 512, 512, kernel=5))
        dec.append(TransformerLayer(d_model=512, d_ff=2048, heads=8))
    return RNNTConfig(
        vocab_size=vocab_size,
        encoder=EncoderConfig(feat_dim=feat_dim, layers=enc),
        decoder=DecoderConfig(embed_dim=100, layers=dec),
        joint_dim=FULL_JOINT_DIM,
    )


def full_nnlm_config(vocab_size: int = FULL_VOCAB) -> NNLMConfig:
    """2 x 1024 LSTM with 200-dim embeddings.  A 1024-unit layer before the
    output projection brings the total to about 22.1M parameters."""
    return NNLMConfig(vocab_size=vocab_size, embed_dim=200, hidden=1024, layers=2, output_hidden=1024)


PRESETS = {"desk": desk_config, "tiny": tiny_config, "full": full_config}
