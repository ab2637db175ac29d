"""Transducer model, external LM, configuration and checkpoint I/O."""

from .checkpoint import CheckpointError, load_model, read_checkpoint, save_model, write_checkpoint
from .config import (
    CausalConvLayer,
    DecoderConfig,
    EncoderConfig,
    NNLMConfig,
    RNNTConfig,
    TDNNLayer,
    TransformerLayer,
    desk_config,
    desk_nnlm_config,
    full_config,
    full_nnlm_config,
    tiny_config,
)
from .nnlm import NNLM, NNLMState
from .params import ModelParams
from .rnnt import RNNT, ContractError, DecoderState, EncoderLengthError, alignment_points
from .vocab import BLANK_ID, Vocab
