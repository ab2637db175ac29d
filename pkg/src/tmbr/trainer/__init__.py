"""Training orchestration: schedules, BMUF, data pipeline and evaluation."""

from .config import (
    ConfigError,
    TrainConfig,
    recipe_mbr_config,
    recipe_rnnt_config,
    read_kv_file,
    train_config_from_strings,
    write_kv_file,
)
from .data import (
    Dataset,
    Utterance,
    UtteranceBatch,
    build_pipeline,
    label_stream,
    load_dataset,
    save_dataset,
    synth_dataset,
)
from .evaluate import CerReport, cer_from_pairs, evaluate_cer
from .loop import MetricsLog, TrainingDiverged, TrainResult, read_metrics, train
from .optim import SGD, Adam, BmufState, bmuf_sync, clip_gradients, lr_at, make_optimizer
