"""Training loops for the transducer (likelihood or MBR) and the external LM."""

from __future__ import annotations

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..autodiff import NumericError, Tape, Tensor, backward, ops
from ..beam_search import FusionConfig, beam_search_nbest
from ..mbr import mbr_utterance_loss
from ..model.checkpoint import load_model, save_model
from ..model.nnlm import NNLM
from ..model.rnnt import RNNT
from ..transducer_loss import transducer_nll
from .config import TrainConfig
from .data import UtteranceBatch, build_pipeline, label_stream
from .evaluate import evaluate_cer
from .optim import BmufState, bmuf_sync, clip_gradients, lr_at, make_optimizer


class TrainingDiverged(RuntimeError):
    """Loss or gradient became non-finite; ``last_checkpoint`` is intact."""

    def __init__(self, message: str, last_checkpoint: Path | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainResult:
    model: RNNT | NNLM
    checkpoints: list[Path] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)
    dev_scores: list[float] = field(default_factory=list)
    total_batches: int = 0


class MetricsLog:
    """Newline-delimited JSON records; appends are serialised by a lock."""

    def __init__(self, path: Path | None = None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.write_text("", encoding="utf-8")

    def extend(self, records: Sequence[dict]) -> None:
        with self._lock:
            self.records.extend(records)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    for r in records:
                        fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ------------------------------------------------------------ batch losses


def _mean(losses: list[Tensor]) -> Tensor:
    total = losses[0]
    for l in losses[1:]:
        total = ops.add(total, l)
    return ops.scale(total, 1.0 / len(losses)) if len(losses) > 1 else total


def rnnt_batch_loss(model: RNNT, batch: UtteranceBatch, rng: np.random.Generator) -> tuple[Tensor, dict]:
    losses = []
    for u in batch.utterances:
        enc = model.encode(u.features, training=True, rng=rng)
        lattice = model.lattice_log_probs(enc, model.predict_all(u.labels))
        losses.append(transducer_nll(lattice, u.labels))
    return _mean(losses), {}


def search_nbest(model: RNNT, batch: UtteranceBatch, config: TrainConfig, nnlm: NNLM | None) -> list[list]:
    """On-the-fly N-best lists from the current parameters (no tape)."""
    use_lm = config.use_nnlm_in_search and nnlm is not None
    fusion = FusionConfig(lm_weight=config.lm_weight, beta=config.search_beta, nnlm_enabled=use_lm)
    return [
        beam_search_nbest(model, u.features, config.nbest_size, fusion, nnlm if use_lm else None)
        for u in batch.utterances
    ]


def mbr_batch_loss(
    model: RNNT, batch: UtteranceBatch, rng: np.random.Generator, config: TrainConfig, nbest: list[list]
) -> tuple[Tensor, dict]:
    losses, risks = [], []
    for u, hyps in zip(batch.utterances, nbest):
        terms = mbr_utterance_loss(model, u.features, u.labels, hyps, config.reg_lambda, training=True, rng=rng)
        losses.append(terms.loss)
        risks.append(terms.avg_risk)
    return _mean(losses), {"avg_risk": float(np.mean(risks))}


def nnlm_batch_step(model: NNLM, batch: UtteranceBatch, bptt: int) -> tuple[float, dict]:
    """Per-token cross-entropy over the batch's label stream with truncated
    back-propagation every ``bptt`` predictions; gradients accumulate over
    windows so each batch is one update."""
    tokens = label_stream(batch.utterances, model.sos_id)
    n_total = len(tokens) - 1
    state = None
    total = 0.0
    for start in range(0, n_total, bptt):
        window = tokens[start : start + bptt + 1]
        with Tape() as tape:
            nll, _, state = model.stream_nll(window, state)
            loss = ops.scale(nll, 1.0 / n_total)
        backward(tape, loss)
        total += float(nll.item())
        state = [Tensor(s.data) for s in state]
    return total / n_total, {}


# ---------------------------------------------------------------- workers


class _Worker:
    def __init__(self, index: int, model, config: TrainConfig, nnlm: NNLM | None):
        self.index = index
        self.model = model
        self.config = config
        self.nnlm = nnlm
        self.optimizer = make_optimizer(config)
        self.rng = np.random.default_rng([config.dropout_seed, index])

    def step(self, batch: UtteranceBatch, lr: float) -> dict:
        cfg = self.config
        params = self.model.params
        params.zero_grad()
        if cfg.mode == "nnlm":
            value, extra = nnlm_batch_step(self.model, batch, cfg.bptt)
        else:
            nbest = search_nbest(self.model, batch, cfg, self.nnlm) if cfg.mode == "mbr" else None
            with Tape() as tape:
                if cfg.mode == "mbr":
                    loss, extra = mbr_batch_loss(self.model, batch, self.rng, cfg, nbest)
                else:
                    loss, extra = rnnt_batch_loss(self.model, batch, self.rng)
            backward(tape, loss)
            value = float(loss.item())
        if not np.isfinite(value):
            raise NumericError(f"non-finite {cfg.mode} loss")
        for name, t in params.items():
            if t.grad is not None and not np.all(np.isfinite(t.grad)):
                raise NumericError(f"non-finite gradient for {name}")
        clip_gradients(params, cfg.grad_clip)
        self.optimizer.step(params, lr)
        return {"loss": value, **extra}

    def run(self, jobs: list[tuple[int, int, UtteranceBatch]], total: int) -> list[dict]:
        out = []
        for idx, epoch, batch in jobs:
            t0 = time.perf_counter()
            lr = lr_at(self.config, idx, total)
            rec = self.step(batch, lr)
            rec.update(batch=idx, epoch=epoch, mode=self.config.mode, lr=lr)
            rec["wall_ms"] = (time.perf_counter() - t0) * 1000.0
            out.append(rec)
        return out


# ------------------------------------------------------------------ train


def _dev_score(model, nnlm, dev, config: TrainConfig) -> float:
    if isinstance(model, NNLM):
        tokens = label_stream(dev, model.sos_id)
        nll, n, _ = model.stream_nll(tokens)
        return float(nll.item()) / n
    fusion = FusionConfig(lm_weight=0.0, beta=config.eval_beta)
    return evaluate_cer(model, None, dev, fusion, config.eval_beam).cer


def train(
    config: TrainConfig,
    model: RNNT | NNLM | None,
    dataset,
    dev=None,
    out_dir=None,
    init_checkpoint=None,
    nnlm: NNLM | None = None,
    on_epoch: Callable[[int, float | None], None] | None = None,
) -> TrainResult:
    """Run ``config.epochs`` epochs and return the trained (global) model.

    ``mode = mbr`` starts from ``init_checkpoint`` (required) and, per batch,
    searches N-best lists with the current parameters before optimising
    the regularised expected risk.  ``dev`` (optional) is scored after every
    epoch: CER for transducers, per-token NLL for the LM.  With ``out_dir``
    the metrics go to ``metrics.ndjson`` and each epoch's parameters to
    ``epoch-NNN.ckpt`` (``epoch-000`` is the starting point).
    """
    if config.mode == "mbr":
        if init_checkpoint is None:
            raise ValueError("mode=mbr needs an initial checkpoint from transducer training")
        model = load_model(init_checkpoint)
        if not isinstance(model, RNNT):
            raise ValueError(f"{init_checkpoint} does not hold a transducer")
    elif init_checkpoint is not None:
        model = load_model(init_checkpoint)
    if model is None:
        raise ValueError("no model given")
    if (config.mode == "nnlm") != isinstance(model, NNLM):
        raise ValueError(f"mode={config.mode} does not match model type {type(model).__name__}")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log = MetricsLog(out / "metrics.ndjson" if out is not None else None)
    result = TrainResult(model)

    def checkpoint(epoch: int) -> None:
        if out is not None:
            path = out / f"epoch-{epoch:03d}.ckpt"
            save_model(path, model)
            result.checkpoints.append(path)

    checkpoint(0)
    if config.epochs == 0:
        return result

    epochs = [build_pipeline(dataset, config, e) for e in range(config.epochs)]
    total = sum(len(b) for b in epochs)
    result.total_batches = total
    W = config.workers
    if config.use_bmuf:
        workers = [_Worker(w, model.clone(), config, nnlm) for w in range(W)]
    else:
        workers = [_Worker(0, model, config, nnlm)]
    state = BmufState()
    last_good = model.params.clone()
    block = W * config.sync_period
    idx = 0
    pool = ThreadPoolExecutor(max_workers=W) if W > 1 else None
    try:
        for epoch, batches in enumerate(epochs, start=1):
            jobs = []
            for b in batches:
                jobs.append((idx, epoch, b))
                idx += 1
            for start in range(0, len(jobs), block):
                chunk = jobs[start : start + block]
                shares = [chunk[w::W] for w in range(W)]
                try:
                    if pool is None:
                        records = workers[0].run(shares[0], total)
                    else:
                        futures = [pool.submit(wk.run, share, total) for wk, share in zip(workers, shares)]
                        records = [r for f in futures for r in f.result()]
                except NumericError as exc:
                    model.params.assign(last_good)
                    last = result.checkpoints[-1] if result.checkpoints else None
                    raise TrainingDiverged(f"training diverged in epoch {epoch}: {exc}", last) from exc
                log.extend(sorted(records, key=lambda r: r["batch"]))
                if config.use_bmuf:
                    bmuf_sync(model.params, [wk.model.params for wk in workers], config.block_momentum, config.block_lr, state)
            last_good = model.params.clone()
            checkpoint(epoch)
            score = _dev_score(model, nnlm, dev, config) if dev is not None else None
            if score is not None:
                result.dev_scores.append(score)
            if on_epoch is not None:
                on_epoch(epoch, score)
    finally:
        if pool is not None:
            pool.shutdown()
    result.metrics = log.records
    if out is not None and result.dev_scores:
        (out / "dev_scores.json").write_text(json.dumps(result.dev_scores) + "\n", encoding="utf-8")
    return result
