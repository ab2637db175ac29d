"""Command-line entry point: ``tmbr <command> [--config F] [--set k=v] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .autodiff import NumericError, Tensor, grad_check_params, grad_check_tensors, ops
from .beam_search import FusionConfig, beam_search_nbest, read_decode, write_decode, write_nbest
from .mbr import expected_risk, sequence_log_probs
from .model import NNLM, RNNT, CheckpointError, NNLMConfig, Vocab, load_model, save_model
from .model.config import PRESETS, desk_nnlm_config
from .oracles import exhaustive_nbest
from .trainer import (
    ConfigError,
    TrainConfig,
    TrainingDiverged,
    cer_from_pairs,
    load_dataset,
    read_kv_file,
    save_dataset,
    synth_dataset,
    train,
)
from .trainer.config import config_types, parse_value
from .transducer_loss import Lattice, brute_force_loss, forward_backward, transducer_nll

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
EXHAUSTIVE_BEAM = 1000

_TRAIN_KEYS = {k: (t, None) for k, t in config_types(TrainConfig).items() if k != "mode"}
_RUN_KEYS = {
    "train_data": (str, ""),
    "dev_data": (str, ""),
    "model": (str, "desk"),
    "dropout": (float, 0.0),
    "init_checkpoint": (str, ""),
    "nnlm_checkpoint": (str, ""),
}
_NNLM_KEYS = {"embed_dim": (int, 32), "hidden": (int, 64), "layers": (int, 1)}

SCHEMAS: dict[str, dict[str, tuple[type, Any]]] = {
    "synth-data": {
        "seed": (int, 0),
        "vocab_size": (int, 16),
        "n_utts": (int, 2000),
        "n_dev": (int, 200),
        "frames_per_label": (int, 4),
        "noise_sigma": (float, 0.1),
        "feat_dim": (int, 8),
        "distinct_adjacent": (bool, True),
    },
    "train": {**_TRAIN_KEYS, **_RUN_KEYS},
    "mbr-train": {**_TRAIN_KEYS, **_RUN_KEYS},
    "train-nnlm": {**_TRAIN_KEYS, **_RUN_KEYS, **_NNLM_KEYS},
    "decode": {
        "seed": (int, 0),
        "checkpoint": (str, ""),
        "data": (str, ""),
        "beam_size": (int, 8),
        "beta": (float, 0.8),
        "lm_weight": (float, 0.1),
        "nnlm_checkpoint": (str, ""),
        "max_symbols_per_step": (int, 3),
        "vocab": (str, ""),
    },
    "eval": {"seed": (int, 0), "decode_file": (str, ""), "data": (str, ""), "vocab": (str, "")},
    "gradcheck": {"seed": (int, 0), "eps": (float, 1e-3), "network_eps": (float, 1e-4), "tolerance": (float, 1e-3)},
    "oracle-check": {"seed": (int, 0), "lattices": (int, 200), "beam_models": (int, 20)},
}

_MODE = {"train": "rnnt", "mbr-train": "mbr", "train-nnlm": "nnlm"}


# -------------------------------------------------------------- config


def resolve_config(command: str, config_path: str | None, overrides: list[str], seed: int | None) -> dict:
    schema = SCHEMAS[command]
    raw: dict[str, str] = {}
    if config_path:
        try:
            raw.update(read_kv_file(config_path))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {config_path}: {exc}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    if seed is not None:
        raw["seed"] = str(seed)
    values = {}
    for key, text in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r} for command {command}")
        values[key] = parse_value(text, schema[key][0], key)
    if command in _MODE:
        train_fields = {k: v for k, v in values.items() if k in _TRAIN_KEYS}
        tc = TrainConfig(mode=_MODE[command], **train_fields)
        resolved = tc.to_dict()
        resolved.update({k: values.get(k, d) for k, (_, d) in schema.items() if k not in _TRAIN_KEYS})
        return resolved
    return {k: values.get(k, default) for k, (_, default) in schema.items()}


def banner(command: str, cfg: dict, out: Path | None, stream) -> None:
    print(f"tmbr {__version__} {command} seed={cfg.get('seed')}", file=stream)
    for k in sorted(cfg):
        print(f"  {k} = {cfg[k]}", file=stream)
    if out is not None:
        print(f"  (out = {out})", file=stream)


def _require(cfg: dict, *keys: str) -> None:
    for k in keys:
        if not cfg.get(k):
            raise ConfigError(f"missing required key {k!r}")


# ------------------------------------------------------------ commands


def cmd_synth_data(cfg: dict, out: Path, stream) -> None:
    ds = synth_dataset(
        cfg["vocab_size"],
        cfg["n_utts"] + cfg["n_dev"],
        cfg["frames_per_label"],
        cfg["noise_sigma"],
        cfg["seed"],
        feat_dim=cfg["feat_dim"],
        distinct_adjacent=cfg["distinct_adjacent"],
    )
    out.mkdir(parents=True, exist_ok=True)
    if cfg["n_dev"] > 0:
        tr, dev = ds.split(cfg["n_dev"])
        save_dataset(out / "dev.tmbd", dev)
    else:
        tr = ds
    save_dataset(out / "train.tmbd", tr)
    Vocab.default(cfg["vocab_size"]).save(out / "vocab.txt")
    print(f"wrote {len(tr)} train / {cfg['n_dev']} dev utterances to {out}", file=stream)


def _train_config(cfg: dict, mode: str) -> TrainConfig:
    keys = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in cfg.items() if k in keys and k != "mode"}, mode=mode)


def cmd_train(cfg: dict, out: Path, stream, mode: str) -> None:
    _require(cfg, "train_data")
    if mode == "mbr":
        _require(cfg, "init_checkpoint")
    tc = _train_config(cfg, mode)
    data = load_dataset(cfg["train_data"])
    dev = load_dataset(cfg["dev_data"]) if cfg["dev_data"] else None
    nnlm = load_model(cfg["nnlm_checkpoint"]) if cfg["nnlm_checkpoint"] else None
    model = None
    init = cfg["init_checkpoint"] or None
    if mode == "rnnt" and init is None:
        if cfg["model"] not in PRESETS or cfg["model"] == "full":
            raise ConfigError(f"model: expected 'desk' or 'tiny', got {cfg['model']!r}")
        kw = {"dropout": cfg["dropout"]} if cfg["model"] == "desk" else {}
        model = RNNT(PRESETS[cfg["model"]](vocab_size=data.vocab_size, feat_dim=data.feat_dim, seed=tc.seed, **kw))
    elif mode == "nnlm" and init is None:
        base = desk_nnlm_config(data.vocab_size, seed=tc.seed)
        model = NNLM(NNLMConfig(data.vocab_size, cfg["embed_dim"], cfg["hidden"], cfg["layers"], None, base.seed))

    def report(epoch: int, score) -> None:
        label = "dev_nll" if mode == "nnlm" else "dev_cer"
        print(f"epoch {epoch}: {label} = {score if score is None else round(score, 4)}", file=stream, flush=True)

    result = train(tc, model, data, dev=dev, out_dir=out, init_checkpoint=init, nnlm=nnlm, on_epoch=report)
    save_model(out / "final.ckpt", result.model)
    print(f"{result.total_batches} batches; final checkpoint {out / 'final.ckpt'}", file=stream)


def _vocab(path: str) -> Vocab | None:
    return Vocab.load(path) if path else None


def cmd_decode(cfg: dict, out: Path, stream) -> None:
    _require(cfg, "checkpoint", "data")
    model = load_model(cfg["checkpoint"])
    if not isinstance(model, RNNT):
        raise ConfigError(f"checkpoint: {cfg['checkpoint']} is not a transducer")
    nnlm = load_model(cfg["nnlm_checkpoint"]) if cfg["nnlm_checkpoint"] else None
    fusion = FusionConfig(lm_weight=cfg["lm_weight"], beta=cfg["beta"], nnlm_enabled=nnlm is not None)
    data = load_dataset(cfg["data"])
    results = []
    for u in data:
        hyps = beam_search_nbest(model, u.features, cfg["beam_size"], fusion, nnlm, cfg["max_symbols_per_step"])
        results.append((u.id, hyps))
    out.mkdir(parents=True, exist_ok=True)
    vocab = _vocab(cfg["vocab"])
    write_decode(out / "decode.txt", results, vocab)
    write_nbest(out / "nbest.txt", results, vocab)
    print(f"decoded {len(results)} utterances to {out / 'decode.txt'}", file=stream)


def cmd_eval(cfg: dict, out: Path, stream) -> float:
    _require(cfg, "decode_file", "data")
    hyps = read_decode(cfg["decode_file"], _vocab(cfg["vocab"]))
    data = load_dataset(cfg["data"])
    pairs = []
    for u in data:
        if u.id not in hyps:
            raise ValueError(f"utterance {u.id} missing from {cfg['decode_file']}")
        pairs.append((u.id, u.labels, hyps[u.id]))
    report = cer_from_pairs(pairs)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "cer_report.tsv", "w", encoding="utf-8") as fh:
        for r in report.utterances:
            fh.write(f"{r.id}\t{r.errors}\t{len(r.reference)}\n")
    print(f"CER = {report.cer:.4f} ({report.errors} errors / {report.ref_length} symbols)", file=stream)
    return report.cer


def _random_net_check(rng: np.random.Generator, eps: float) -> float:
    """Three-layer tanh/sigmoid/log-softmax network on a random scalar loss."""
    x = Tensor(rng.normal(size=(4, 5)))
    params = [Tensor(rng.normal(size=s) * 0.5, requires_grad=True) for s in [(5, 6), (6,), (6, 6), (6,), (6, 3), (3,)]]
    target = rng.integers(0, 3, size=4)

    def loss():
        h = ops.tanh(ops.add(ops.matmul(x, params[0]), params[1]))
        h = ops.sigmoid(ops.add(ops.matmul(h, params[2]), params[3]))
        lp = ops.log_softmax(ops.add(ops.matmul(h, params[4]), params[5]))
        return ops.scale(ops.reduce_sum(ops.gather(lp, (np.arange(4), target))), -1.0)

    return grad_check_tensors(loss, params, eps)


def _lattice_check(rng: np.random.Generator, eps: float) -> float:
    T, U, V = 3, 2, 3
    logits = Tensor(rng.normal(size=(T, U + 1, V + 1)), requires_grad=True)
    labels = list(rng.integers(1, V + 1, size=U))
    return grad_check_tensors(lambda: transducer_nll(ops.log_softmax(logits, axis=-1), labels), [logits], eps)


def _mbr_network_check(seed: int, eps: float) -> float:
    from .model import tiny_config

    model = RNNT(tiny_config(vocab_size=3, stride=1, seed=seed))
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(3, model.config.encoder.feat_dim))
    hyps = beam_search_nbest(model, feats, 2, FusionConfig(beta=1.0))
    risks = np.arange(len(hyps), dtype=float)

    def loss():
        enc = model.encode(feats)
        log_f, _ = sequence_log_probs(model, enc, hyps)
        return expected_risk(log_f, risks)

    return grad_check_params(loss, model.params, eps)


def cmd_gradcheck(cfg: dict, out: Path | None, stream) -> bool:
    rng = np.random.default_rng(cfg["seed"])
    checks = {
        "three-layer network": _random_net_check(rng, cfg["eps"]),
        "transducer loss": _lattice_check(rng, cfg["eps"]),
        "expected risk through transducer": _mbr_network_check(cfg["seed"], cfg["network_eps"]),
    }
    ok = True
    for name, err in checks.items():
        passed = err <= cfg["tolerance"]
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: max rel err {err:.3e}", file=stream)
    return ok


def cmd_oracle_check(cfg: dict, out: Path | None, stream) -> bool:
    from .model import tiny_config

    rng = np.random.default_rng(cfg["seed"])
    worst = 0.0
    for _ in range(cfg["lattices"]):
        T, U, V = int(rng.integers(1, 5)), int(rng.integers(0, 4)), int(rng.integers(1, 5))
        z = rng.normal(size=(T, U + 1, V + 1))
        lp = z - np.log(np.exp(z).sum(-1, keepdims=True))
        ref = rng.integers(1, V + 1, size=U)
        nll, _ = forward_backward(lp, ref)
        worst = max(worst, abs(nll - brute_force_loss(Lattice(lp, ref))))
    lat_ok = worst <= 1e-5
    print(f"{'PASS' if lat_ok else 'FAIL'} lattice brute force: {cfg['lattices']} lattices, max |diff| {worst:.3e}", file=stream)
    mismatches = 0
    for i in range(cfg["beam_models"]):
        model = RNNT(tiny_config(vocab_size=2, stride=1, seed=int(rng.integers(1 << 30))))
        feats = rng.normal(size=(3, model.config.encoder.feat_dim))
        fusion = FusionConfig(beta=0.8)
        exact = exhaustive_nbest(model, feats, fusion, max_labels=2)
        # Capacity well above every intermediate candidate count, so nothing is pruned.
        beam = beam_search_nbest(model, feats, EXHAUSTIVE_BEAM, fusion, max_labels=2)
        if [h.labels for h in beam] != [lab for lab, _ in exact]:
            mismatches += 1
    beam_ok = mismatches == 0
    print(
        f"{'PASS' if beam_ok else 'FAIL'} exhaustive beam: {cfg['beam_models']} models, {mismatches} ranking mismatches",
        file=stream,
    )
    return lat_ok and beam_ok


COMMANDS: dict[str, Callable] = {
    "synth-data": cmd_synth_data,
    "train": lambda c, o, s: cmd_train(c, o, s, "rnnt"),
    "mbr-train": lambda c, o, s: cmd_train(c, o, s, "mbr"),
    "train-nnlm": lambda c, o, s: cmd_train(c, o, s, "nnlm"),
    "decode": cmd_decode,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "oracle-check": cmd_oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tmbr", description="Transducer training, MBR fine-tuning and decoding.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key (repeatable)")
    p.add_argument("--seed", type=int, help="global seed override")
    p.add_argument("--out", default="out", help="output directory")
    return p


def run(argv: list[str] | None = None, stream=None) -> int:
    stream = stream if stream is not None else sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    out = Path(args.out)
    try:
        cfg = resolve_config(args.command, args.config, args.set, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    banner(args.command, cfg, out, stream)
    t0 = time.perf_counter()
    try:
        result = COMMANDS[args.command](cfg, out, stream)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"runtime error: {exc} (last good checkpoint: {exc.last_checkpoint})", file=sys.stderr)
        return EXIT_RUNTIME
    except (NumericError, CheckpointError, OSError, ValueError, KeyError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"done in {time.perf_counter() - t0:.1f} s", file=stream)
    if result is False:
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
