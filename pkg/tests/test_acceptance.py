"""Acceptance criteria, one test each, at the stated tolerances.

Every test prints a single ``[PASS]``/``[FAIL]`` line with the measured
quantities.  Run ``pytest tests/test_acceptance.py -v`` or execute this file
directly to print all eight lines.
"""

from __future__ import annotations

import contextlib
import math
import sys
import time
from dataclasses import dataclass

import numpy as np
import pytest

from tmbr.autodiff import Tape, backward, ops
from tmbr.autodiff.gradcheck import grad_check_params
from tmbr.beam_search import FusionConfig, beam_search_nbest, shallow_fuse
from tmbr.mbr import expected_risk, sequence_log_probs
from tmbr.model import RNNT, desk_config, tiny_config
from tmbr.oracles import exhaustive_nbest
from tmbr.trainer import (
    BmufState,
    TrainConfig,
    bmuf_sync,
    build_pipeline,
    cer_from_pairs,
    evaluate_cer,
    lr_at,
    make_optimizer,
    synth_dataset,
    train,
)
from tmbr.trainer.loop import rnnt_batch_loss
from tmbr.transducer_loss import Lattice, brute_force_loss, forward_backward

EXHAUSTIVE_BEAM = 1000
NOISE_CER = 0.5  # absolute CER points treated as run-to-run noise


@dataclass
class Outcome:
    passed: bool
    detail: str


def report(number: int, title: str, outcome: Outcome, sink=print) -> None:
    sink(f"[{'PASS' if outcome.passed else 'FAIL'}] criterion {number}: {title}: {outcome.detail}")


def _random_lattice(rng, T, U, V):
    z = rng.normal(size=(T, U + 1, V + 1)) * 2
    return z - np.log(np.exp(z).sum(-1, keepdims=True)), rng.integers(1, V + 1, size=U)


# --------------------------------------------------------------------- 1


def check_transducer_oracle() -> Outcome:
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_abs, worst_rel = 0.0, 0.0
    # Smaller steps lose the 1e-8-sized entries to cancellation.
    eps = 1e-3
    for _ in range(200):
        T, U, V = int(rng.integers(1, 5)), int(rng.integers(0, 4)), int(rng.integers(1, 5))
        lp, ref = _random_lattice(rng, T, U, V)
        nll, grad = forward_backward(lp, ref)
        worst_abs = max(worst_abs, abs(nll - brute_force_loss(Lattice(lp, ref))))
        num = np.zeros_like(lp)
        for idx in np.ndindex(lp.shape):
            up, dn = lp.copy(), lp.copy()
            up[idx] += eps
            dn[idx] -= eps
            num[idx] = (forward_backward(up, ref)[0] - forward_backward(dn, ref)[0]) / (2 * eps)
        denom = np.maximum(np.maximum(np.abs(grad), np.abs(num)), 1e-8)
        worst_rel = max(worst_rel, float((np.abs(grad - num) / denom).max()))
    elapsed = time.perf_counter() - t0
    ok = worst_abs <= 1e-5 and worst_rel <= 1e-3 and elapsed < 60
    return Outcome(ok, f"max |nll - brute| {worst_abs:.2e} (<= 1e-5), max grad rel err {worst_rel:.2e} (<= 1e-3), {elapsed:.1f} s (< 60)")


# --------------------------------------------------------------------- 2


KINK_MARGIN = 1e-3  # ten times the difference step
MAX_COORDS = 12  # probed coordinates per parameter tensor


@contextlib.contextmanager
def relu_inputs():
    """Collect the smallest |pre-activation| of every ReLU evaluated inside."""
    seen: list[float] = []
    real = ops.relu

    def probe(a):
        seen.append(float(np.abs(a.data).min()))
        return real(a)

    ops.relu = probe
    try:
        yield seen
    finally:
        ops.relu = real


def _frozen_space(seed: int, n: int, jitter: float = 0.0):
    model = RNNT(tiny_config(vocab_size=3, stride=1, seed=seed))
    rng = np.random.default_rng(seed)
    if jitter:
        # Zero-initialised biases put exact zeros into ReLU and layer-norm
        # inputs; jittering moves the check to a generic point.
        for t in model.params.values():
            t.data = (t.data + rng.normal(scale=jitter, size=t.shape)).astype(t.data.dtype)
    feats = rng.normal(size=(3, model.config.encoder.feat_dim))
    hyps = beam_search_nbest(model, feats, n, FusionConfig(beta=1.0))
    return model, feats, hyps


def check_mbr_gradient() -> Outcome:
    t0 = time.perf_counter()
    worst = 0.0
    made = 0
    seed = 0
    near_kink = 0
    while made < 50:
        n = 2 + made % 3
        model, feats, hyps = _frozen_space(seed, n, jitter=0.1)
        seed += 1
        if len(hyps) < n:
            continue
        risks = np.random.default_rng(10_000 + seed).integers(0, 5, size=n).astype(float)
        if np.all(risks == risks[0]):
            risks[0] += 1

        def loss():
            log_f, _ = sequence_log_probs(model, model.encode(feats), hyps)
            return expected_risk(log_f, risks)

        # Central differences are undefined where a ReLU input sits on its kink.
        with relu_inputs() as margins:
            loss()
        if min(margins) < KINK_MARGIN:
            near_kink += 1
            continue
        worst = max(worst, grad_check_params(loss, model.params, 1e-4, max_coords=MAX_COORDS, seed=seed))
        made += 1

    # All-equal risks: every parameter gradient must be exactly zero.
    nonzero = 0
    for s in range(10):
        model, feats, hyps = _frozen_space(500 + s, 3)
        model.params.zero_grad()
        with Tape() as tape:
            log_f, _ = sequence_log_probs(model, model.encode(feats), hyps)
            out = expected_risk(log_f, np.full(len(hyps), 2.0))
        backward(tape, out)
        nonzero += sum(int(np.count_nonzero(t.grad)) for t in model.params.values() if t.grad is not None)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-3 and nonzero == 0 and elapsed < 120
    return Outcome(
        ok,
        f"50 spaces max rel err {worst:.2e} (<= 1e-3; {near_kink} draws skipped within {KINK_MARGIN} of a ReLU kink), "
        f"{nonzero} nonzero grads for equal risks, {elapsed:.1f} s (< 120)",
    )


# --------------------------------------------------------------------- 3


def check_fusion() -> Outcome:
    rng = np.random.default_rng(7)
    worst_sum = 0.0
    blank_ok = identity_ok = True
    for _ in range(1000):
        V = int(rng.integers(1, 20))
        p = rng.normal(size=V + 1) * 2
        p -= np.log(np.exp(p).sum())
        q = rng.normal(size=V) * 2
        q -= np.log(np.exp(q).sum())
        for lam in (0.0, 0.1, 0.5, 1.0):
            out = shallow_fuse(p, q, lam)
            worst_sum = max(worst_sum, abs(float(np.exp(out).sum()) - 1.0))
            blank_ok &= bool(out[0] == p[0])
            if lam == 0.0:
                identity_ok &= bool(np.array_equal(out, p))
    worked = np.exp(shallow_fuse(np.log([0.5, 0.3, 0.2]), np.log([0.5, 0.5]), 0.5))
    worked_err = float(np.abs(worked - [0.5, 0.27524, 0.22476]).max())
    ok = worst_sum <= 1e-6 and blank_ok and identity_ok and worked_err <= 1e-4
    return Outcome(
        ok,
        f"max |sum - 1| {worst_sum:.1e} (<= 1e-6), blank bit-equal {blank_ok}, lambda=0 identity {identity_ok}, "
        f"worked example err {worked_err:.1e} (<= 1e-4)",
    )


# --------------------------------------------------------------------- 4


def check_beam_oracle() -> Outcome:
    rng = np.random.default_rng(99)
    mismatches = 0
    violations = 0
    instances = 30
    for _ in range(instances):
        model = RNNT(tiny_config(vocab_size=2, stride=1, seed=int(rng.integers(1 << 30))))
        feats = rng.normal(size=(3, model.config.encoder.feat_dim))
        assert model.encoded_length(3) == 3
        fusion = FusionConfig(beta=float(rng.choice([1.0, 0.8])))
        exact = [labels for labels, _ in exhaustive_nbest(model, feats, fusion, max_labels=2)]
        beam = [h.labels for h in beam_search_nbest(model, feats, EXHAUSTIVE_BEAM, fusion, max_labels=2)]
        mismatches += beam != exact
        best = [beam_search_nbest(model, feats, b, fusion)[0].fused_score for b in (1, 2, 4, 8)]
        violations += sum(b < a for a, b in zip(best, best[1:]))
    ok = mismatches == 0 and violations == 0
    return Outcome(ok, f"{instances} instances, {mismatches} ranking mismatches, {violations} monotonicity violations over b in 1,2,4,8")


# --------------------------------------------------------------------- 5


def check_lr_schedule() -> Outcome:
    cfg = TrainConfig(initial_lr=1e-3, final_lr=1e-4)
    total = 1000
    start, end = lr_at(cfg, 0, total), lr_at(cfg, total, total)
    mid = lr_at(cfg, total // 2, total)
    xs = (0, 300, total)
    ys = [math.log(lr_at(cfg, x, total)) for x in xs]
    collinear = abs(ys[1] - (ys[0] + (ys[2] - ys[0]) * xs[1] / xs[2]))
    ok = start == 1e-3 and end == 1e-4 and abs(mid - 3.1623e-4) <= 1e-8 and collinear <= 1e-9
    return Outcome(ok, f"endpoints {start!r}, {end!r}; midpoint {mid:.8e} (3.1623e-4 +- 1e-8); collinearity {collinear:.1e} (<= 1e-9)")


# --------------------------------------------------------------------- 6


def _step(model, optimizer, batch, rng, lr):
    model.params.zero_grad()
    with Tape() as tape:
        loss, _ = rnnt_batch_loss(model, batch, rng)
    backward(tape, loss)
    optimizer.step(model.params, lr)


def check_bmuf() -> Outcome:
    data = synth_dataset(4, 50, frames_per_label=2, seed=3)
    cfg = TrainConfig(epochs=1, batch_size=1, workers=1, block_momentum=0.0, block_lr=1.0, initial_lr=0.05, final_lr=0.005)
    batches = build_pipeline(data, cfg)
    assert len(batches) == 50

    serial = RNNT(tiny_config(vocab_size=4, feat_dim=8, stride=1, seed=1))
    global_model = serial.clone()
    worker = global_model.clone()
    opt_s, opt_w = make_optimizer(cfg), make_optimizer(cfg)
    state = BmufState()
    worst = 0.0
    for k, batch in enumerate(batches):
        lr = lr_at(cfg, k, len(batches))
        _step(serial, opt_s, batch, np.random.default_rng(k), lr)
        _step(worker, opt_w, batch, np.random.default_rng(k), lr)
        bmuf_sync(global_model.params, [worker.params], 0.0, 1.0, state)
        for name, t in serial.params.items():
            worst = max(worst, float(np.abs(t.data.astype(np.float64) - global_model.params[name].data).max()))

    # The trainer's own degenerate path against its serial path.
    via_bmuf = train(cfg.replace(sync_period=5), RNNT(tiny_config(4, 8, seed=2)), data)
    via_serial = train(cfg.replace(use_bmuf=False), RNNT(tiny_config(4, 8, seed=2)), data)
    for name, t in via_serial.model.params.items():
        worst = max(worst, float(np.abs(t.data.astype(np.float64) - via_bmuf.model.params[name].data).max()))

    # Several workers drifting apart, then one sync.
    g = RNNT(tiny_config(vocab_size=4, feat_dim=8, stride=1, seed=4))
    workers = [g.clone() for _ in range(3)]
    opts = [make_optimizer(cfg) for _ in workers]
    state = BmufState()
    identical = True
    for block in range(3):
        for w, (wk, opt) in enumerate(zip(workers, opts)):
            for j in range(2):
                _step(wk, opt, batches[(block * 6 + w * 2 + j) % 50], np.random.default_rng(w), 0.05)
        bmuf_sync(g.params, [wk.params for wk in workers], 0.9, 1.0, state)
        identical &= len({wk.params.fingerprint() for wk in workers}) == 1
    ok = worst <= 1e-6 and identical
    return Outcome(ok, f"max |serial - BMUF| over 50 batches {worst:.1e} (<= 1e-6); 3 workers bit-identical after every sync {identical}")


# --------------------------------------------------------------------- 7


def check_end_to_end(tmp_dir) -> Outcome:
    t0 = time.perf_counter()
    data = synth_dataset(16, 2000, frames_per_label=4, noise_sigma=0.1, seed=0)
    tr, dev = data.split(200)
    base = TrainConfig(
        mode="rnnt",
        epochs=5,
        batch_size=4,
        optimizer="adam",
        initial_lr=3e-3,
        final_lr=3e-4,
        block_momentum=0.0,
        grad_clip=5.0,
        eval_beam=4,
    )
    rnnt = train(base, RNNT(desk_config(16, 8, seed=0)), tr, dev=dev, out_dir=tmp_dir / "rnnt")
    cers = rnnt.dev_scores
    monotone = all(b <= a + NOISE_CER for a, b in zip(cers, cers[1:])) and cers[-1] <= cers[0]

    cer_b10 = evaluate_cer(rnnt.model, None, dev, FusionConfig(lm_weight=0.0, beta=1.0), 4).cer
    cer_b08 = evaluate_cer(rnnt.model, None, dev, FusionConfig(lm_weight=0.0, beta=0.8), 4).cer
    smoothing_ok = cer_b08 <= cer_b10 + 0.5

    mbr_cfg = base.replace(mode="mbr", epochs=1, initial_lr=3e-4, final_lr=3e-5, nbest_size=2, reg_lambda=1.0)
    mbr = train(mbr_cfg, None, tr, dev=dev, out_dir=tmp_dir / "mbr", init_checkpoint=rnnt.checkpoints[-1])
    risks = [r["avg_risk"] for r in mbr.metrics]
    first, last = float(np.mean(risks[:100])), float(np.mean(risks[-100:]))
    drop = 1.0 - last / first if first > 0 else 0.0
    mbr_cer = mbr.dev_scores[-1]
    mbr_ok = len(risks) >= 200 and drop >= 0.20 and mbr_cer <= cers[-1] + 0.5
    elapsed = time.perf_counter() - t0
    ok = monotone and smoothing_ok and mbr_ok and elapsed <= 1800
    return Outcome(
        ok,
        f"(a) dev CER by epoch {[round(c, 2) for c in cers]} non-increasing within {NOISE_CER}: {monotone}; "
        f"(b) CER beta=0.8 {cer_b08:.2f} vs beta=1.0 {cer_b10:.2f}: {smoothing_ok}; "
        f"(c) avg risk first/last 100 batches {first:.5f} -> {last:.5f} ({100 * drop:.0f}% drop, >= 20%), "
        f"MBR dev CER {mbr_cer:.2f} vs {cers[-1]:.2f}: {mbr_ok}; {elapsed:.0f} s (<= 1800)",
    )


# --------------------------------------------------------------------- 8


def check_cer_metric() -> Outcome:
    r = cer_from_pairs([("u1", [1, 2, 3, 4], [1, 3, 4]), ("u2", [5, 6, 7, 8, 9, 10], [5, 6, 1, 8, 9])])
    ok = [u.errors for u in r.utterances] == [1, 2] and r.cer == 30.0
    return Outcome(ok, f"distances {[u.errors for u in r.utterances]} over lengths {[len(u.reference) for u in r.utterances]} -> CER {r.cer}")


# ---------------------------------------------------------------- pytest


def _run(sink, number, title, outcome):
    report(number, title, outcome, sink)
    assert outcome.passed, outcome.detail


def test_criterion_1_transducer_loss_oracle(acceptance_line):
    _run(acceptance_line, 1, "transducer loss vs brute force and finite differences", check_transducer_oracle())


def test_criterion_2_mbr_gradient(acceptance_line):
    _run(acceptance_line, 2, "MBR gradient through the network", check_mbr_gradient())


def test_criterion_3_shallow_fusion(acceptance_line):
    _run(acceptance_line, 3, "shallow fusion", check_fusion())


def test_criterion_4_beam_search_oracle(acceptance_line):
    _run(acceptance_line, 4, "beam search vs exhaustive enumeration", check_beam_oracle())


def test_criterion_5_lr_schedule(acceptance_line):
    _run(acceptance_line, 5, "learning-rate schedule", check_lr_schedule())


def test_criterion_6_bmuf(acceptance_line):
    _run(acceptance_line, 6, "BMUF degenerate equivalence", check_bmuf())


@pytest.mark.slow
def test_criterion_7_end_to_end(acceptance_line, tmp_path):
    _run(acceptance_line, 7, "desk-scale end-to-end pattern", check_end_to_end(tmp_path))


def test_criterion_8_cer_metric(acceptance_line):
    _run(acceptance_line, 8, "CER metric", check_cer_metric())


if __name__ == "__main__":
    import tempfile
    from pathlib import Path

    checks = [
        (1, "transducer loss vs brute force and finite differences", check_transducer_oracle),
        (2, "MBR gradient through the network", check_mbr_gradient),
        (3, "shallow fusion", check_fusion),
        (4, "beam search vs exhaustive enumeration", check_beam_oracle),
        (5, "learning-rate schedule", check_lr_schedule),
        (6, "BMUF degenerate equivalence", check_bmuf),
        (7, "desk-scale end-to-end pattern", None),
        (8, "CER metric", check_cer_metric),
    ]
    failed = 0
    with tempfile.TemporaryDirectory() as tmp:
        for number, title, fn in checks:
            outcome = check_end_to_end(Path(tmp)) if fn is None else fn()
            report(number, title, outcome)
            failed += not outcome.passed
    sys.exit(1 if failed else 0)
