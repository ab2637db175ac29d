"""Finite-difference gradient checking.

The numeric gradient re-evaluates the function in float64 with central
differences.  The analytic gradient is taken from the tape, by default
also in float64: float32 round-off (~1e-7 absolute) would otherwise swamp
the 1e-8 floor of the relative error on structurally zero gradients.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .tensor import NumericError, Tape, Tensor, backward, precision


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return np.abs(a - n) / denom


def _scalar(value: Tensor) -> float:
    v = float(np.asarray(value.data, dtype=np.float64).reshape(-1)[0])
    if not np.isfinite(v):
        raise NumericError("grad_check: non-finite function value")
    return v


@contextlib.contextmanager
def _cast(tensors: Sequence[Tensor], dtype):
    if dtype is None:
        yield
        return
    originals = [t.data for t in tensors]
    try:
        with precision(dtype):
            for t in tensors:
                t.data = t.data.astype(dtype)
            yield
    finally:
        for t, orig in zip(tensors, originals):
            t.data = orig


def _union(tensors: Sequence[Tensor], context: Sequence[Tensor]) -> list[Tensor]:
    seen = {id(t) for t in tensors}
    return list(tensors) + [t for t in context if id(t) not in seen]


def analytic_gradients(
    loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], dtype=np.float64, context: Sequence[Tensor] = ()
) -> list[np.ndarray]:
    """Tape gradients of ``loss_fn()``; ``dtype=None`` keeps stored precision.

    ``context`` tensors are cast along with ``tensors`` but not differentiated.
    """
    everything = _union(tensors, context)
    saved = [(t.requires_grad, t.grad) for t in everything]
    try:
        for t in everything:
            t.grad = None
        for t in tensors:
            t.requires_grad = True
        with _cast(everything, dtype):
            with Tape() as tape:
                loss = loss_fn()
            backward(tape, loss)
        return [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in tensors]
    finally:
        for t, (rg, g) in zip(everything, saved):
            t.requires_grad, t.grad = rg, g


def numeric_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float,
    coords: Sequence[np.ndarray | None] | None = None,
    context: Sequence[Tensor] = (),
) -> list[np.ndarray]:
    """Central differences in float64; entries outside ``coords`` are NaN."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    grads = []
    with _cast(_union(tensors, context), np.float64):
        for ti, t in enumerate(tensors):
            flat = t.data.reshape(-1)
            out = np.full(flat.shape, np.nan)
            chosen = range(flat.size) if coords is None or coords[ti] is None else coords[ti]
            for i in chosen:
                keep = flat[i]
                flat[i] = keep + eps
                up = _scalar(loss_fn())
                flat[i] = keep - eps
                down = _scalar(loss_fn())
                flat[i] = keep
                out[i] = (up - down) / (2.0 * eps)
            grads.append(out.reshape(t.shape))
    return grads


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3, analytic_dtype=np.float64) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(|a|, |n|, 1e-8)``."""
    return grad_check_tensors(lambda: f(x), [x], eps, analytic_dtype=analytic_dtype)


def grad_check_tensors(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
    analytic_dtype=np.float64,
    context: Sequence[Tensor] = (),
) -> float:
    """Gradient check over several tensors at once.

    ``max_coords`` caps the number of probed coordinates per tensor (chosen
    with a seeded generator) so large parameter sets stay affordable.
    ``context`` lists other tensors the function reads (e.g. the remaining
    model parameters) so that they too are promoted to float64.
    """
    tensors = list(tensors)
    rng = np.random.default_rng(seed)
    coords = None
    if max_coords is not None:
        coords = [
            None if t.size <= max_coords else rng.choice(t.size, size=max_coords, replace=False) for t in tensors
        ]
    analytic = analytic_gradients(loss_fn, tensors, analytic_dtype, context)
    numeric = numeric_gradients(loss_fn, tensors, eps, coords, context)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        probed = ~np.isnan(n)
        if probed.any():
            worst = max(worst, float(relative_error(a[probed], n[probed]).max()))
    return worst


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[Tensor],
    eps: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    tensors = list(params.values()) if isinstance(params, Mapping) else list(params)
    return grad_check_tensors(loss_fn, tensors, eps, max_coords, seed)
