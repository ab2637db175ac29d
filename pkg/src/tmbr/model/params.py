"""Named parameter collections."""

from __future__ import annotations

import hashlib

import numpy as np

from ..autodiff import Tensor


class ModelParams(dict):
    """Ordered mapping of parameter path to :class:`Tensor`."""

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.values()))

    def clone(self) -> "ModelParams":
        return ModelParams(
            (k, Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k, dtype=v.data.dtype)) for k, v in self.items()
        )

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def assign(self, other: "ModelParams") -> None:
        """Overwrite values in place from ``other`` (same names required)."""
        if set(other) != set(self):
            raise KeyError("parameter name sets differ")
        for k, t in self.items():
            t.data = np.array(other[k].data, dtype=t.data.dtype, copy=True)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self[k].data, dtype="<f4").tobytes())
        return h.hexdigest()


class ParamFactory:
    """Creates parameters in a fixed order from one seeded generator."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params = ModelParams()

    def _add(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value.astype(np.float32), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def weight(self, name: str, fan_in: int, fan_out: int) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        return self._add(name, self.rng.uniform(-bound, bound, size=(fan_in, fan_out)))

    def bias(self, name: str, dim: int, value: float = 0.0) -> Tensor:
        return self._add(name, np.full(dim, value))

    def table(self, name: str, rows: int, dim: int) -> Tensor:
        return self._add(name, self.rng.uniform(-1.0, 1.0, size=(rows, dim)))

    def ones(self, name: str, dim: int) -> Tensor:
        return self._add(name, np.ones(dim))
