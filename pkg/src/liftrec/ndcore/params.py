"""Named parameter collections, initialisers and the Adam update."""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from ..errors import MissingGradError
from .tensor import Tensor


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class ParamStore:
    """Ordered name -> Tensor map with Adam moment buffers."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def n_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self._params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters {sorted(missing)}")
        for k, t in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} does not match {t.shape}")
            t.data = arr.copy()

    def adam_step(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0) -> None:
        """One bias-corrected Adam update of every parameter, then zero the grads.

        ``weight_decay`` is decoupled (AdamW): parameters shrink by
        ``lr * weight_decay`` independently of the gradient statistics.
        """
        for name, t in self._params.items():
            if t.grad is None:
                raise MissingGradError(f"parameter {name!r} has no gradient")
        self.step_count += 1
        k = self.step_count
        c1 = 1.0 - beta1**k
        c2 = 1.0 - beta2**k
        for name, t in self._params.items():
            g = t.grad
            m = self._m[name]
            v = self._v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            new = t.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
            if weight_decay:
                new -= lr * weight_decay * t.data
            t.data = new
            t.grad = np.zeros_like(t.data)


def adam_step(store: ParamStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0) -> None:
    store.adam_step(lr, beta1, beta2, eps, weight_decay)


# -- initialisers --------------------------------------------------------------


def init_embedding(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    return rng.uniform(-0.05, 0.05, size=(n, dim))


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_attention_matrix(rng: np.random.Generator, dim: int) -> np.ndarray:
    return 0.1 * np.eye(dim) + rng.uniform(-0.01, 0.01, size=(dim, dim))
