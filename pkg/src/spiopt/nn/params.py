from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from .tensor import Tensor

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


class ParameterSet:
    """Named trainable tensors plus the Adam moment state shared by one model."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.first_moment: dict[str, np.ndarray] = {}
        self.second_moment: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        self.first_moment[name] = np.zeros_like(t.data)
        self.second_moment[name] = np.zeros_like(t.data)
        return t

    def replace(self, name: str, value) -> Tensor:
        """Swap in a fresh value (and fresh moments) for an existing name."""
        del self._params[name]
        return self.add(name, value)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        for k, t in self._params.items():
            if k not in arrays:
                if strict:
                    raise KeyError(f"missing parameter {k!r}")
                continue
            v = np.asarray(arrays[k], dtype=np.float64)
            if v.shape != t.shape:
                raise ValueError(f"parameter {k!r}: stored shape {v.shape} != {t.shape}")
            t.data = v.copy()


def adam_step(params: ParameterSet, learning_rate: float, overrides: dict[str, float] | None = None) -> None:
    """One Adam update on every parameter; clears gradients afterwards.

    Parameters whose gradient was never populated are treated as zero-gradient.
    ``overrides`` maps parameter names to their own learning rate.
    """
    for name, t in params.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    params.step += 1
    bc1 = 1.0 - BETA1**params.step
    bc2 = 1.0 - BETA2**params.step
    for name, t in params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        m = params.first_moment[name]
        v = params.second_moment[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        lr = overrides.get(name, learning_rate) if overrides else learning_rate
        t.data = t.data - lr * (m / bc1) / (np.sqrt(v / bc2) + EPS)
        t.grad = None


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def dense_init(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    return glorot_uniform(rng, (n_out, n_in), n_in, n_out)


def conv_init(rng: np.random.Generator, shape: tuple[int, int, int, int], transposed: bool = False) -> np.ndarray:
    """Init for ``(out, in, k, k)`` kernels, or ``(in, out, k, k)`` when transposed."""
    c0, c1, kh, kw = shape
    c_in, c_out = (c1, c0) if not transposed else (c0, c1)
    return glorot_uniform(rng, shape, c_in * kh * kw, c_out * kh * kw)
