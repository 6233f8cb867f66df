from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class Parameter:
    """A named leaf tensor owned by a model."""

    name: str
    tensor: Tensor

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad


class ParameterStore:
    """Ordered, uniquely named collection of parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = Parameter(name, t)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def select(self, prefix: str) -> list[Parameter]:
        return [p for p in self._params.values() if p.name.startswith(prefix)]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.tensor.zero_grad()

    def count(self) -> int:
        return int(sum(p.data.size for p in self._params.values()))


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, state: AdamState) -> None:
    """One bias-corrected Adam update, in place, over ``params``.

    ``params`` is an iterable of :class:`Parameter`. Every parameter must carry
    a populated gradient buffer.
    """
    params = list(params)
    for p in params:
        if p.tensor.grad is None:
            raise ValueError(f"parameter {p.name!r} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p in params:
        w = p.tensor.data
        g = p.tensor.grad.astype(w.dtype, copy=False)
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m = np.zeros_like(w)
            v = np.zeros_like(w)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[p.name] = m.astype(w.dtype, copy=False)
        state.v[p.name] = v.astype(w.dtype, copy=False)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        w -= update.astype(w.dtype, copy=False)
