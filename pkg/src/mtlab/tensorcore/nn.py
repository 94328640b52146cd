"""Parameter containers and the few layers the models need."""
from __future__ import annotations

import hashlib

import numpy as np

from .tensor import Tensor, embedding_lookup, get_default_dtype, layer_norm


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(np.array(data, dtype=dtype or get_default_dtype()), requires_grad=True)


class Module:
    """Attribute-walking container; parameter names are dotted attribute paths."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, name):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k in value:
            yield from _walk(value[k], f"{name}.{k}")


class Linear(Module):
    def __init__(self, n_in, n_out, rng: np.random.Generator, bias=True, dtype=None, std=None):
        std = (1.0 / np.sqrt(n_in)) if std is None else std
        self.weight = Parameter(rng.normal(0.0, std, size=(n_in, n_out)), dtype)
        self.bias = Parameter(np.zeros(n_out), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, dtype=None):
        self.gain = Parameter(np.ones(dim), dtype)
        self.bias = Parameter(np.zeros(dim), dtype)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, n, dim, rng: np.random.Generator | None = None, std=0.02, dtype=None):
        init = np.zeros((n, dim)) if rng is None else rng.normal(0.0, std, size=(n, dim))
        self.table = Parameter(init, dtype)

    def forward(self, ids) -> Tensor:
        return embedding_lookup(self.table, ids)
