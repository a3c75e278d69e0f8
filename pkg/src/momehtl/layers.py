"""Parameter containers and the dense building blocks shared by all models."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .numerics import Tensor, gelu, layer_norm, parameter


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated at +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


class Module:
    """Minimal parameter tree: Tensors, sub-Modules and lists of Modules."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    @property
    def dtype(self):
        for t in self.parameters().values():
            return t.dtype
        return np.dtype(np.float32)

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place; returns self."""
        for t in self.parameters().values():
            t.data = np.ascontiguousarray(t.data, dtype=dtype)
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self.parameters().items())

    def load_state_dict(self, state) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, t in params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {t.shape}")
            t.data = np.array(arr, dtype=t.dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero: bool = False,
                 std: float = 0.02, bias: bool = True):
        w = np.zeros((d_in, d_out), np.float32) if zero else trunc_normal(rng, (d_in, d_out), std)
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(d_out, np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(dim, np.float32))
        self.beta = parameter(np.zeros(dim, np.float32))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.eps) * self.gamma + self.beta


class MLP(Module):
    """Linear layers with GELU in between; ``zero_last`` zeroes the output layer."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, zero_last: bool = False):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        n = len(sizes) - 1
        self.layers = [
            Linear(sizes[i], sizes[i + 1], rng, zero=zero_last and i == n - 1) for i in range(n)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = gelu(x)
        return x
