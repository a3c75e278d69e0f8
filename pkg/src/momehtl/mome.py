"""Expert gating, weighted fusion and the classifier head."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .layers import MLP, Module
from .numerics import Tensor, concat, softmax, stack


class Gate(Module):
    """Output-aware gate: MLP over the concatenated expert class tokens.

    The final layer starts at zero so routing is uniform at initialisation.
    """

    def __init__(self, num_experts: int, dim: int, rng: np.random.Generator,
                 hidden: int | None = None, temperature: float = 1.0):
        if num_experts < 2:
            raise ValueError("a gate needs at least two experts")
        self.num_experts = num_experts
        self.dim = dim
        self.temperature = temperature
        self.mlp = MLP([num_experts * dim, hidden or 4 * dim, num_experts], rng, zero_last=True)

    def __call__(self, cls_tokens: Sequence[Tensor]) -> Tensor:
        if len(cls_tokens) != self.num_experts:
            raise ValueError(f"gate built for {self.num_experts} experts, got {len(cls_tokens)}")
        for t in cls_tokens:
            if t.shape[-1] != self.dim:
                raise ValueError(f"class token length {t.shape[-1]} != {self.dim}")
        return softmax(self.mlp(concat(list(cls_tokens), axis=-1)), self.temperature)


def gate(cls_tokens: Sequence[Tensor], params: Gate) -> Tensor:
    return params(cls_tokens)


def fuse(cls_tokens: Sequence[Tensor], weights) -> Tensor:
    """z = sum_n weights[..., n] * cls_tokens[n]."""
    weights = weights if isinstance(weights, Tensor) else Tensor(np.asarray(weights))
    if weights.shape[-1] != len(cls_tokens):
        raise ValueError(f"{weights.shape[-1]} weights for {len(cls_tokens)} experts")
    tokens = stack(list(cls_tokens), axis=-2)  # (..., N, d)
    w = weights.reshape(weights.shape + (1,))
    return (tokens * w).sum(axis=-2)


class Classifier(Module):
    """MLP head; ``hidden=None`` gives a single linear layer."""

    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator,
                 hidden: int | None = 64):
        sizes = [dim, num_classes] if hidden is None else [dim, hidden, num_classes]
        self.mlp = MLP(sizes, rng)

    def __call__(self, z: Tensor) -> Tensor:
        return self.mlp(z)


def classify(z: Tensor, params: Classifier) -> Tensor:
    return params(z)


def predict(logits) -> np.ndarray:
    """argmax over the last axis; ties go to the lowest index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=-1)


def downsample(tensors: Sequence[np.ndarray], pool: int = 4) -> np.ndarray:
    """Average-pool each modality to ``pool x pool`` per frame, average over
    frames, and concatenate channels: ``(..., sum_n C_n * pool**2)``."""
    feats = []
    for x in tensors:
        x = np.asarray(x)
        *lead, c, t, h, w = x.shape
        if h % pool or w % pool:
            raise ValueError(f"spatial size {(h, w)} not divisible by pool {pool}")
        y = x.reshape(*lead, c, t, pool, h // pool, pool, w // pool).mean(axis=(-1, -3))
        feats.append(y.mean(axis=-3).reshape(*lead, c * pool * pool))
    return np.concatenate(feats, axis=-1)


class InputGate(Module):
    """Conventional MoE router over downsampled raw inputs (three linear layers)."""

    def __init__(self, in_dim: int, num_experts: int, rng: np.random.Generator,
                 hidden: int = 64, pool: int = 4, temperature: float = 1.0):
        self.num_experts = num_experts
        self.pool = pool
        self.temperature = temperature
        self.mlp = MLP([in_dim, hidden, hidden, num_experts], rng, zero_last=True)

    def __call__(self, tensors: Sequence[np.ndarray]) -> Tensor:
        if len(tensors) != self.num_experts:
            raise ValueError(f"input gate built for {self.num_experts} modalities, got {len(tensors)}")
        feats = Tensor(downsample(tensors, self.pool).astype(self.dtype))
        return softmax(self.mlp(feats), self.temperature)


def input_gate(tensors: Sequence[np.ndarray], params: InputGate) -> Tensor:
    return params(tensors)
