"""Per-modality video transformer expert.

A plain pre-norm encoder over tubelet tokens with a prepended class token.
The forward pass records the class and spatio-temporal tokens after every
block, which is what the token-level losses consume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .layers import LayerNorm, Linear, Module, trunc_normal
from .numerics import Tensor, as_tensor, concat, gelu, parameter, softmax


@dataclass(frozen=True)
class ModalityConfig:
    channels: int
    frames: int
    height: int
    width: int
    tubelet: tuple[int, int, int] = (2, 4, 4)
    embed_dim: int = 32
    num_blocks: int = 3
    num_heads: int = 2
    mlp_ratio: int = 4
    pos_embed: bool = True

    def __post_init__(self):
        t, h, w = self.tubelet
        if min(self.channels, self.frames, self.height, self.width, t, h, w) <= 0:
            raise ValueError(f"all sizes must be positive: {self}")
        if self.frames % t or self.height % h or self.width % w:
            raise ValueError(
                f"tubelet {self.tubelet} does not tile ({self.frames}, {self.height}, {self.width})")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")
        if self.num_blocks < 2:
            raise ValueError("num_blocks must be >= 2")

    @property
    def input_shape(self) -> tuple[int, int, int, int]:
        return (self.channels, self.frames, self.height, self.width)

    @property
    def grid(self) -> tuple[int, int, int]:
        t, h, w = self.tubelet
        return (self.frames // t, self.height // h, self.width // w)

    @property
    def num_tokens(self) -> int:
        return math.prod(self.grid)

    @property
    def patch_dim(self) -> int:
        return self.channels * math.prod(self.tubelet)

    def with_channels(self, channels: int) -> "ModalityConfig":
        return replace(self, channels=channels)


def token_count(frames: int, height: int, width: int, tubelet: tuple[int, int, int]) -> int:
    """Number of non-overlapping tubelets, (T/t)(H/h)(W/w)."""
    t, h, w = tubelet
    if frames % t or height % h or width % w:
        raise ValueError(f"tubelet {tubelet} does not tile ({frames}, {height}, {width})")
    return (frames // t) * (height // h) * (width // w)


def tubelets(x: np.ndarray, cfg: ModalityConfig) -> np.ndarray:
    """Cut ``(..., C, T, H, W)`` into ``(..., M, C*t*h*w)`` flattened tubelets.

    Tokens are ordered time-major, then rows, then columns.
    """
    x = np.asarray(x)
    if x.shape[-4:] != cfg.input_shape:
        raise ValueError(f"expected trailing dims {cfg.input_shape}, got {x.shape}")
    lead = x.shape[:-4]
    c = cfg.channels
    t, h, w = cfg.tubelet
    nt, nh, nw = cfg.grid
    k = len(lead)
    y = x.reshape(lead + (c, nt, t, nh, h, nw, w))
    y = y.transpose(tuple(range(k)) + tuple(k + i for i in (1, 3, 5, 0, 2, 4, 6)))
    return np.ascontiguousarray(y).reshape(lead + (nt * nh * nw, c * t * h * w))


@dataclass
class BlockTokens:
    cls: Tensor  # (..., d)
    st: Tensor   # (..., M, d)


@dataclass
class ExpertTrace:
    """Per-block tokens of one expert, ordered shallow to deep."""

    blocks: list[BlockTokens] = field(default_factory=list)
    modality: int = 0

    @property
    def output(self) -> Tensor:
        return self.blocks[-1].cls

    def __len__(self) -> int:
        return len(self.blocks)


class AttentionBlock(Module):
    """Pre-norm multi-head self-attention followed by a pre-norm MLP."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.num_heads = num_heads
        self.ln1 = LayerNorm(dim)
        self.q = Linear(dim, dim, rng)
        # a key bias only shifts each query's scores uniformly, so it has no gradient
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng, zero=True)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng, zero=True)

    def attention(self, x: Tensor) -> Tensor:
        *lead, s, d = x.shape
        heads = self.num_heads
        hd = d // heads

        def split(t: Tensor) -> Tensor:
            return t.reshape(*lead, s, heads, hd).swapaxes(-3, -2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        attn = softmax((q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(hd)))
        out = (attn @ v).swapaxes(-3, -2).reshape(*lead, s, d)
        return self.proj(out)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attention(self.ln1(x))
        return x + self.fc2(gelu(self.fc1(self.ln2(x))))


def attention_block(tokens, block: AttentionBlock) -> Tensor:
    """Apply one block to ``(M+1, d)`` tokens whose row 0 is the class token."""
    return block(as_tensor(tokens, block.dtype))


class Expert(Module):
    """Tubelet embedding, learned class token, and ``num_blocks`` blocks."""

    def __init__(self, cfg: ModalityConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.embed_dim
        self.embed = Linear(cfg.patch_dim, d, rng)
        self.cls_token = parameter(trunc_normal(rng, (d,)))
        self.pos = parameter(trunc_normal(rng, (cfg.num_tokens, d))) if cfg.pos_embed else None
        self.blocks = [AttentionBlock(d, cfg.num_heads, cfg.mlp_ratio, rng)
                       for _ in range(cfg.num_blocks)]

    def tubelet_embed(self, x: np.ndarray) -> Tensor:
        """``(..., C, T, H, W)`` -> ``(..., M, d)`` projected tokens plus positions."""
        patches = Tensor(tubelets(x, self.cfg).astype(self.dtype, copy=False))
        tokens = self.embed(patches)
        if self.pos is not None:
            tokens = tokens + self.pos
        return tokens

    def __call__(self, x: np.ndarray, modality: int = 0) -> ExpertTrace:
        tokens = self.tubelet_embed(x)
        lead = tokens.shape[:-2]
        cls = self.cls_token.reshape((1,) * len(lead) + (1, -1)).broadcast_to(
            lead + (1, self.cfg.embed_dim))
        h = concat([cls, tokens], axis=-2)
        trace = ExpertTrace(modality=modality)
        for block in self.blocks:
            h = block(h)
            trace.blocks.append(BlockTokens(cls=h[..., 0, :], st=h[..., 1:, :]))
        return trace


def expert_forward(x: np.ndarray, expert: Expert, modality: int = 0) -> ExpertTrace:
    return expert(x, modality)
