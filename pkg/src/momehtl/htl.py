"""Token-level auxiliary losses for the expert mixture.

``intra_loss`` distils each expert's deepest block into its shallower blocks
(KL over class-token and flattened spatio-temporal-token distributions),
weighted by learnable per-block scalars. ``inter_loss`` pulls the final class
tokens of different experts together with a symmetric squared distance.
"""

from __future__ import annotations

import math
import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .backbone import BlockTokens, ExpertTrace
from .layers import Module
from .numerics import Tensor, as_tensor, concat, cross_entropy, kl_from_logits, parameter, softmax, stack

@dataclass(frozen=True)
class HTLConfig:
    alpha: float = 0.01
    beta: float = 1.0
    temperature: float = 1.0
    eps: float = 1e-8
    detach_teacher: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


class BlockWeights(Module):
    """One learnable weight per shallow block, initialised to 1."""

    def __init__(self, num_blocks: int):
        if num_blocks < 2:
            raise ValueError("need at least two blocks")
        self.w = parameter(np.ones(num_blocks - 1, np.float32))


@dataclass
class LossBreakdown:
    cls: float
    intra: float
    inter: float
    total: float
    alpha: float = 0.0
    beta: float = 0.0
    graph: Tensor | None = field(default=None, repr=False, compare=False)


def token_distributions(block: BlockTokens, temperature: float = 1.0,
                        eps: float = 1e-8) -> tuple[Tensor, Tensor]:
    """(softmax of the class token, softmax of the row-major flattened st tokens)."""
    st = block.st
    flat = st.reshape(*st.shape[:-2], st.shape[-2] * st.shape[-1])
    return softmax(block.cls, temperature), softmax(flat, temperature)


def _flat(st: Tensor) -> Tensor:
    return st.reshape(*st.shape[:-2], st.shape[-2] * st.shape[-1])


def _weights(w) -> Tensor:
    if isinstance(w, BlockWeights):
        return w.w
    return as_tensor(w)


def intra_loss(traces: Sequence[ExpertTrace], w, cfg: HTLConfig = HTLConfig(),
               teachers: Sequence[ExpertTrace] | None = None) -> Tensor:
    """Deep-to-shallow KL self-distillation, averaged over experts and blocks.

    ``teachers`` substitutes the deepest-block tokens with those of another
    trace (treated as constants); by default each trace teaches itself.
    """
    if not traces:
        raise ValueError("no expert traces")
    depth = len(traces[0])
    if any(len(t) != depth for t in traces):
        raise ValueError(f"block counts differ across experts: {[len(t) for t in traces]}")
    if depth < 2:
        raise ValueError("intra loss needs at least two blocks")
    w = _weights(w)
    if w.shape != (depth - 1,):
        raise ValueError(f"expected {depth - 1} block weights, got shape {w.shape}")
    if np.any(w.data < 0):
        warnings.warn("negative block weight inverts the distillation direction", RuntimeWarning,
                      stacklevel=2)
    if teachers is not None and len(teachers) != len(traces):
        raise ValueError("one teacher trace per expert is required")

    terms = []
    for n, trace in enumerate(traces):
        deep = (teachers[n] if teachers is not None else trace).blocks[-1]
        t_cls, t_st = deep.cls, _flat(deep.st)
        if cfg.detach_teacher or teachers is not None:
            t_cls, t_st = t_cls.detach(), t_st.detach()
        for block in trace.blocks[:-1]:
            kl = (kl_from_logits(t_cls, block.cls, cfg.temperature, cfg.eps)
                  + kl_from_logits(t_st, _flat(block.st), cfg.temperature, cfg.eps))
            terms.append(kl)
    per_block = stack(terms, axis=-1)  # (..., N*(B-1)), expert-major
    n_exp = len(traces)
    weighted = per_block * _tile(w, n_exp)
    per_sample = weighted.sum(axis=-1) * (1.0 / (n_exp * (depth - 1)))
    return per_sample.mean() if per_sample.ndim else per_sample


def _tile(w: Tensor, reps: int) -> Tensor:
    return concat([w] * reps, axis=0)


def inter_loss(final_cls: Sequence[Tensor]) -> Tensor:
    """(1 / (N(N-1))) * sum over ordered pairs n != k of ||t_n - t_k||^2.

    Pair terms are summed in sorted order so the value is bit-identical under
    any permutation of the experts.
    """
    n = len(final_cls)
    if n < 2:
        raise ValueError("inter loss needs at least two experts")
    final_cls = [as_tensor(t) for t in final_cls]
    if len({t.shape for t in final_cls}) > 1:
        raise ValueError(f"class token shapes differ: {[t.shape for t in final_cls]}")
    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            d = final_cls[i] - final_cls[j]
            pairs.append((d * d).sum(axis=-1))
    dist = stack(pairs, axis=-1)  # (..., n(n-1)/2)
    order = np.argsort(dist.data, axis=-1, kind="stable")
    if dist.ndim == 1:
        ordered = dist[order]
    else:
        lead = np.indices(order.shape)[:-1]
        ordered = dist[tuple(lead) + (order,)]
    per_sample = (ordered * 2.0).sum(axis=-1) * (1.0 / (n * (n - 1)))
    return per_sample.mean() if per_sample.ndim else per_sample


def total_loss(logits: Tensor, label, traces: Sequence[ExpertTrace], w,
               cfg: HTLConfig = HTLConfig(),
               teachers: Sequence[ExpertTrace] | None = None) -> LossBreakdown:
    """cls + alpha * intra + beta * inter, with floats for logging and the
    differentiable total in ``graph``."""
    ce = cross_entropy(logits, label)
    cls = ce.mean() if ce.ndim else ce
    zero = Tensor(np.zeros((), dtype=cls.dtype))
    intra = intra_loss(traces, w, cfg, teachers) if traces else zero
    inter = inter_loss([t.output for t in traces]) if len(traces) >= 2 else zero
    total = cls
    if cfg.alpha:
        total = total + intra * cfg.alpha
    if cfg.beta:
        total = total + inter * cfg.beta
    c, a, r = cls.item(), intra.item(), inter.item()
    # reported total is composed in float64 so the breakdown identity is exact
    return LossBreakdown(cls=c, intra=a, inter=r, total=c + cfg.alpha * a + cfg.beta * r,
                         alpha=cfg.alpha, beta=cfg.beta, graph=total)


def check_identity(b: LossBreakdown, tol: float = 1e-9) -> bool:
    """total == cls + alpha*intra + beta*inter up to ``tol`` (relative to scale)."""
    expected = b.cls + b.alpha * b.intra + b.beta * b.inter
    return math.isclose(b.total, expected, rel_tol=tol, abs_tol=tol)
