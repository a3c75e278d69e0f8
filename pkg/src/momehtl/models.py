"""Complete multimodal classifiers assembled from experts, gates and heads."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .backbone import Expert, ExpertTrace, ModalityConfig
from .htl import BlockWeights, HTLConfig, LossBreakdown, total_loss
from .layers import Module
from .mome import Classifier, Gate, InputGate, fuse
from .numerics import Tensor, stack


@dataclass
class ForwardOutput:
    logits: Tensor
    traces: list[ExpertTrace]
    weights: Tensor  # (..., num_experts)


class FusionModel(Module):
    """Common surface: ``forward(tensors) -> ForwardOutput`` and ``loss``.

    ``tensors`` is the full per-modality list; ``modalities`` picks which ones
    the model reads.
    """

    modalities: tuple[int, ...] = ()

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def select(self, tensors: Sequence[np.ndarray]) -> list[np.ndarray]:
        return [tensors[m] for m in self.modalities]

    def run_experts(self, tensors: Sequence[np.ndarray]) -> list[ExpertTrace]:
        return [e(x, m) for e, x, m in zip(self.experts, self.select(tensors), self.modalities)]

    def loss(self, tensors: Sequence[np.ndarray], labels, cfg: HTLConfig,
             teachers: Sequence[ExpertTrace] | None = None) -> tuple[LossBreakdown, ForwardOutput]:
        out = self(tensors)
        return total_loss(out.logits, labels, out.traces, self.block_weights, cfg, teachers), out

    def expert_parameter_count(self) -> int:
        return sum(e.num_parameters() for e in self.experts)


class MoMEModel(FusionModel):
    """Experts, a gate over experts, convex fusion of class tokens, one head.

    ``gate="output"`` routes on the experts' final class tokens; ``"input"``
    routes on downsampled raw inputs.
    """

    def __init__(self, configs: Sequence[ModalityConfig], num_classes: int, rng: np.random.Generator,
                 gate: str = "output", gate_hidden: int | None = None,
                 classifier_hidden: int | None = 64, temperature: float = 1.0,
                 modalities: Sequence[int] | None = None):
        if len(configs) < 2:
            raise ValueError("MoME needs at least two experts")
        dims = {c.embed_dim for c in configs}
        if len(dims) != 1:
            raise ValueError(f"experts must share embed_dim, got {dims}")
        depth = {c.num_blocks for c in configs}
        if len(depth) != 1:
            raise ValueError(f"experts must share num_blocks, got {depth}")
        d = dims.pop()
        self.modalities = tuple(modalities) if modalities is not None else tuple(range(len(configs)))
        self.experts = [Expert(c, rng) for c in configs]
        self.gate_kind = gate
        if gate == "output":
            self.gate = Gate(len(configs), d, rng, hidden=gate_hidden, temperature=temperature)
        elif gate == "input":
            in_dim = sum(c.channels * 16 for c in configs)
            self.gate = InputGate(in_dim, len(configs), rng, hidden=gate_hidden or 64,
                                  temperature=temperature)
        else:
            raise ValueError(f"unknown gate kind {gate!r}")
        self.classifier = Classifier(d, num_classes, rng, hidden=classifier_hidden)
        self.block_weights = BlockWeights(depth.pop())

    def __call__(self, tensors: Sequence[np.ndarray]) -> ForwardOutput:
        traces = self.run_experts(tensors)
        cls = [t.output for t in traces]
        if self.gate_kind == "output":
            weights = self.gate(cls)
        else:
            weights = self.gate(self.select(tensors))
        z = fuse(cls, weights)
        return ForwardOutput(self.classifier(z), traces, weights)


class LateFusionModel(FusionModel):
    """One expert and head per modality; logits averaged uniformly."""

    def __init__(self, configs: Sequence[ModalityConfig], num_classes: int, rng: np.random.Generator,
                 classifier_hidden: int | None = 64, modalities: Sequence[int] | None = None):
        self.modalities = tuple(modalities) if modalities is not None else tuple(range(len(configs)))
        self.experts = [Expert(c, rng) for c in configs]
        self.heads = [Classifier(c.embed_dim, num_classes, rng, hidden=classifier_hidden)
                      for c in configs]
        self.block_weights = BlockWeights(configs[0].num_blocks)

    def __call__(self, tensors: Sequence[np.ndarray]) -> ForwardOutput:
        traces = self.run_experts(tensors)
        per_expert = [h(t.output) for h, t in zip(self.heads, traces)]
        if len(per_expert) == 1:
            logits = per_expert[0]
        else:
            logits = stack(per_expert, axis=0).mean(axis=0)
        lead = logits.shape[:-1]
        n = len(traces)
        weights = Tensor(np.full(lead + (n,), 1.0 / n, dtype=logits.dtype))
        return ForwardOutput(logits, traces, weights)


class EarlyFusionModel(FusionModel):
    """All modality channels concatenated into one input for a single expert."""

    def __init__(self, configs: Sequence[ModalityConfig], num_classes: int, rng: np.random.Generator,
                 classifier_hidden: int | None = 64):
        base = configs[0]
        for c in configs[1:]:
            if (c.frames, c.height, c.width) != (base.frames, base.height, base.width):
                raise ValueError("early fusion needs identical T, H, W across modalities")
        self.modalities = tuple(range(len(configs)))
        self.in_channels = sum(c.channels for c in configs)
        self.experts = [Expert(base.with_channels(self.in_channels), rng)]
        self.classifier = Classifier(base.embed_dim, num_classes, rng, hidden=classifier_hidden)
        self.block_weights = BlockWeights(base.num_blocks)

    def __call__(self, tensors: Sequence[np.ndarray]) -> ForwardOutput:
        x = np.concatenate(self.select(tensors), axis=-4)
        trace = self.experts[0](x, 0)
        logits = self.classifier(trace.output)
        weights = Tensor(np.ones(logits.shape[:-1] + (1,), dtype=logits.dtype))
        return ForwardOutput(logits, [trace], weights)
