"""Output-gated modality experts with token-level distillation and alignment losses, on numpy."""

from .backbone import Expert, ExpertTrace, ModalityConfig, token_count
from .data import MultimodalSample, Splits, SyntheticSpec, generate_dataset, load_raw_dataset
from .harness import VARIANTS, ModelDims, VariantSpec, build_variant, export_gate_weights, run_ablation
from .htl import HTLConfig, inter_loss, intra_loss, total_loss
from .models import EarlyFusionModel, LateFusionModel, MoMEModel
from .numerics import Tensor, check_gradients, grad
from .trainer import MetricReport, OptimConfig, Trainer, cosine_lr

__version__ = "0.1.0"

__all__ = [
    "EarlyFusionModel", "Expert", "ExpertTrace", "HTLConfig", "LateFusionModel", "MetricReport",
    "ModalityConfig", "ModelDims", "MoMEModel", "MultimodalSample", "OptimConfig", "Splits",
    "SyntheticSpec", "Tensor", "Trainer", "VARIANTS", "VariantSpec", "build_variant",
    "check_gradients", "cosine_lr", "export_gate_weights", "generate_dataset", "grad",
    "inter_loss", "intra_loss", "load_raw_dataset", "run_ablation", "token_count", "total_loss",
]
