"""Variant construction and the ablation sweep."""

from __future__ import annotations

import csv
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .backbone import ModalityConfig
from .data import MultimodalSample, Splits, SyntheticSpec, generate_dataset, stack_batch
from .htl import HTLConfig
from .models import EarlyFusionModel, FusionModel, LateFusionModel, MoMEModel
from .numerics import GradReport, check_gradients, no_grad
from .trainer import MetricReport, OptimConfig, Trainer, predict_split

log = logging.getLogger(__name__)

# name -> (architecture, alpha, beta). beta is 0.01 rather than 1: the raw
# residual-stream tokens have squared distances in the hundreds, and at 1 the
# alignment term swamps cross-entropy and the gate collapses onto one expert.
VARIANTS: dict[str, tuple[str, float, float]] = {
    "early_fusion": ("early", 0.0, 0.0),
    "late_fusion": ("late", 0.0, 0.0),
    "moe_input_gate": ("input_gate", 0.0, 0.0),
    "mome": ("output_gate", 0.0, 0.0),
    "mome_inter_only": ("output_gate", 0.0, 0.01),
    "mome_htl": ("output_gate", 0.01, 0.01),
    "single_modality_htl_minus": ("single", 0.01, 0.0),
    "single_modality_plain": ("single", 0.0, 0.0),
}

DEFAULT_SWEEP = ("late_fusion", "moe_input_gate", "mome", "mome_htl",
                 "single_modality_htl_minus", "single_modality_plain")


@dataclass(frozen=True)
class ModelDims:
    embed_dim: int = 32
    num_blocks: int = 3
    num_heads: int = 2
    mlp_ratio: int = 2
    tubelet: tuple[int, int, int] = (2, 8, 8)
    classifier_hidden: int | None = 64
    gate_hidden: int | None = None
    single_modality: int = 0

    def modality_configs(self, data: SyntheticSpec | Sequence[tuple[int, ...]]) -> list[ModalityConfig]:
        if isinstance(data, SyntheticSpec):
            shapes = [(c, data.frames, data.height, data.width) for c in data.channels]
        else:
            shapes = [tuple(s) for s in data]
        return [ModalityConfig(c, t, h, w, tubelet=self.tubelet, embed_dim=self.embed_dim,
                               num_blocks=self.num_blocks, num_heads=self.num_heads,
                               mlp_ratio=self.mlp_ratio)
                for c, t, h, w in shapes]


# desk-scale defaults used by the sweep and the CLI
DEFAULT_DATA = SyntheticSpec(samples_per_class=120)
DEFAULT_DIMS = ModelDims()
DEFAULT_OPTIM = OptimConfig(base_lr=5e-3, batch_size=16)


@dataclass(frozen=True)
class VariantSpec:
    name: str
    dims: ModelDims = DEFAULT_DIMS
    optim: OptimConfig = DEFAULT_OPTIM
    htl: HTLConfig | None = None  # None: the variant's own alpha/beta

    def resolved_htl(self) -> HTLConfig:
        if self.htl is not None:
            return self.htl
        _, alpha, beta = VARIANTS[self.name]
        return HTLConfig(alpha=alpha, beta=beta)


def build_variant(spec: VariantSpec, shapes, num_classes: int, seed: int = 0) -> FusionModel:
    """Instantiate the model for ``spec``. ``shapes`` is a SyntheticSpec or a
    list of per-modality ``(C, T, H, W)``."""
    if spec.name not in VARIANTS:
        raise ValueError(f"unknown variant {spec.name!r}; choose from {sorted(VARIANTS)}")
    arch = VARIANTS[spec.name][0]
    dims = spec.dims
    configs = dims.modality_configs(shapes)
    rng = np.random.default_rng([seed, 7])
    hidden = dims.classifier_hidden
    if arch == "early":
        model = EarlyFusionModel(configs, num_classes, rng, classifier_hidden=hidden)
    elif arch == "late":
        model = LateFusionModel(configs, num_classes, rng, classifier_hidden=hidden)
    elif arch == "single":
        m = dims.single_modality
        model = LateFusionModel([configs[m]], num_classes, rng, classifier_hidden=hidden,
                                modalities=(m,))
    else:
        gate = "output" if arch == "output_gate" else "input"
        model = MoMEModel(configs, num_classes, rng, gate=gate, gate_hidden=dims.gate_hidden,
                          classifier_hidden=hidden)
    log.info("%s: %d expert parameters, %d total", spec.name,
             model.expert_parameter_count(), model.num_parameters())
    return model


@dataclass
class RunResult:
    variant: str
    seed: int
    test: MetricReport | None
    history: list[dict] = field(default_factory=list)
    seconds: float = 0.0
    error: str | None = None
    trainer: Trainer | None = field(default=None, repr=False)


def run_variant(spec: VariantSpec, data: Splits, num_classes: int, shapes, seed: int) -> RunResult:
    """Train one variant, restore the best-validation weights, test it."""
    t0 = time.perf_counter()
    model = build_variant(spec, shapes, num_classes, seed)
    optim = replace(spec.optim, seed=seed)
    trainer = Trainer(model, data, optim, spec.resolved_htl(), num_classes,
                      meta={"variant": spec.name, "seed": seed})
    trainer.fit()
    trainer.restore_best()
    pred, y, _ = predict_split(model, data.test)
    report = MetricReport.from_predictions(y, pred, num_classes)
    return RunResult(spec.name, seed, report, trainer.history, time.perf_counter() - t0,
                     trainer=trainer)


@dataclass(frozen=True)
class Expectation:
    """mean(higher) - mean(lower) >= min_gap on seed-averaged test Mean-1."""

    lower: str
    higher: str
    min_gap: float = 0.0

    def describe(self) -> str:
        gap = f" + {self.min_gap:.3f}" if self.min_gap else ""
        return f"{self.lower}{gap} <= {self.higher}"


DEFAULT_EXPECTATIONS = (
    Expectation("late_fusion", "mome", 0.03),
    Expectation("moe_input_gate", "mome"),
    Expectation("mome", "mome_htl"),
    Expectation("moe_input_gate", "mome_htl", 0.01),
    Expectation("single_modality_plain", "single_modality_htl_minus"),
)


@dataclass
class AblationReport:
    rows: list[RunResult]
    checks: list[tuple[str, bool, float]] = field(default_factory=list)

    def metric(self, variant: str, key: str = "mean1") -> list[float]:
        return [getattr(r.test, key) for r in self.rows if r.variant == variant and r.test is not None]

    def summary(self, variant: str, key: str = "mean1") -> tuple[float, float]:
        vals = self.metric(variant, key)
        if not vals:
            return float("nan"), float("nan")
        return statistics.fmean(vals), (statistics.pstdev(vals) if len(vals) > 1 else 0.0)

    @property
    def variants(self) -> list[str]:
        return list(dict.fromkeys(r.variant for r in self.rows))

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.checks)

    def table(self) -> str:
        lines = [f"{'variant':<28}{'Mean-1':>18}{'Top-1':>18}{'runs':>6}",
                 "-" * 70]
        for v in self.variants:
            m, ms = self.summary(v, "mean1")
            t, ts = self.summary(v, "top1")
            lines.append(f"{v:<28}{100 * m:>10.2f} ± {100 * ms:<5.2f}"
                         f"{100 * t:>10.2f} ± {100 * ts:<5.2f}{len(self.metric(v)):>6}")
        failed = [r for r in self.rows if r.error]
        for r in failed:
            lines.append(f"FAILED {r.variant} seed={r.seed}: {r.error}")
        if self.checks:
            lines.append("")
            for desc, ok, gap in self.checks:
                lines.append(f"[{'PASS' if ok else 'FAIL'}] {desc} (gap {100 * gap:+.2f} pp)")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", "seed", "test_top1", "test_mean1", "seconds", "confusion", "error"])
            for r in self.rows:
                if r.test is None:
                    w.writerow([r.variant, r.seed, "", "", f"{r.seconds:.1f}", "", r.error])
                else:
                    conf = ";".join(",".join(str(int(c)) for c in row) for row in r.test.confusion)
                    w.writerow([r.variant, r.seed, repr(r.test.top1), repr(r.test.mean1),
                                f"{r.seconds:.1f}", conf, ""])


def evaluate_expectations(report: AblationReport,
                          expectations: Sequence[Expectation]) -> list[tuple[str, bool, float]]:
    out = []
    for e in expectations:
        lo, hi = report.summary(e.lower)[0], report.summary(e.higher)[0]
        if np.isnan(lo) or np.isnan(hi):
            continue
        gap = hi - lo
        # tolerate float noise on equal means
        out.append((e.describe(), gap >= e.min_gap - 1e-12, gap))
    return out


def _run_one(name: str, seed: int, data_spec: SyntheticSpec, dims: ModelDims, optim: OptimConfig,
             htl: HTLConfig | None, data: Splits | None = None, keep_model: bool = False) -> RunResult:
    spec = replace(data_spec, seed=seed)
    try:
        data = data if data is not None else generate_dataset(spec)
        res = run_variant(VariantSpec(name, dims, optim, htl), data, spec.num_classes, spec, seed)
        if not keep_model:
            res.trainer = None
    except Exception as exc:  # one failed run must not stop the sweep
        log.exception("run %s seed %d failed", name, seed)
        res = RunResult(name, seed, None, error=f"{type(exc).__name__}: {exc}")
    log.info("%s seed %d: %s", name, seed,
             "failed" if res.test is None else f"test mean1 {res.test.mean1:.4f}")
    return res


def run_ablation(variants: Sequence[str], seeds: Sequence[int], data_spec: SyntheticSpec | None = None,
                 dims: ModelDims | None = None, optim: OptimConfig | None = None,
                 expectations: Sequence[Expectation] = DEFAULT_EXPECTATIONS,
                 keep_models: bool = False, workers: int = 1,
                 htl: HTLConfig | None = None) -> AblationReport:
    """Train every variant on every seed's dataset; failures are recorded, not raised.

    ``htl`` replaces every variant's own loss weights (normally left None).
    With ``workers > 1`` runs execute in separate processes; each run is
    deterministic, so the report does not depend on scheduling.
    """
    if len(seeds) < 2:
        raise ValueError("an ablation needs at least two seeds")
    data_spec = data_spec or DEFAULT_DATA
    dims = dims or DEFAULT_DIMS
    optim = optim or DEFAULT_OPTIM
    jobs = [(name, seed) for seed in seeds for name in variants]
    if workers > 1 and not keep_models:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_one, n, s, data_spec, dims, optim, htl) for n, s in jobs]
            rows = [f.result() for f in futures]
    else:
        rows = []
        for seed in seeds:
            data = generate_dataset(replace(data_spec, seed=seed))
            rows.extend(_run_one(n, seed, data_spec, dims, optim, htl, data, keep_models)
                        for n in variants)
    report = AblationReport(rows)
    report.checks = evaluate_expectations(report, [
        e for e in expectations if e.lower in variants and e.higher in variants])
    return report


# ---------------------------------------------------------------------------
# gate weights
# ---------------------------------------------------------------------------

def gate_weight_rows(model: FusionModel, samples: Sequence[MultimodalSample]) -> list[dict]:
    pred, y, w = predict_split(model, samples)
    rows = []
    for s, p, wi in zip(samples, pred, w):
        row = {"sample_id": s.sample_id, "label": int(s.label), "pred": int(p)}
        for n, val in enumerate(wi):
            row[f"w_{n + 1}"] = float(val)
        if s.corrupted is not None:
            for n, m in enumerate(model.modalities):
                row[f"corrupted_{n + 1}"] = int(s.corrupted[m])
                row[f"reliable_{n + 1}"] = int(s.reliable[m])
        rows.append(row)
    return rows


def export_gate_weights(model: FusionModel, samples: Sequence[MultimodalSample], path) -> list[dict]:
    """One CSV row per sample: id, label, prediction, gate weights and (for
    synthetic data) the corrupted and reliable modality masks."""
    rows = gate_weight_rows(model, samples)
    cols = list(rows[0]) if rows else ["sample_id", "label", "pred"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    return rows


def gate_mass(rows: Sequence[dict]) -> tuple[float, float]:
    """Mean gate weight on corrupted modalities and on clean reliable ones."""
    bad, good = [], []
    for r in rows:
        n = 1
        while f"w_{n}" in r:
            if f"corrupted_{n}" in r:
                if r[f"corrupted_{n}"]:
                    bad.append(r[f"w_{n}"])
                elif r[f"reliable_{n}"]:
                    good.append(r[f"w_{n}"])
            n += 1
    mean = lambda xs: float(np.mean(xs)) if xs else float("nan")  # noqa: E731
    return mean(bad), mean(good)


# ---------------------------------------------------------------------------
# gradient check on a toy model
# ---------------------------------------------------------------------------

TOY_DATA = SyntheticSpec(num_classes=4, samples_per_class=2, height=8, width=8)
TOY_DIMS = ModelDims(embed_dim=16, num_blocks=3, tubelet=(2, 4, 4))


def randomize_parameters(model: FusionModel, rng: np.random.Generator) -> None:
    """Move every parameter off its initial value.

    Zero-initialized layers and a uniform gate make many gradients vanish
    exactly; fan-in scaled weights keep activations and gradients O(1).
    """
    for name, t in model.parameters().items():
        if t.ndim == 2 and not name.endswith("pos"):
            t.data = rng.standard_normal(t.shape) / np.sqrt(t.shape[0])
        elif name.endswith("gamma") or name == "block_weights.w":
            t.data = 1.0 + 0.1 * rng.standard_normal(t.shape)
        else:
            t.data = 0.3 * rng.standard_normal(t.shape)
        t.data = t.data.astype(model.dtype)


def toy_gradcheck(variant: str = "mome_htl", detach_teacher: bool = True, batch: int = 3,
                  max_coords: int | None = 8, h: float = 1e-4, tol: float = 1e-4,
                  seed: int = 0, htl: HTLConfig | None = None) -> GradReport:
    """Finite-difference check of the full training objective in float64.

    With ``detach_teacher`` the deepest-block targets are frozen at the
    evaluation point so the numerical derivative sees the same function the
    analytic gradient differentiates.
    """
    spec = VariantSpec(variant, TOY_DIMS)
    cfg = replace(htl or spec.resolved_htl(), detach_teacher=detach_teacher)
    model = build_variant(spec, TOY_DATA, TOY_DATA.num_classes, seed).astype(np.float64)
    randomize_parameters(model, np.random.default_rng([seed, 11]))
    data = generate_dataset(replace(TOY_DATA, seed=seed))
    x, y = stack_batch(data.train[:batch])
    x = [a.astype(np.float64) for a in x]
    teachers = None
    if detach_teacher:
        with no_grad():
            teachers = model(x).traces
    return check_gradients(lambda: model.loss(x, y, cfg, teachers)[0].graph, model.parameters(),
                           h=h, tol=tol, max_coords=max_coords, seed=seed)
