"""One test per acceptance criterion; each prints a PASS/FAIL line.

Criteria 5 and 6 share a single run of the default desk-scale sweep
(six variants, three seeds) and take several CPU-minutes.
"""

import itertools
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from momehtl.backbone import BlockTokens, ExpertTrace, token_count
from momehtl.data import SyntheticSpec, generate_dataset, nearest_centroid_accuracy
from momehtl.harness import (
    DEFAULT_DATA, DEFAULT_SWEEP, VariantSpec, build_variant, gate_mass, gate_weight_rows,
    run_ablation, toy_gradcheck, TOY_DATA, TOY_DIMS,
)
from momehtl.htl import HTLConfig, check_identity, inter_loss, intra_loss, total_loss
from momehtl.numerics import Tensor, cross_entropy, kl_divergence
from momehtl.trainer import OptimConfig, Trainer, cosine_lr, format_run_log, load_checkpoint, save_checkpoint

SEEDS = (0, 1, 2)


def report(num: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {num}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_criterion_1_gradient_integrity():
    t0 = time.perf_counter()
    reports = {mode: toy_gradcheck("mome_htl", detach_teacher=(mode == "detached"))
               for mode in ("detached", "live")}
    seconds = time.perf_counter() - t0
    worst = max(r.max_rel_diff for r in reports.values())
    covered = all("gate.mlp.layers.0.weight" in r.worst and "gate.mlp.layers.1.weight" in r.worst
                  and "block_weights.w" in r.worst for r in reports.values())
    n = len(reports["live"].worst)
    ok = worst <= 1e-4 and covered and seconds < 120 and all(r.passed for r in reports.values())
    report(1, ok, f"max rel err {worst:.2e} <= 1e-4 over {n} tensors per mode (gate and w included: {covered}), "
                  f"float64, both teacher modes, {seconds:.0f}s < 120s "
                  f"[N={TOY_DATA.num_modalities}, d={TOY_DIMS.embed_dim}, B={TOY_DIMS.num_blocks}, "
                  f"K={TOY_DATA.num_classes}]")


def _trace(cls, st):
    return ExpertTrace([BlockTokens(Tensor(np.asarray(c, float)), Tensor(np.asarray(s, float)))
                        for c, s in zip(cls, st)])


def test_criterion_2_loss_identities():
    rng = np.random.default_rng(0)
    c, s = rng.standard_normal(16), rng.standard_normal((8, 16))
    same = [_trace([c] * 3, [s] * 3) for _ in range(3)]
    intra_zero = intra_loss(same, [1.0, 1.0]).item() == 0.0
    inter_zero = inter_loss([t.output for t in same]).item() == 0.0
    tokens = [Tensor(rng.standard_normal(16)) for _ in range(3)]
    values = {inter_loss([tokens[i] for i in p]).item() for p in itertools.permutations(range(3))}
    perm_exact = len(values) == 1
    worst = 0.0
    for k in range(50):
        traces = [_trace(rng.standard_normal((3, 16)), rng.standard_normal((3, 8, 16))) for _ in range(3)]
        cfg = HTLConfig(alpha=float(rng.uniform(0, 2)), beta=float(rng.uniform(0, 2)))
        b = total_loss(Tensor(rng.standard_normal((2, 4))), np.array([0, 3]), traces, [0.7, 1.3], cfg)
        worst = max(worst, abs(b.total - (b.cls + cfg.alpha * b.intra + cfg.beta * b.inter)))
        assert check_identity(b)
    ok = intra_zero and inter_zero and perm_exact and worst <= 1e-9
    report(2, ok, f"intra=0 {intra_zero}, inter=0 {inter_zero} (exact); inter identical over 6 "
                  f"permutations {perm_exact}; breakdown identity max err {worst:.1e} <= 1e-9")


def test_criterion_3_closed_forms():
    ce = cross_entropy(Tensor([0.0, 0.0]), 0).item()
    kl = kl_divergence(Tensor([0.5, 0.5]), Tensor([0.25, 0.75])).item()
    inter = inter_loss([Tensor([1.0, 0.0]), Tensor([0.0, 1.0])]).item()
    base = OptimConfig().base_lr
    start, end = cosine_lr(0, 1000, base, 1e-7), cosine_lr(1000, 1000, base, 1e-7)
    ok = (abs(ce - math.log(2)) <= 1e-9 and abs(kl - 0.14384) <= 1e-5 and inter == 2.0
          and start == base and end == 1e-7)
    report(3, ok, f"CE {ce:.9f} (ln 2 +- 1e-9), KL {kl:.6f} (0.14384 +- 1e-5), inter {inter!r} "
                  f"(2 exact), lr endpoints {start!r} / {end!r}")


def test_criterion_4_token_count():
    m = token_count(8, 224, 224, (1, 16, 16))
    report(4, m == 1568, f"T=8, H=W=224, tubelet 1x16x16 gives {m} tokens (expected 1568)")


@pytest.fixture(scope="module")
def sweep():
    t0 = time.perf_counter()
    rep = run_ablation(DEFAULT_SWEEP, SEEDS, keep_models=True)
    seconds = time.perf_counter() - t0
    rows = []
    for r in rep.rows:
        if r.variant == "mome" and r.trainer is not None:
            data = generate_dataset(replace(DEFAULT_DATA, seed=r.seed))
            rows += gate_weight_rows(r.trainer.model, data.test)
    print("\n" + rep.table())
    return rep, seconds, rows


@pytest.mark.slow
def test_criterion_5_output_gate_beats_late_fusion(sweep):
    rep, seconds, rows = sweep
    mome, late = rep.summary("mome")[0], rep.summary("late_fusion")[0]
    bad, good = gate_mass(rows)
    errors = [r for r in rep.rows if r.error]
    ok = (not errors and mome - late >= 0.03 and bad < good and seconds < 30 * 60)
    report(5, ok, f"mome {100 * mome:.2f} vs late_fusion {100 * late:.2f} Mean-1 "
                  f"(gap {100 * (mome - late):+.2f} pp, need >= 3); gate mass corrupted {bad:.3f} "
                  f"< clean {good:.3f}; sweep {seconds / 60:.1f} CPU-min < 30 "
                  f"[K={DEFAULT_DATA.num_classes}, p={DEFAULT_DATA.corruption_prob}, seeds {SEEDS}]")


@pytest.mark.slow
def test_criterion_6_ablation_ordering(sweep):
    rep, _, _ = sweep
    m = {v: rep.summary(v)[0] for v in DEFAULT_SWEEP}
    parts = [
        ("moe_input_gate <= mome", m["mome"] >= m["moe_input_gate"]),
        ("mome <= mome_htl", m["mome_htl"] >= m["mome"]),
        ("mome_htl - moe_input_gate >= 1 pp", m["mome_htl"] - m["moe_input_gate"] >= 0.01),
        ("single_modality_htl_minus >= single_modality_plain",
         m["single_modality_htl_minus"] >= m["single_modality_plain"]),
    ]
    means = ", ".join(f"{v} {100 * x:.2f}" for v, x in m.items())
    verdicts = "; ".join(f"{d}: {'ok' if ok else 'violated'}" for d, ok in parts)
    report(6, all(ok for _, ok in parts), f"{verdicts} (seed-averaged Mean-1: {means})")


def test_criterion_7_determinism_and_persistence(tmp_path):
    spec = SyntheticSpec(num_classes=4, samples_per_class=12, height=8, width=8, blob=2, speed=1.5)
    data = generate_dataset(spec)
    optim = OptimConfig(base_lr=5e-3, batch_size=8, max_epochs=4)
    vspec = VariantSpec("mome_htl", TOY_DIMS)

    def trainer():
        return Trainer(build_variant(vspec, spec, 4, 0), data, optim, vspec.resolved_htl(), 4)

    a, b = trainer().fit(), trainer().fit()
    logs_equal = format_run_log(a.history).encode() == format_run_log(b.history).encode()
    half = trainer().fit(until_epoch=2)
    half.save(tmp_path / "half.ckpt")
    info, arrays = load_checkpoint(tmp_path / "half.ckpt")
    save_checkpoint(tmp_path / "again.ckpt", info, arrays)
    bit_exact = (tmp_path / "half.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    resumed = trainer().resume(tmp_path / "half.ckpt").fit()
    losses = [r["loss_total"] for r in resumed.history] == [r["loss_total"] for r in a.history]
    ok = logs_equal and bit_exact and losses
    report(7, ok, f"run logs byte-identical {logs_equal}; save/load/save bit-exact {bit_exact}; "
                  f"resumed loss sequence equals unbroken run {losses}")


def test_criterion_8_data_oracle():
    spec = replace(DEFAULT_DATA, corruption_prob=0.0)
    splits = generate_dataset(spec)
    acc = nearest_centroid_accuracy(splits.train, splits.test)
    report(8, acc == 1.0, f"nearest-centroid accuracy {100 * acc:.1f}% on p=0 data "
                          f"({len(splits.test)} test samples; expected 100%)")
