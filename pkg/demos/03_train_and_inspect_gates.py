"""
Training one gated model and reading its routing
================================================

Trains the output-gated model with the token losses on the default
synthetic data, then looks at where the gate puts its weight: samples whose
sensor was replaced by noise should lean on the other experts.
"""

import tempfile
from pathlib import Path

import numpy as np

from momehtl.data import generate_dataset
from momehtl.harness import (
    DEFAULT_DATA, DEFAULT_OPTIM, VariantSpec, build_variant, export_gate_weights, gate_mass,
)
from momehtl.trainer import Trainer, evaluate, format_run_log

data = generate_dataset(DEFAULT_DATA)
spec = VariantSpec("mome_htl", optim=DEFAULT_OPTIM)
model = build_variant(spec, DEFAULT_DATA, DEFAULT_DATA.num_classes, seed=0)
print(f"{model.num_parameters()} parameters, loss weights {spec.resolved_htl()}")

trainer = Trainer(model, data, DEFAULT_OPTIM, spec.resolved_htl(), DEFAULT_DATA.num_classes)
trainer.fit()

# the run log, every fifth epoch
lines = format_run_log(trainer.history).splitlines()
cols = lines[0].split(",")
keep = [i for i, c in enumerate(cols) if not c.startswith("gate_w_std")]
print(" ".join(f"{cols[i].replace('gate_w_mean', 'gate'):>10}" for i in keep))
for line in lines[1::5]:
    vals = line.split(",")
    print(" ".join(f"{vals[i][:10]:>10}" for i in keep))

trainer.restore_best()
report = evaluate(model, data.test, DEFAULT_DATA.num_classes)
print(f"\nbest epoch {trainer.best_epoch}: test top1 {report.top1:.3f} mean1 {report.mean1:.3f}")
print("per-class accuracy:", np.round(report.per_class_acc, 2))
print("learned block weights:", model.block_weights.w.data)

with tempfile.TemporaryDirectory() as tmp:
    rows = export_gate_weights(model, data.test, Path(tmp) / "gates.csv")
bad, good = gate_mass(rows)
print(f"\nmean gate weight on corrupted modalities {bad:.3f}, on clean reliable ones {good:.3f}")

# a few samples with one corrupted sensor
shown = 0
for r in rows:
    mask = [r[f"corrupted_{n}"] for n in (1, 2, 3)]
    if any(mask) and shown < 5:
        w = [r[f"w_{n}"] for n in (1, 2, 3)]
        print(f"sample {r['sample_id']:4d} label {r['label']} pred {r['pred']}  "
              f"corrupted {mask}  weights {np.round(w, 2)}")
        shown += 1
