"""Command-line entry point.

    momehtl [--config FILE] [--seed N] [--out-dir DIR] <command> [options]

Commands: gen-data, train, eval, gradcheck, ablate, export-gates. Every
command writes into ``--out-dir`` and copies the config text there.
Exit status: 0 ok, 1 usage error, 2 failed checks, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import harness
from .config import ConfigError, RunConfig, load_config
from .data import Splits, SyntheticSpec, export_raw_dataset, generate_dataset, load_raw_dataset
from .harness import ModelDims, VariantSpec, build_variant, export_gate_weights, gate_mass, toy_gradcheck
from .trainer import MetricReport, Trainer, load_checkpoint, predict_split, write_run_log

log = logging.getLogger("momehtl")

EXIT_OK, EXIT_USAGE, EXIT_CHECKS, EXIT_RUNTIME = 0, 1, 2, 3
CONFIG_ECHO = "config.ini"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="momehtl", description="Gated multimodal experts on synthetic clips.")
    p.add_argument("--config", type=Path, help="key = value config file with [sections]")
    p.add_argument("--seed", type=int, help="overrides the data and optimizer seeds")
    p.add_argument("--out-dir", type=Path, default=Path("runs"), help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", help="write the synthetic dataset as raw tensors plus a manifest")

    t = sub.add_parser("train", help="train one variant")
    t.add_argument("--variant", help="override [model] variant")
    t.add_argument("--epochs", type=int, help="stop after this many epochs (resumable)")
    t.add_argument("--resume", type=Path, help="continue from a checkpoint")

    for name, helptext in (("eval", "evaluate a checkpoint"),
                           ("export-gates", "write per-sample gate weights")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", type=Path, required=True)
        e.add_argument("--split", choices=("train", "val", "test"), default="test")
        e.add_argument("--manifest", type=Path, help="evaluate on raw data instead")

    g = sub.add_parser("gradcheck", help="finite-difference check of the training objective")
    g.add_argument("--variant", help="override [gradcheck] variant")

    a = sub.add_parser("ablate", help="train several variants over several seeds")
    a.add_argument("--variants", help="comma-separated variant names")
    a.add_argument("--seeds", help="comma-separated seeds")
    a.add_argument("--workers", type=int, default=1, help="parallel processes")
    return p


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def render_config(cfg: RunConfig) -> str:
    """The effective configuration as config-file text."""

    def fmt(v):
        if v is None:
            return "none"
        if isinstance(v, tuple):
            if v and isinstance(v[0], tuple):
                return "; ".join(fmt(x) for x in v)
            return ", ".join(str(x) for x in v)
        return str(v)

    out = []
    sections = [("data", cfg.data), ("model", cfg.dims), ("optim", cfg.optim),
                ("htl", cfg.htl), ("ablate", cfg.ablate), ("gradcheck", cfg.gradcheck)]
    for name, obj in sections:
        if obj is None:
            continue
        out.append(f"[{name}]")
        if name == "model":
            out.append(f"variant = {cfg.variant}")
        if name == "data" and cfg.manifest:
            out.append(f"manifest = {cfg.manifest}")
        for f in dataclasses.fields(obj):
            out.append(f"{f.name} = {fmt(getattr(obj, f.name))}")
        out.append("")
    return "\n".join(out)


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def _from_dict(cls, d: dict):
    return cls(**{k: _tuplify(v) for k, v in d.items()})


def load_splits(cfg: RunConfig, manifest: Path | None = None) -> tuple[Splits, list[tuple], int]:
    """Data, per-modality shapes and class count for ``cfg``."""
    manifest = manifest or (Path(cfg.manifest) if cfg.manifest else None)
    if manifest is None:
        return generate_dataset(cfg.data), _shapes(cfg.data), cfg.data.num_classes
    splits = load_raw_dataset(manifest)
    everything = splits.train + splits.val + splits.test
    if not everything:
        raise ValueError(f"{manifest}: no samples")
    shapes = [t.shape for t in everything[0].tensors]
    return splits, shapes, 1 + max(s.label for s in everything)


def _shapes(spec: SyntheticSpec) -> list[tuple]:
    return [(c, spec.frames, spec.height, spec.width) for c in spec.channels]


def model_from_checkpoint(path: Path):
    """Rebuild the model recorded in a checkpoint and load its best weights."""
    info, arrays = load_checkpoint(path)
    meta = info["meta"]
    dims = _from_dict(ModelDims, meta["dims"])
    shapes = [tuple(s) for s in meta["shapes"]]
    model = build_variant(VariantSpec(meta["variant"], dims), shapes, info["num_classes"], meta["seed"])
    prefix = "best/" if any(k.startswith("best/") for k in arrays) else "model/"
    model.load_state_dict({k[len(prefix):]: a for k, a in arrays.items() if k.startswith(prefix)})
    return model, info


def _meta_splits(info: dict, manifest: Path | None) -> Splits:
    meta = info["meta"]
    if manifest is None and meta.get("manifest"):
        manifest = Path(meta["manifest"])
    if manifest is not None:
        return load_raw_dataset(manifest)
    return generate_dataset(_from_dict(SyntheticSpec, meta["data"]))


def write_metrics(report: MetricReport, path: Path, split: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "top1", "mean1"] + [f"acc_{k}" for k in range(len(report.per_class_acc))])
        w.writerow([split, repr(report.top1), repr(report.mean1)]
                   + [repr(float(a)) for a in report.per_class_acc])
    with open(path.with_name(path.stem + "_confusion.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + list(range(report.confusion.shape[1])))
        for k, row in enumerate(report.confusion):
            w.writerow([k] + [int(c) for c in row])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args, out: Path) -> int:
    splits = generate_dataset(cfg.data)
    manifest = export_raw_dataset(splits, out)
    print(f"wrote {manifest} ({len(splits.train)}/{len(splits.val)}/{len(splits.test)} samples)")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args, out: Path) -> int:
    variant = args.variant or cfg.variant
    if variant not in harness.VARIANTS:
        raise UsageError(f"unknown variant {variant!r}; choose from {sorted(harness.VARIANTS)}")
    data, shapes, num_classes = load_splits(cfg)
    spec = VariantSpec(variant, cfg.dims, cfg.optim, cfg.htl)
    model = build_variant(spec, shapes, num_classes, cfg.optim.seed)
    meta = {"variant": variant, "seed": cfg.optim.seed, "dims": asdict(cfg.dims),
            "shapes": [list(s) for s in shapes], "data": asdict(cfg.data),
            "manifest": str(Path(cfg.manifest).resolve()) if cfg.manifest else None}
    trainer = Trainer(model, data, cfg.optim, spec.resolved_htl(), num_classes, meta)
    if args.resume:
        trainer.resume(args.resume)
        log.info("resumed at epoch %d", trainer.epoch)
    t0 = time.perf_counter()
    trainer.fit(args.epochs)
    write_run_log(trainer.history, out / "run_log.csv")
    trainer.save(out / "checkpoint.ckpt")
    print(f"{variant}: trained to epoch {trainer.epoch} in {time.perf_counter() - t0:.1f}s; "
          f"best val mean1 {trainer.best_mean1:.4f} at epoch {trainer.best_epoch}")
    if trainer.epoch >= cfg.optim.max_epochs and data.test:
        trainer.restore_best()
        pred, y, _ = predict_split(model, data.test)
        report = MetricReport.from_predictions(y, pred, num_classes)
        write_metrics(report, out / "test_metrics.csv", "test")
        print(f"test top1 {report.top1:.4f} mean1 {report.mean1:.4f}")
    if trainer.skipped_steps:
        log.warning("%d steps skipped for non-finite gradients", trainer.skipped_steps)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args, out: Path) -> int:
    model, info = model_from_checkpoint(args.checkpoint)
    samples = getattr(_meta_splits(info, args.manifest), args.split)
    pred, y, _ = predict_split(model, samples)
    report = MetricReport.from_predictions(y, pred, info["num_classes"])
    write_metrics(report, out / f"{args.split}_metrics.csv", args.split)
    print(f"{args.split}: top1 {report.top1:.4f} mean1 {report.mean1:.4f} ({len(samples)} samples)")
    return EXIT_OK


def cmd_export_gates(cfg: RunConfig, args, out: Path) -> int:
    model, info = model_from_checkpoint(args.checkpoint)
    samples = getattr(_meta_splits(info, args.manifest), args.split)
    path = out / f"gates_{args.split}.csv"
    rows = export_gate_weights(model, samples, path)
    bad, good = gate_mass(rows)
    print(f"wrote {path}: {len(rows)} rows; mean weight on corrupted {bad:.4f}, on clean {good:.4f}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args, out: Path) -> int:
    g = cfg.gradcheck
    variant = args.variant or g.variant
    if variant not in harness.VARIANTS:
        raise UsageError(f"unknown variant {variant!r}")
    ok = True
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["teacher", "tensor", "worst_index", "max_rel_diff", "passed"])
        for detach in (True, False):
            t0 = time.perf_counter()
            report = toy_gradcheck(variant, detach_teacher=detach, batch=g.batch,
                                   max_coords=g.max_coords, h=g.h, tol=g.tol,
                                   seed=cfg.optim.seed, htl=cfg.htl)
            mode = "detached" if detach else "live"
            for name, (idx, rel) in report.worst.items():
                w.writerow([mode, name, idx, repr(rel), int(rel <= g.tol)])
            print(f"{mode:8s} {report.summary()} ({time.perf_counter() - t0:.1f}s)")
            ok &= report.passed
    return EXIT_OK if ok else EXIT_CHECKS


def _csv_list(text: str | None, conv, default):
    if not text:
        return tuple(default)
    return tuple(conv(s.strip()) for s in text.split(",") if s.strip())


def cmd_ablate(cfg: RunConfig, args, out: Path) -> int:
    variants = _csv_list(args.variants, str, cfg.ablate.variants)
    bad = [v for v in variants if v not in harness.VARIANTS]
    if bad:
        raise UsageError(f"unknown variant(s) {bad}")
    try:
        seeds = _csv_list(args.seeds, int, cfg.ablate.seeds)
    except ValueError:
        raise UsageError(f"--seeds must be integers, got {args.seeds!r}") from None
    if len(seeds) < 2:
        raise UsageError("ablate needs at least two seeds")
    t0 = time.perf_counter()
    report = harness.run_ablation(variants, seeds, cfg.data, cfg.dims, cfg.optim,
                                  workers=args.workers, htl=cfg.htl)
    report.write_csv(out / "ablation.csv")
    table = report.table()
    (out / "ablation_table.txt").write_text(table + "\n")
    print(table)
    print(f"\n{len(report.rows)} runs in {time.perf_counter() - t0:.1f}s")
    if any(r.error for r in report.rows):
        return EXIT_RUNTIME
    return EXIT_OK if report.passed else EXIT_CHECKS


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "export-gates": cmd_export_gates,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
    except OSError as exc:
        print(f"momehtl: cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"momehtl: bad config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = args.out_dir
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / CONFIG_ECHO).write_text(cfg.text if args.config else render_config(cfg))
        return COMMANDS[args.command](cfg, args, out)
    except UsageError as exc:
        print(f"momehtl: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # reported, not re-raised: the exit status carries it
        log.debug("failure", exc_info=True)
        print(f"momehtl: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
