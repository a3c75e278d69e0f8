"""Synthetic multimodal clips with sample-dependent modality reliability, and a
raw tensor format for bringing in externally prepared data.

Each class moves a bright square along its own trajectory. The pattern is
planted only in the modalities listed as reliable for that class; any
reliable modality may be replaced by noise for a given sample, but never all
of them, so every sample stays classifiable from at least one sensor.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import brentq

SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
MAGIC = b"MMT1"


@dataclass
class MultimodalSample:
    tensors: list[np.ndarray]
    label: int
    sample_id: int = 0
    corrupted: tuple[bool, ...] | None = None
    reliable: tuple[bool, ...] | None = None

    @property
    def num_modalities(self) -> int:
        return len(self.tensors)


class Splits(NamedTuple):
    train: list[MultimodalSample]
    val: list[MultimodalSample]
    test: list[MultimodalSample]


def default_reliable_map(num_classes: int, num_modalities: int) -> tuple[tuple[int, ...], ...]:
    """Class k is carried by modalities k mod N and (k + 1) mod N."""
    if num_modalities == 1:
        return tuple((0,) for _ in range(num_classes))
    return tuple(tuple(sorted({k % num_modalities, (k + 1) % num_modalities}))
                 for k in range(num_classes))


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 8
    samples_per_class: int = 60
    channels: tuple[int, ...] = (3, 1, 1)
    frames: int = 4
    height: int = 16
    width: int = 16
    reliable_map: tuple[tuple[int, ...], ...] | None = None
    corruption_prob: float = 0.3
    noise_std: float = 1.0
    amplitude: float = 3.0
    corruption_std: float = 1.0
    blob: int = 4
    speed: float = 3.0
    jitter: int = 1
    seed: int = 0

    @property
    def num_modalities(self) -> int:
        return len(self.channels)

    def resolved_map(self) -> tuple[tuple[int, ...], ...]:
        rmap = self.reliable_map
        if rmap is None:
            rmap = default_reliable_map(self.num_classes, self.num_modalities)
        return tuple(tuple(r) for r in rmap)

    def validate(self) -> None:
        if not 0.0 <= self.corruption_prob <= 1.0:
            raise ValueError(f"corruption_prob must lie in [0, 1], got {self.corruption_prob}")
        if self.num_classes < 1 or self.samples_per_class < 1:
            raise ValueError("need at least one class and one sample per class")
        rmap = self.resolved_map()
        if len(rmap) != self.num_classes:
            raise ValueError(f"reliable_map has {len(rmap)} entries for {self.num_classes} classes")
        for k, mods in enumerate(rmap):
            if not mods:
                raise ValueError(f"class {k} has no reliable modality")
            if any(not 0 <= m < self.num_modalities for m in mods):
                raise ValueError(f"class {k} lists an unknown modality: {mods}")
        if self.blob > min(self.height, self.width):
            raise ValueError("blob larger than the frame")


def trajectory(label: int, spec: SyntheticSpec) -> np.ndarray:
    """Top-left corner (row, col) of the square in every frame, before jitter."""
    theta = 2.0 * math.pi * label / spec.num_classes
    vel = spec.speed * np.array([math.sin(theta), math.cos(theta)])
    centre = np.array([(spec.height - spec.blob) / 2.0, (spec.width - spec.blob) / 2.0])
    steps = np.arange(spec.frames) - (spec.frames - 1) / 2.0
    return centre + steps[:, None] * vel


def render_pattern(label: int, spec: SyntheticSpec, offset=(0, 0)) -> np.ndarray:
    """``(T, H, W)`` mask of the moving square (values in {0, 1})."""
    out = np.zeros((spec.frames, spec.height, spec.width), np.float32)
    hi_r, hi_c = spec.height - spec.blob, spec.width - spec.blob
    for t, (r, c) in enumerate(trajectory(label, spec)):
        r0 = int(np.clip(round(r) + offset[0], 0, hi_r))
        c0 = int(np.clip(round(c) + offset[1], 0, hi_c))
        out[t, r0:r0 + spec.blob, c0:c0 + spec.blob] = 1.0
    return out


def _adjusted_prob(p: float, r: int) -> float:
    """Per-modality probability q such that, after rejecting the all-corrupted
    outcome, each of ``r`` modalities is corrupted with marginal probability p."""
    if p <= 0.0:
        return 0.0

    def marginal(q):
        return (q - q ** r) / (1.0 - q ** r) - p

    return brentq(marginal, 1e-12, 1.0 - 1e-12)


def _corruption_pattern(rng: np.random.Generator, r: int, p: float) -> np.ndarray:
    if r < 2 or p <= 0.0:
        return np.zeros(r, bool)
    if p >= (r - 1) / r:
        mask = np.ones(r, bool)
        mask[rng.integers(r)] = False
        return mask
    q = _adjusted_prob(p, r)
    while True:
        mask = rng.random(r) < q
        if not mask.all():
            return mask


def make_sample(label: int, index: int, spec: SyntheticSpec) -> MultimodalSample:
    rng = np.random.default_rng([spec.seed, label, index])
    reliable = spec.resolved_map()[label]
    mask = _corruption_pattern(rng, len(reliable), spec.corruption_prob)
    corrupted = [False] * spec.num_modalities
    for m, bad in zip(reliable, mask):
        corrupted[m] = bool(bad)
    offset = tuple(rng.integers(-spec.jitter, spec.jitter + 1, size=2)) if spec.jitter else (0, 0)
    pattern = render_pattern(label, spec, offset)
    tensors = []
    for m, c in enumerate(spec.channels):
        shape = (c, spec.frames, spec.height, spec.width)
        if corrupted[m]:
            x = rng.normal(0.0, spec.corruption_std, shape)
        else:
            x = rng.normal(0.0, spec.noise_std, shape)
            if m in reliable:
                x += spec.amplitude * pattern[None]
        tensors.append(x.astype(np.float32))
    return MultimodalSample(
        tensors=tensors, label=label, sample_id=label * spec.samples_per_class + index,
        corrupted=tuple(corrupted),
        reliable=tuple(m in reliable for m in range(spec.num_modalities)),
    )


def _apportion(counts: Sequence[int], frac: float, target: int) -> list[int]:
    """Per-class quotas near ``frac * count`` summing to ``target``
    (largest remainder; ties go to lower class index)."""
    raw = [frac * c for c in counts]
    base = [min(int(math.floor(x)), c) for x, c in zip(raw, counts)]
    rem = target - sum(base)
    order = sorted(range(len(counts)), key=lambda k: (-(raw[k] - base[k]), k))
    for k in order:
        if rem <= 0:
            break
        if base[k] < counts[k]:
            base[k] += 1
            rem -= 1
    return base


def stratified_counts(per_class: Sequence[int]) -> list[tuple[int, int, int]]:
    """(train, val, test) counts per class for a 70/15/15 split."""
    total = sum(per_class)
    n_train = _apportion(per_class, SPLIT_FRACTIONS[0], round(SPLIT_FRACTIONS[0] * total))
    left = [c - t for c, t in zip(per_class, n_train)]
    val_frac = [SPLIT_FRACTIONS[1] * c for c in per_class]
    target = round(SPLIT_FRACTIONS[1] * total)
    n_val = [min(int(math.floor(v)), l) for v, l in zip(val_frac, left)]
    rem = target - sum(n_val)
    order = sorted(range(len(per_class)), key=lambda k: (-(val_frac[k] - n_val[k]), k))
    for k in order:
        if rem <= 0:
            break
        if n_val[k] < left[k]:
            n_val[k] += 1
            rem -= 1
    return [(t, v, c - t - v) for c, t, v in zip(per_class, n_train, n_val)]


def generate_dataset(spec: SyntheticSpec) -> Splits:
    """Deterministic 70/15/15 stratified splits for ``spec``."""
    spec.validate()
    splits = Splits([], [], [])
    counts = stratified_counts([spec.samples_per_class] * spec.num_classes)
    for k in range(spec.num_classes):
        samples = [make_sample(k, i, spec) for i in range(spec.samples_per_class)]
        order = np.random.default_rng([spec.seed, k, 2**31]).permutation(len(samples))
        n_train, n_val, _ = counts[k]
        for j, idx in enumerate(order):
            dest = splits.train if j < n_train else splits.val if j < n_train + n_val else splits.test
            dest.append(samples[idx])
    for part in splits:
        part.sort(key=lambda s: s.sample_id)
    return splits


def stack_batch(samples: Sequence[MultimodalSample]) -> tuple[list[np.ndarray], np.ndarray]:
    """Per-modality arrays of shape ``(B, C_n, T, H, W)`` and the label vector."""
    if not samples:
        raise ValueError("empty batch")
    n = samples[0].num_modalities
    tensors = [np.stack([s.tensors[m] for s in samples]) for m in range(n)]
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return tensors, labels


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------

def nearest_centroid_accuracy(train: Sequence[MultimodalSample],
                              test: Sequence[MultimodalSample]) -> float:
    """Accuracy of a nearest class-mean classifier on all modalities flattened."""
    def flat(s):
        return np.concatenate([t.reshape(-1) for t in s.tensors]).astype(np.float64)

    x = np.stack([flat(s) for s in train])
    y = np.array([s.label for s in train])
    classes = np.unique(y)
    centroids = np.stack([x[y == k].mean(axis=0) for k in classes])
    xt = np.stack([flat(s) for s in test])
    d = ((xt[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    pred = classes[np.argmin(d, axis=1)]
    return float(np.mean(pred == np.array([s.label for s in test])))


# ---------------------------------------------------------------------------
# raw tensor files and manifests
# ---------------------------------------------------------------------------

def write_tensor(path, arr: np.ndarray) -> None:
    """MMT1: magic, u32 rank, u32 dims, little-endian float32 payload."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(encode_tensor(arr))


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.tobytes()


def decode_tensor(buf: bytes, offset: int = 0, source: str = "<buffer>") -> tuple[np.ndarray, int]:
    """Parse one MMT1 record at ``offset``; returns (array, next offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise ValueError(f"{source}: bad magic, not an MMT1 tensor")
    if len(buf) < offset + 8:
        raise ValueError(f"{source}: truncated header")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    pos = offset + 8
    if len(buf) < pos + 4 * rank:
        raise ValueError(f"{source}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    nbytes = 4 * math.prod(dims)
    if len(buf) < pos + nbytes:
        raise ValueError(f"{source}: truncated payload ({len(buf) - pos} of {nbytes} bytes)")
    arr = np.frombuffer(buf, dtype="<f4", count=math.prod(dims), offset=pos).reshape(dims)
    return arr.astype(np.float32), pos + nbytes


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf, 0, str(path))
    if end != len(buf):
        raise ValueError(f"{path}: {len(buf) - end} trailing bytes")
    return arr


def export_raw_dataset(splits: Splits, out_dir) -> Path:
    """Write every sample as MMT1 files plus a ``manifest.tsv``; returns its path."""
    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    lines = []
    for name, samples in zip(SPLITS, splits):
        for s in samples:
            paths = []
            for m, x in enumerate(s.tensors):
                rel = f"tensors/{name}_{s.sample_id:06d}_m{m}.mmt"
                write_tensor(out / rel, x)
                paths.append(rel)
            lines.append("\t".join([name, str(s.label), *paths]))
    manifest = out / "manifest.tsv"
    manifest.write_text("".join(line + "\n" for line in lines))
    return manifest


def load_raw_dataset(manifest_path, shapes: Sequence[tuple[int, ...]] | None = None) -> Splits:
    """Read a tab-separated manifest (split, label, one path per modality).

    Relative paths resolve against the manifest's directory. Every modality
    must keep one shape across samples (or match ``shapes`` when given).
    """
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    splits = Splits([], [], [])
    expected = [tuple(s) for s in shapes] if shapes is not None else None
    n_mod = len(expected) if expected is not None else None
    sample_id = 0
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) < 3:
            raise ValueError(f"{manifest_path}:{lineno}: need split, label and tensor paths")
        split, label, paths = fields[0], fields[1], fields[2:]
        if split not in SPLITS:
            raise ValueError(f"{manifest_path}:{lineno}: unknown split tag {split!r}")
        if n_mod is None:
            n_mod = len(paths)
        if len(paths) != n_mod:
            raise ValueError(f"{manifest_path}:{lineno}: expected {n_mod} modalities, got {len(paths)}")
        tensors = []
        for m, p in enumerate(paths):
            path = Path(p) if os.path.isabs(p) else root / p
            if not path.exists():
                raise FileNotFoundError(f"missing tensor file: {path}")
            x = read_tensor(path)
            if x.ndim != 4:
                raise ValueError(f"{path}: expected a C x T x H x W tensor, got shape {x.shape}")
            if expected is None:
                expected = [None] * n_mod
            if expected[m] is None:
                expected[m] = x.shape
            elif x.shape != expected[m]:
                raise ValueError(f"{path}: shape {x.shape} does not match expected {expected[m]}")
            tensors.append(x)
        getattr(splits, split).append(
            MultimodalSample(tensors=tensors, label=int(label), sample_id=sample_id))
        sample_id += 1
    return splits
