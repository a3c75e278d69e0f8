import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from momehtl.data import (
    SyntheticSpec, decode_tensor, encode_tensor, export_raw_dataset, generate_dataset,
    load_raw_dataset, make_sample, nearest_centroid_accuracy, read_tensor, render_pattern,
    stack_batch, stratified_counts, write_tensor,
)


def small(**kw) -> SyntheticSpec:
    base = dict(num_classes=4, samples_per_class=10, height=8, width=8, blob=2, speed=1.5)
    base.update(kw)
    return SyntheticSpec(**base)


def assert_same(a, b):
    assert len(a) == len(b)
    for sa, sb in zip(a, b):
        assert sa.label == sb.label
        for ta, tb in zip(sa.tensors, sb.tensors):
            np.testing.assert_array_equal(ta, tb)


def test_same_seed_is_bit_identical():
    s1, s2 = generate_dataset(small(seed=3)), generate_dataset(small(seed=3))
    for a, b in zip(s1, s2):
        assert_same(a, b)
        assert [x.sample_id for x in a] == [x.sample_id for x in b]


def test_different_seed_differs():
    a, b = generate_dataset(small(seed=0)), generate_dataset(small(seed=1))
    assert not np.array_equal(a.train[0].tensors[0], b.train[0].tensors[0])


def test_split_sizes_example():
    splits = generate_dataset(SyntheticSpec(num_classes=8, samples_per_class=30, height=8, width=8,
                                            blob=2, speed=1.5))
    assert [len(s) for s in splits] == [168, 36, 36]


@given(st.lists(st.integers(1, 200), min_size=1, max_size=12))
def test_stratified_counts_cover_every_sample(per_class):
    counts = stratified_counts(per_class)
    total = sum(per_class)
    assert [sum(c) for c in counts] == per_class
    assert sum(c[0] for c in counts) == round(0.7 * total)
    assert sum(c[1] for c in counts) == round(0.15 * total)
    for (tr, va, te), n in zip(counts, per_class):
        assert min(tr, va, te) >= 0
        assert abs(tr - 0.7 * n) < 1 + 1e-9


def test_splits_are_stratified_and_disjoint():
    splits = generate_dataset(small(samples_per_class=20))
    ids = [s.sample_id for part in splits for s in part]
    assert len(ids) == len(set(ids)) == 80
    for part, n in zip(splits, (14, 3, 3)):
        assert np.bincount([s.label for s in part], minlength=4).tolist() == [n] * 4


def test_p_zero_has_no_corruption_by_signal_energy():
    spec = SyntheticSpec(corruption_prob=0.0, samples_per_class=6)
    for s in generate_dataset(spec).train:
        assert not any(s.corrupted)
        mask = render_pattern(s.label, spec, (0, 0))
        for m, x in enumerate(s.tensors):
            # jitter of one pixel keeps >= 9/16 of each 4x4 square on the mask
            on_pattern = (x.mean(0) * mask).sum() / mask.sum()
            if s.reliable[m]:
                assert on_pattern > 1.0
            else:
                assert abs(on_pattern) < 1.0


def test_corrupted_modalities_are_pure_noise():
    spec = small(corruption_prob=0.5, samples_per_class=40)
    seen = 0
    for s in generate_dataset(spec).train:
        assert any(r and not c for r, c in zip(s.reliable, s.corrupted))
        for m, x in enumerate(s.tensors):
            if s.corrupted[m]:
                assert s.reliable[m]
                assert abs(x.mean()) < 0.2
                seen += 1
    assert seen > 0


def test_corruption_rate_within_three_standard_errors():
    p = 0.3
    spec = small(corruption_prob=p, num_classes=8, samples_per_class=150)
    flags = [c for k in range(8) for i in range(150)
             for c, r in zip(*(lambda s: (s.corrupted, s.reliable))(make_sample(k, i, spec))) if r]
    n = len(flags)
    assert n >= 1000
    se = math.sqrt(p * (1 - p) / n)
    assert abs(np.mean(flags) - p) <= 3 * se


def test_corruption_never_hits_every_reliable_modality():
    spec = small(corruption_prob=0.6, samples_per_class=50)
    for k in range(4):
        for i in range(50):
            s = make_sample(k, i, spec)
            assert not all(c for c, r in zip(s.corrupted, s.reliable) if r)


@pytest.mark.parametrize("kw", [dict(reliable_map=((0,), (), (1,), (2,))),
                                dict(corruption_prob=1.5),
                                dict(reliable_map=((0,), (5,), (1,), (2,))),
                                dict(reliable_map=((0,),))])
def test_infeasible_spec_rejected(kw):
    with pytest.raises(ValueError):
        generate_dataset(small(**kw))


def test_nearest_centroid_oracle_separates_clean_data():
    spec = SyntheticSpec(corruption_prob=0.0, samples_per_class=30)
    splits = generate_dataset(spec)
    assert nearest_centroid_accuracy(splits.train, splits.test) == 1.0


def test_stack_batch_shapes():
    splits = generate_dataset(small())
    xs, y = stack_batch(splits.train[:5])
    assert [x.shape for x in xs] == [(5, 3, 4, 8, 8), (5, 1, 4, 8, 8), (5, 1, 4, 8, 8)]
    assert y.dtype == np.int64 and y.shape == (5,)
    with pytest.raises(ValueError):
        stack_batch([])


# --- raw tensors and manifests ----------------------------------------------

def test_tensor_header_layout(tmp_path):
    x = np.arange(6, dtype=np.float32).reshape(1, 2, 3)
    write_tensor(tmp_path / "t.mmt", x)
    raw = (tmp_path / "t.mmt").read_bytes()
    assert raw[:4] == b"MMT1"
    assert np.frombuffer(raw[4:20], "<u4").tolist() == [3, 1, 2, 3]
    np.testing.assert_array_equal(np.frombuffer(raw[20:], "<f4"), np.arange(6))
    np.testing.assert_array_equal(read_tensor(tmp_path / "t.mmt"), x)


@settings(max_examples=50)
@given(st.lists(st.integers(0, 4), min_size=0, max_size=4), st.integers(0, 2 ** 16))
def test_tensor_codec_round_trip(shape, seed):
    x = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
    y, end = decode_tensor(encode_tensor(x))
    assert end == len(encode_tensor(x))
    np.testing.assert_array_equal(x, y)


def test_truncated_tensor_rejected(tmp_path):
    buf = encode_tensor(np.ones((2, 3), np.float32))
    for cut in (3, 10, len(buf) - 1):
        (tmp_path / "bad.mmt").write_bytes(buf[:cut])
        with pytest.raises(ValueError):
            read_tensor(tmp_path / "bad.mmt")


def test_export_load_round_trip(tmp_path):
    splits = generate_dataset(small())
    manifest = export_raw_dataset(splits, tmp_path)
    loaded = load_raw_dataset(manifest)
    for a, b in zip(splits, loaded):
        assert_same(a, b)


def test_wrong_channel_count_names_the_file(tmp_path):
    splits = generate_dataset(small(samples_per_class=2))
    manifest = export_raw_dataset(splits, tmp_path)
    victim = manifest.read_text().splitlines()[1].split("\t")[3]
    write_tensor(tmp_path / victim, np.zeros((2, 4, 8, 8), np.float32))
    with pytest.raises(ValueError, match=victim.split("/")[-1]):
        load_raw_dataset(manifest)
    # also against explicitly supplied shapes
    with pytest.raises(ValueError, match="does not match"):
        load_raw_dataset(manifest, shapes=[(3, 4, 8, 8), (1, 4, 8, 8), (1, 4, 8, 8)])


def test_missing_file_and_bad_split(tmp_path):
    write_tensor(tmp_path / "a.mmt", np.zeros((1, 2, 2, 2), np.float32))
    (tmp_path / "m.tsv").write_text("train\t0\tnope.mmt\n")
    with pytest.raises(FileNotFoundError, match="nope.mmt"):
        load_raw_dataset(tmp_path / "m.tsv")
    (tmp_path / "m.tsv").write_text("dev\t0\ta.mmt\n")
    with pytest.raises(ValueError, match="dev"):
        load_raw_dataset(tmp_path / "m.tsv")
    (tmp_path / "m.tsv").write_text("train\t0\ta.mmt\ntrain\t1\ta.mmt\ta.mmt\n")
    with pytest.raises(ValueError, match="modalities"):
        load_raw_dataset(tmp_path / "m.tsv")


def test_empty_manifest_gives_empty_splits(tmp_path):
    (tmp_path / "m.tsv").write_text("")
    splits = load_raw_dataset(tmp_path / "m.tsv")
    assert [len(s) for s in splits] == [0, 0, 0]
