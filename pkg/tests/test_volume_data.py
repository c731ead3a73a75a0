import filecmp
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from due.errors import AnnotationError, ConfigError, CorruptFileError, SplitError, ValidationError
from due.volume_data import (DatasetManifest, DenseAnnotation, SampleEntry, SparseAnnotation,
                             SyntheticConfig, Volume, generate_synthetic_dataset, load_annotation,
                             load_array, load_sparse, load_volume, save_annotation, save_array,
                             save_sparse, save_volume, sparsify_annotation, split_dataset)

SMALL = dict(shape=(16, 32, 32), lesion_radius_range=(4, 7), lesion_depth_radius_range=(3, 5),
             distractor_radius_range=(1, 2), texture_sigma=2)


def small_config(**kw):
    return SyntheticConfig(**{**SMALL, **kw})


def test_volume_invariants():
    Volume(np.zeros((4, 4, 4)))
    with pytest.raises(ValidationError):
        Volume(np.zeros((3, 4, 4)))
    with pytest.raises(ValidationError):
        Volume(np.full((4, 4, 4), 1.5))
    with pytest.raises(ValidationError):
        Volume(np.full((4, 4, 4), np.nan))


def test_generate_labels_and_masks(tmp_path):
    m = generate_synthetic_dataset(small_config(n_pos=1, n_neg=1), 7, tmp_path)
    pos, neg = m.get("pos0000"), m.get("neg0000")
    assert m.load_mask(pos).mask.sum() > 0
    assert m.load_mask(neg).mask.sum() == 0
    v = m.load_volume(pos).data
    assert v.dtype == np.float32 and v.min() >= 0 and v.max() <= 1


def test_generate_is_deterministic(tmp_path):
    cfg = small_config(n_pos=2, n_neg=1)
    generate_synthetic_dataset(cfg, 3, tmp_path / "a")
    generate_synthetic_dataset(cfg, 3, tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for sub in cmp.subdirs.values():
        assert not sub.diff_files
        _, mismatch, errors = filecmp.cmpfiles(sub.left, sub.right, sub.common_files, shallow=False)
        assert not mismatch and not errors


def test_generate_counts_ids(tmp_path):
    m = generate_synthetic_dataset(small_config(n_pos=5, n_neg=5), 0, tmp_path)
    ids = [s.id for s in m.samples]
    assert len(ids) == 10 and len(set(ids)) == 10
    reloaded = DatasetManifest.load(tmp_path)
    assert [s.id for s in reloaded.samples] == ids


def test_lesion_must_fit():
    with pytest.raises(ConfigError):
        SyntheticConfig(shape=(8, 16, 16), lesion_radius_range=(10, 12)).validate()
    with pytest.raises((ValidationError, ConfigError)):
        SyntheticConfig(shape=(3, 32, 32)).validate()


def _dense_with_extent(lo, hi, depth=10):
    m = np.zeros((depth, 6, 6), np.uint8)
    m[lo:hi + 1, 2:4, 2:4] = 1
    m[lo:hi + 1, 1, 1] = np.arange(hi - lo + 1) % 2  # make slices distinguishable
    return DenseAnnotation(m, "ground_truth")


def test_sparsify_examples():
    assert sparsify_annotation(_dense_with_extent(0, 8), 4).indices == (0, 4, 8)
    assert sparsify_annotation(_dense_with_extent(2, 7), 4).indices == (2, 6, 7)
    assert sparsify_annotation(_dense_with_extent(2, 7), [3, 5]).indices == (3, 5)
    with pytest.raises(AnnotationError):
        sparsify_annotation(DenseAnnotation(np.zeros((6, 4, 4), np.uint8)), 2)


@given(st.integers(0, 10), st.integers(1, 12), st.integers(2, 6))
def test_sparsify_count_and_copies(lo, length, k):
    hi = lo + length
    dense = _dense_with_extent(lo, hi, depth=24)
    sp = sparsify_annotation(dense, k)
    assert len(sp.indices) == math.ceil((hi - lo) / k) + 1
    assert sp.indices[0] == lo and sp.indices[-1] == hi
    for z, m in sp.slices:
        assert np.array_equal(m, dense.mask[z])


def test_sparse_invariants():
    with pytest.raises(ValidationError):
        SparseAnnotation((3, 2), np.zeros((2, 4, 4), np.uint8), 8)
    with pytest.raises(ValidationError):
        SparseAnnotation((1, 9), np.zeros((2, 4, 4), np.uint8), 8)


def _manifest(n_pos, n_neg):
    samples = [SampleEntry(f"p{i}", 1, "v", "m", (4, 4, 4)) for i in range(n_pos)]
    samples += [SampleEntry(f"n{i}", 0, "v", "m", (4, 4, 4)) for i in range(n_neg)]
    return DatasetManifest(samples, 0, {})


def test_split_sizes():
    m = split_dataset(_manifest(5, 5), (0.5, 0.2, 0.3), seed=1)
    sizes = {t: len(m.by_split(t)) for t in ("train", "val", "test")}
    assert sizes == {"train": 5, "val": 2, "test": 3}


def test_split_balance():
    m = split_dataset(_manifest(4, 8), (0.5, 0.2, 0.3), seed=1, balance_train=True)
    train = m.by_split("train")
    assert len(train) == 6 and sum(s.label for s in train) == 3
    with pytest.raises(SplitError):
        split_dataset(_manifest(1, 8), (0.5, 0.2, 0.3), seed=1, balance_train=True)


@settings(max_examples=30)
@given(st.integers(2, 20), st.integers(2, 20), st.integers(0, 100))
def test_split_properties(n_pos, n_neg, seed):
    base = _manifest(n_pos, n_neg)
    m = split_dataset(base, (0.5, 0.2, 0.3), seed=seed)
    assert len(m.samples) == n_pos + n_neg
    assert split_dataset(base, (0.5, 0.2, 0.3), seed=seed).samples == m.samples
    prevalence = n_pos / (n_pos + n_neg)
    for t in ("val", "test"):
        part = m.by_split(t)
        assert abs(sum(s.label for s in part) - prevalence * len(part)) <= 1 + 1e-9


def test_volume_and_mask_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    v = Volume(rng.random((5, 6, 7)).astype(np.float32))
    save_volume(tmp_path / "v.f32", v)
    assert np.array_equal(load_volume(tmp_path / "v.f32").data, v.data)
    a = DenseAnnotation((rng.random((5, 6, 7)) > 0.5).astype(np.uint8), "ground_truth")
    save_annotation(tmp_path / "m.u8", a)
    back = load_annotation(tmp_path / "m.u8")
    assert np.array_equal(back.mask, a.mask) and back.provenance == "ground_truth"


def test_truncated_payload_is_corrupt(tmp_path):
    p = tmp_path / "v.f32"
    save_volume(p, Volume(np.zeros((4, 4, 4), np.float32)))
    data = p.read_bytes()
    p.write_bytes(data[:-4])
    with pytest.raises(CorruptFileError):
        load_volume(p)


def test_header_dims_over_64_values(tmp_path):
    save_array(tmp_path / "a.f32", np.arange(64, dtype=np.float32).reshape(4, 4, 4) / 64, "<f4")
    assert load_array(tmp_path / "a.f32").shape == (4, 4, 4)


def test_sparse_roundtrip(tmp_path):
    sp = sparsify_annotation(_dense_with_extent(1, 7), 3)
    save_sparse(tmp_path / "s", sp)
    back = load_sparse(tmp_path / "s")
    assert back.indices == sp.indices and back.depth == sp.depth
    assert np.array_equal(back.masks, sp.masks)
