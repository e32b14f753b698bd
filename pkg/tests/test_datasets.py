import numpy as np
import pytest
from PIL import Image

from lungsam.datasets import (
    ImageSample,
    load_cache,
    load_montgomery,
    load_shenzhen,
    save_cache,
)
from lungsam.errors import DatasetError
from lungsam.synthetic import write_synthetic_tree


def _write_montgomery(root, entries):
    """entries: {id: (image array, left mask, right mask)} written as PNGs."""
    (root / "CXR_png").mkdir(parents=True)
    (root / "ManualMask" / "leftMask").mkdir(parents=True)
    (root / "ManualMask" / "rightMask").mkdir(parents=True)
    for sid, (img, left, right) in entries.items():
        Image.fromarray(img, mode="L").save(root / "CXR_png" / f"{sid}.png")
        Image.fromarray(left, mode="L").save(root / "ManualMask" / "leftMask" / f"{sid}.png")
        Image.fromarray(right, mode="L").save(root / "ManualMask" / "rightMask" / f"{sid}.png")


def test_loads_synthetic_tree(synth_tree, synth_samples):
    assert len(synth_samples) == 16
    ids = [s.id for s in synth_samples]
    assert len(set(ids)) == len(ids)
    for s in synth_samples:
        assert s.image.shape == (256, 256) and s.mask.shape == (256, 256)
        assert s.image.dtype == np.uint8 and s.mask.dtype == np.uint8
        assert set(np.unique(s.mask)) <= {0, 1}
        assert s.original_size != (256, 256)  # generator varies the native size


def test_merge_is_pixelwise_or_with_disjoint_areas(tmp_path):
    # native 256x256 so resizing is the identity and areas count exactly
    img = np.full((256, 256), 128, dtype=np.uint8)
    left = np.zeros((256, 256), dtype=np.uint8)
    right = np.zeros((256, 256), dtype=np.uint8)
    left[0:10] = 255  # area 2560
    right[20:30] = 255  # area 2560, disjoint
    _write_montgomery(tmp_path, {"CASE_0": (img, left, right)})
    (sample,) = load_montgomery(tmp_path)
    assert int(sample.mask.sum()) == 10 * 256 + 10 * 256


def test_merge_matches_elementwise_max(tmp_path, rng):
    img = np.full((256, 256), 100, dtype=np.uint8)
    left = ((rng.random((256, 256)) > 0.7) * 255).astype(np.uint8)
    right = ((rng.random((256, 256)) > 0.7) * 255).astype(np.uint8)
    _write_montgomery(tmp_path, {"CASE_0": (img, left, right)})
    (sample,) = load_montgomery(tmp_path)
    expected = np.maximum(left > 127, right > 127).astype(np.uint8)
    np.testing.assert_array_equal(sample.mask, expected)


def test_all_zero_masks_merge_to_zero(tmp_path):
    img = np.full((64, 64), 90, dtype=np.uint8)
    z = np.zeros((64, 64), dtype=np.uint8)
    _write_montgomery(tmp_path, {"CASE_0": (img, z, z)})
    (sample,) = load_montgomery(tmp_path)
    assert sample.mask.sum() == 0


def test_missing_mask_counterpart_lists_ids(tmp_path):
    img = np.full((32, 32), 90, dtype=np.uint8)
    m = np.full((32, 32), 255, dtype=np.uint8)
    _write_montgomery(tmp_path, {"A_0": (img, m, m), "B_1": (img, m, m)})
    (tmp_path / "ManualMask" / "rightMask" / "B_1.png").unlink()
    with pytest.raises(DatasetError, match="B_1"):
        load_montgomery(tmp_path)


def test_unreadable_image_reports_file(tmp_path):
    img = np.full((32, 32), 90, dtype=np.uint8)
    m = np.full((32, 32), 255, dtype=np.uint8)
    _write_montgomery(tmp_path, {"A_0": (img, m, m)})
    (tmp_path / "CXR_png" / "A_0.png").write_bytes(b"not a png")
    with pytest.raises(DatasetError, match="unreadable"):
        load_montgomery(tmp_path)


def test_empty_or_wrong_layout_rejected(tmp_path):
    with pytest.raises(DatasetError, match="not found"):
        load_montgomery(tmp_path / "nowhere")
    (tmp_path / "CXR_png").mkdir()
    (tmp_path / "ManualMask" / "leftMask").mkdir(parents=True)
    (tmp_path / "ManualMask" / "rightMask").mkdir(parents=True)
    with pytest.raises(DatasetError, match="no images"):
        load_montgomery(tmp_path)


def test_shenzhen_binarizes_0_255_masks(tmp_path):
    write_synthetic_tree(tmp_path, n=3, seed=5, layout="shenzhen")
    samples = load_shenzhen(tmp_path)
    assert len(samples) == 3
    for s in samples:
        assert set(np.unique(s.mask)) <= {0, 1}
        assert s.mask.any()


def test_shenzhen_reports_and_excludes_missing_masks(tmp_path, caplog):
    write_synthetic_tree(tmp_path, n=4, seed=5, layout="shenzhen")
    (tmp_path / "mask" / "SYN_0002_mask.png").unlink()
    with caplog.at_level("WARNING"):
        samples = load_shenzhen(tmp_path)
    assert len(samples) == 3
    assert "SYN_0002" in caplog.text
    assert all(s.id != "SYN_0002" for s in samples)


def test_large_image_resized(tmp_path):
    img = np.full((900, 1100), 70, dtype=np.uint8)
    mask = np.zeros((900, 1100), dtype=np.uint8)
    mask[200:700, 100:500] = 255
    _write_montgomery(tmp_path, {"BIG_0": (img, mask, np.zeros_like(mask))})
    (sample,) = load_montgomery(tmp_path)
    assert sample.image.shape == (256, 256)
    assert sample.mask.shape == (256, 256)
    assert sample.original_size == (900, 1100)
    assert set(np.unique(sample.mask)) <= {0, 1}  # nearest keeps it binary


def test_cache_roundtrip_is_bit_identical(tmp_path, synth_samples):
    cache = tmp_path / "cache"
    manifest = save_cache(synth_samples, cache)
    assert manifest.is_file()
    lines = manifest.read_text().strip().splitlines()
    assert len(lines) == len(synth_samples) + 1  # header + one per sample
    back = load_cache(cache)
    assert [s.id for s in back] == sorted(s.id for s in synth_samples)
    by_id = {s.id: s for s in synth_samples}
    for s in back:
        orig = by_id[s.id]
        np.testing.assert_array_equal(s.image, orig.image)
        np.testing.assert_array_equal(s.mask, orig.mask)
        assert s.image.dtype == orig.image.dtype
        assert s.original_size == orig.original_size


def test_cache_detects_corruption(tmp_path, synth_samples):
    cache = tmp_path / "cache"
    save_cache(synth_samples[:2], cache)
    victim = sorted((cache / "samples").glob("*.npz"))[0]
    sid = victim.stem
    sample = next(s for s in synth_samples if s.id == sid)
    tampered = sample.image.copy()
    tampered[0, 0] ^= 1
    np.savez(victim, image=tampered, mask=sample.mask,
             original_size=np.asarray(sample.original_size))
    with pytest.raises(DatasetError, match="checksum"):
        load_cache(cache)


def test_sample_checksum_tracks_content():
    a = ImageSample("x", "montgomery", np.zeros((4, 4), np.uint8),
                    np.zeros((4, 4), np.uint8), (4, 4))
    b = ImageSample("x", "montgomery", np.zeros((4, 4), np.uint8),
                    np.zeros((4, 4), np.uint8), (4, 4))
    assert a.checksum() == b.checksum()
    b.image[0, 0] = 1
    assert a.checksum() != b.checksum()
