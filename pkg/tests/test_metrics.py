import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lungsam.metrics import (
    HardMask,
    MetricsRecord,
    binarize,
    f1,
    foreground_area_by_threshold,
    iou,
    read_records,
    summarize_folds,
    write_records,
)


def brute_force_counts(a, b):
    """Oracle: explicit pixel-set counting, independent of the library path."""
    inter = union = na = nb = 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            av, bv = bool(a[i, j]), bool(b[i, j])
            na += av
            nb += bv
            inter += av and bv
            union += av or bv
    return inter, union, na, nb


def random_mask(rng, shape=(8, 8), p=0.5):
    return (rng.random(shape) < p).astype(np.uint8)


def test_identical_masks(rng):
    m = random_mask(rng)
    m[0, 0] = 1  # ensure non-empty
    assert iou(m, m) == 1.0
    assert f1(m, m) == 1.0


def test_disjoint_masks():
    a = np.zeros((8, 8), dtype=np.uint8)
    b = np.zeros((8, 8), dtype=np.uint8)
    a[:2] = 1
    b[4:] = 1
    assert iou(a, b) == 0.0
    assert f1(a, b) == 0.0


def test_both_empty_convention():
    z = np.zeros((8, 8), dtype=np.uint8)
    assert iou(z, z) == 1.0
    assert f1(z, z) == 1.0


def test_half_coverage_f1():
    # prediction covers exactly half the truth, no false positives: F1 = 2/3
    truth = np.zeros((10, 10), dtype=np.uint8)
    truth[:4] = 1  # area 40
    pred = np.zeros((10, 10), dtype=np.uint8)
    pred[:2] = 1  # area 20, all inside truth
    assert f1(truth, pred) == pytest.approx(2.0 / 3.0, abs=1e-12)


def test_matches_brute_force_oracle(rng):
    for _ in range(200):
        a = random_mask(rng, p=rng.uniform(0.1, 0.9))
        b = random_mask(rng, p=rng.uniform(0.1, 0.9))
        inter, union, na, nb = brute_force_counts(a, b)
        expect_iou = 1.0 if union == 0 else inter / union
        expect_f1 = 1.0 if na + nb == 0 else 2 * inter / (na + nb)
        assert iou(a, b) == pytest.approx(expect_iou, abs=1e-12)
        assert f1(a, b) == pytest.approx(expect_f1, abs=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_symmetry_range_identity(seed):
    rng = np.random.default_rng(seed)
    a = random_mask(rng, p=rng.uniform(0.0, 1.0))
    b = random_mask(rng, p=rng.uniform(0.0, 1.0))
    i_ab, i_ba = iou(a, b), iou(b, a)
    f_ab, f_ba = f1(a, b), f1(b, a)
    assert i_ab == i_ba and f_ab == f_ba
    assert 0.0 <= i_ab <= 1.0 and 0.0 <= f_ab <= 1.0
    # algebraic identity, F1 = 2*IoU/(1+IoU)
    assert f_ab == pytest.approx(2 * i_ab / (1 + i_ab), abs=1e-12)
    if i_ab > 0:
        assert f_ab >= i_ab


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="shape"):
        iou(np.zeros((4, 4)), np.zeros((5, 5)))
    with pytest.raises(ValueError, match="shape"):
        f1(np.zeros((4, 4)), np.zeros((5, 5)))


def test_binarize_boundary_is_inclusive():
    probs = np.full((4, 4), 0.65)
    hard = binarize(probs, 0.65)
    assert isinstance(hard, HardMask)
    assert hard.pixels.all()
    assert hard.threshold_used == 0.65


def test_binarize_below_threshold():
    probs = np.full((4, 4), 0.4)
    assert not binarize(probs, 0.5).pixels.any()


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, 2.0])
def test_binarize_rejects_bad_threshold(bad):
    with pytest.raises(ValueError):
        binarize(np.zeros((2, 2)), bad)


def test_foreground_area_nonincreasing(rng):
    thresholds = [0.50, 0.55, 0.60, 0.65, 0.70]
    for _ in range(50):
        probs = rng.uniform(0, 1, (32, 32))
        areas = foreground_area_by_threshold(probs, thresholds)
        assert all(areas[k] >= areas[k + 1] for k in range(len(areas) - 1))
        # areas agree with binarize itself
        for t, area in zip(thresholds, areas):
            assert area == binarize(probs, t).pixels.sum()


def _records(n, rng):
    out = []
    for i in range(n):
        out.append(
            MetricsRecord(
                sample_id=f"s{i:03d}", dataset="montgomery", prompt_mode="points",
                threshold=0.5, iou=float(rng.uniform(0, 1)), f1=float(rng.uniform(0, 1)),
            )
        )
    return out


def test_records_csv_roundtrip(tmp_path, rng):
    records = _records(7, rng)
    path = tmp_path / "records.csv"
    write_records(path, records)
    back = read_records(path)
    assert back == records  # repr() serialization keeps floats exact


def test_summarize_folds_matches_hand_computation(rng):
    folds = [_records(4, rng), _records(5, rng), _records(3, rng)]
    summary = summarize_folds("demo", folds)
    hand_f1 = [sum(r.f1 for r in fold) / len(fold) for fold in folds]
    hand_iou = [sum(r.iou for r in fold) / len(fold) for fold in folds]
    assert summary.fold_f1 == pytest.approx(hand_f1, abs=1e-12)
    assert summary.fold_iou == pytest.approx(hand_iou, abs=1e-12)
    assert summary.mean_f1 == pytest.approx(np.mean(hand_f1), abs=1e-12)
    assert summary.std_f1 == pytest.approx(np.std(hand_f1, ddof=1), abs=1e-12)
    assert summary.std_f1 >= 0
