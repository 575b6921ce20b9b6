import numpy as np
import pytest

from crackseg.metrics import IoUResult, iou, miou, write_report
from crackseg.tensor import ShapeError


def mask(arr):
    return np.asarray(arr, dtype=np.float64).reshape(1, 1, *np.shape(arr))


def test_identical_nonempty_masks():
    m = mask([[1, 0], [0, 1]])
    assert iou(m, m).iou == 1.0


def test_disjoint_nonempty_masks():
    a = mask([[1, 0], [0, 0]])
    b = mask([[0, 0], [0, 1]])
    assert iou(a, b).iou == 0.0


def test_shifted_block_overlap():
    # pred = left 2x2 block, gt = right 2x2 block on a 2x3 grid: |I|=2, |U|=6
    pred = mask([[1, 1, 0], [1, 1, 0]])
    gt = mask([[0, 1, 1], [0, 1, 1]])
    r = iou(pred, gt)
    assert (r.intersection, r.union) == (2, 6)
    assert r.iou == pytest.approx(1 / 3)


def test_both_empty_convention():
    z = mask([[0, 0], [0, 0]])
    r = iou(z, z)
    assert r.union == 0 and r.iou == 1.0


def test_threshold_applied_to_probabilities():
    pred = mask([[0.6, 0.4], [0.5, 0.1]])
    gt = mask([[1, 0], [1, 0]])
    assert iou(pred, gt).iou == 1.0


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        iou(mask([[1, 0]]), mask([[1], [0]]))


def test_nonbinary_ground_truth_rejected():
    with pytest.raises(ValueError):
        iou(mask([[1, 0]]), mask([[0.5, 0]]))


def test_symmetry_on_binary_inputs():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = (rng.random((1, 1, 5, 5)) > 0.5).astype(np.float64)
        b = (rng.random((1, 1, 5, 5)) > 0.5).astype(np.float64)
        assert iou(a, b).iou == iou(b, a).iou


def test_adding_correct_pixel_never_decreases_iou():
    rng = np.random.default_rng(1)
    for _ in range(20):
        gt = (rng.random((1, 1, 4, 4)) > 0.4).astype(np.float64)
        pred = gt * (rng.random((1, 1, 4, 4)) > 0.5)
        before = iou(pred, gt).iou
        missing = np.argwhere((gt > 0) & (pred == 0))
        if len(missing) == 0:
            continue
        pred2 = pred.copy()
        pred2[tuple(missing[0])] = 1.0
        assert iou(pred2, gt).iou >= before


def test_iou_always_in_unit_interval():
    rng = np.random.default_rng(2)
    for _ in range(50):
        a = (rng.random((1, 1, 3, 3)) > rng.random()).astype(np.float64)
        b = (rng.random((1, 1, 3, 3)) > rng.random()).astype(np.float64)
        assert 0.0 <= iou(a, b).iou <= 1.0


def test_miou_examples():
    assert miou([IoUResult(1, 1, 1.0), IoUResult(0, 1, 0.0)]) == 0.5
    assert miou([IoUResult(3, 4, 0.75)]) == 0.75


def test_miou_empty_rejected():
    with pytest.raises(ValueError):
        miou([])


def test_miou_matches_recomputation_from_counts():
    rng = np.random.default_rng(3)
    results = []
    for _ in range(100):
        a = (rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64)
        b = (rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64)
        results.append(iou(a, b))
    direct = np.mean([1.0 if r.union == 0 else r.intersection / r.union
                      for r in results])
    assert miou(results) == direct


def test_report_format(tmp_path):
    results = [IoUResult(1, 2, 0.5, source="a"), IoUResult(1, 1, 1.0, source="b")]
    path = tmp_path / "report.tsv"
    write_report(results, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "a\t0.500000"
    assert lines[1] == "b\t1.000000"
    assert lines[2] == "mIoU\t0.750000"
