import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fbanet.contrastive import ShapeError
from fbanet.metrics import EmptySurface, aggregate, asd, dice_score, evaluate_case, surface_voxels
from fbanet.verification import brute_asd, brute_dice, brute_surface


def test_dice_examples():
    m = np.zeros((4, 4), bool)
    m[1:3, 1:3] = True
    assert dice_score(m, m) == 1.0
    other = np.zeros_like(m)
    other[0, 0] = True
    assert dice_score(m, other) == 0.0
    a = np.zeros(5, bool)
    b = np.zeros(5, bool)
    a[[0, 1]] = True
    b[[1, 2]] = True
    assert dice_score(a, b) == 0.5


def test_dice_both_empty_is_one():
    assert dice_score(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_dice_shape_mismatch():
    with pytest.raises(ShapeError):
        dice_score(np.zeros((3, 3)), np.zeros((3, 4)))


def test_surface_single_voxel():
    m = np.zeros((5, 5, 5), bool)
    m[2, 2, 2] = True
    assert surface_voxels(m).tolist() == [[2, 2, 2]]


def test_surface_solid_cube_shell():
    m = np.zeros((5, 5, 5), bool)
    m[1:4, 1:4, 1:4] = True
    surf = surface_voxels(m)
    assert len(surf) == 26
    assert [2, 2, 2] not in surf.tolist()


def test_surface_border_counts_as_background():
    m = np.ones((3, 3), bool)
    assert len(surface_voxels(m)) == 8


def test_surface_empty():
    assert surface_voxels(np.zeros((4, 4), bool)).shape == (0, 2)


def test_asd_identical_is_zero():
    m = np.zeros((6, 6, 6), bool)
    m[1:4, 2:5, 1:3] = True
    assert asd(m, m) == 0.0


def test_asd_single_voxels_three_apart():
    a = np.zeros((8, 8, 8), bool)
    b = np.zeros_like(a)
    a[1, 4, 4] = True
    b[4, 4, 4] = True
    assert asd(a, b) == pytest.approx(3.0)


def test_asd_anisotropic_spacing():
    a = np.zeros((4, 4, 4), bool)
    b = np.zeros_like(a)
    a[1, 1, 1] = True
    b[1, 1, 2] = True
    assert asd(a, b, spacing=(1, 1, 2)) == pytest.approx(2.0)


def test_asd_empty_side_reported():
    m = np.zeros((4, 4), bool)
    m[1, 1] = True
    with pytest.raises(EmptySurface) as exc:
        asd(np.zeros_like(m), m)
    assert exc.value.side == "pred"
    with pytest.raises(EmptySurface) as exc:
        asd(m, np.zeros_like(m))
    assert exc.value.side == "gt"


def test_asd_rejects_bad_spacing():
    m = np.ones((2, 2), bool)
    with pytest.raises(ValueError):
        asd(m, m, spacing=(1.0, 0.0))


masks3d = arrays(bool, st.tuples(st.integers(2, 6), st.integers(2, 6), st.integers(2, 6)))


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_asd_symmetric_and_matches_brute(data):
    shape = data.draw(st.tuples(st.integers(2, 6), st.integers(2, 6), st.integers(2, 6)))
    a = data.draw(arrays(bool, shape))
    b = data.draw(arrays(bool, shape))
    if not a.any() or not b.any():
        return
    assert asd(a, b) == pytest.approx(asd(b, a), abs=1e-12)
    assert asd(a, b) == pytest.approx(brute_asd(a, b), abs=1e-9)
    assert sorted(map(tuple, surface_voxels(a).tolist())) == sorted(brute_surface(a))


@settings(max_examples=40, deadline=None)
@given(masks3d)
def test_dice_self_and_oracle(m):
    assert dice_score(m, m) == 1.0
    other = np.roll(m, 1, axis=0)
    assert dice_score(m, other) == brute_dice(m, other) == dice_score(other, m)


def test_evaluate_case_multiclass_and_aggregate():
    gt = np.zeros((6, 6), int)
    gt[1:3, 1:3] = 1
    gt[4:6, 4:6] = 2
    pred = gt.copy()
    pred[4:6, 4:6] = 0
    rows = evaluate_case(pred, gt, num_classes=2)
    assert rows[0] == {"class": 1, "dice": 1.0, "asd": 0.0}
    assert rows[1]["dice"] == 0.0 and np.isnan(rows[1]["asd"])
    agg = aggregate(rows)
    assert agg["dice_mean"] == 0.5 and agg["asd_mean"] == 0.0 and agg["asd_undefined"] == 1
