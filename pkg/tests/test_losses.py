import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tatrack import tensor as T
from tatrack.errors import InputError
from tatrack.gradcheck import check_function
from tatrack.losses import (LossWeights, gaussian_target_map, giou_loss, giou_terms, total_loss,
                            weighted_focal, weighted_sum)
from tatrack.model import BBox
from tatrack.tensor import Tensor


def _giou(a, b):
    iou, giou = giou_terms([np.float64(v) for v in a], [np.float64(v) for v in b])
    return float(iou.data), float(giou.data)


def test_giou_identical_boxes():
    assert giou_loss((0.5, 0.5, 1, 1), (0.5, 0.5, 1, 1)).item() == pytest.approx(0.0, abs=1e-7)


def test_giou_disjoint_hand_value():
    with T.default_dtype(np.float64):
        loss = giou_loss([np.float64(v) for v in (0.5, 0.5, 1, 1)],
                         [np.float64(v) for v in (2.5, 2.5, 1, 1)])
    assert loss.item() == pytest.approx(1 + 7 / 9, abs=1e-6)
    assert loss.item() == pytest.approx(1.7778, abs=1e-4)


def test_giou_nested_hand_value():
    with T.default_dtype(np.float64):
        iou, giou = _giou((0.5, 0.5, 1, 1), (0.5, 0.5, 0.5, 0.5))
    assert iou == pytest.approx(0.25) and giou == pytest.approx(0.25)


def test_giou_rejects_zero_area():
    with pytest.raises(InputError):
        giou_loss((0.5, 0.5, 0.0, 1.0), (0.5, 0.5, 1, 1))


box = st.tuples(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.05, 2), st.floats(0.05, 2))


@given(box, box, st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=200, deadline=None)
def test_giou_properties(a, b, dx, dy):
    with T.default_dtype(np.float64):
        iou, giou = _giou(a, b)
        assert -1 < giou <= iou + 1e-12
        loss = 1 - giou
        assert 0 <= loss + 1e-12 < 2
        shifted = _giou((a[0] + dx, a[1] + dy, a[2], a[3]), (b[0] + dx, b[1] + dy, b[2], b[3]))
        assert shifted[1] == pytest.approx(giou, abs=1e-9)


def test_weighted_sum_arithmetic():
    assert weighted_sum(0.1, 0.2, 0.04) == pytest.approx(0.7, abs=1e-15)
    assert weighted_sum(0.0, 0.0, 0.0) == 0.0
    doubled = weighted_sum(0.1, 0.2, 0.04, LossWeights(4.0, 10.0))
    assert doubled - 0.1 == pytest.approx(2 * (0.7 - 0.1))
    assert LossWeights() == LossWeights(2.0, 5.0)
    with pytest.raises(InputError):
        LossWeights(-1.0, 5.0)


def test_gaussian_target_map():
    m = gaussian_target_map(BBox(0.5 + 1 / 16, 0.5 + 1 / 16, 0.4, 0.4), 8)[0]
    assert m.shape == (8, 8)
    assert m[4, 4] == 1.0 and (m == 1.0).sum() == 1
    np.testing.assert_allclose(m[4, 4 - 2], m[4, 4 + 2])
    np.testing.assert_allclose(m, m.T)
    small = gaussian_target_map(BBox(0.5, 0.5, 0.2, 0.2), 16).sum()
    large = gaussian_target_map(BBox(0.5, 0.5, 0.6, 0.6), 16).sum()
    assert large > small
    with pytest.raises(InputError):
        gaussian_target_map(BBox(0.5, 0.5, 0.0, 0.3), 8)


def test_focal_loss_examples():
    gt = gaussian_target_map(BBox(0.5, 0.5, 0.2, 0.2), 4, np.float64)
    onehot = (gt == 1.0).astype(np.float64)
    perfect = np.where(onehot == 1, 1 - 1e-6, 1e-6)
    assert weighted_focal(Tensor(perfect, dtype=np.float64), onehot).item() < 1e-5
    assert weighted_focal(Tensor(np.full_like(gt, 0.5), dtype=np.float64), gt).item() > 0


def test_focal_gradient():
    gt = gaussian_target_map(BBox(0.4, 0.6, 0.3, 0.3), 4, np.float64)
    p = np.random.default_rng(0).uniform(0.05, 0.95, gt.shape)
    with T.default_dtype(np.float64):
        r = check_function("focal", lambda x: weighted_focal(x, gt), [p])
    assert r.ok, r.line()


def test_total_loss_is_weighted_sum_of_parts():
    rng = np.random.default_rng(0)
    s = 4
    score = Tensor(rng.uniform(0.1, 0.9, (2, 1, s, s)))
    offset = Tensor(rng.uniform(0.1, 0.9, (2, 2, s, s)))
    size = Tensor(rng.uniform(0.1, 0.9, (2, 2, s, s)))
    gts = [BBox(0.3, 0.4, 0.2, 0.3), BBox(0.6, 0.7, 0.25, 0.2)]
    loss, parts = total_loss(score, offset, size, gts)
    assert parts["total"] == pytest.approx(parts["cls"] + 2 * parts["iou"] + 5 * parts["l1"], rel=1e-6)
    assert loss.item() == parts["total"]
