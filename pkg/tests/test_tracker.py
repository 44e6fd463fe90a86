import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tatrack import tensor as T
from tatrack.backbone import BackboneConfig
from tatrack.errors import InputError
from tatrack.model import BBox, ModelConfig, TATrack
from tatrack.tracker import (CropSpec, TemplateSelector, Tracker, crop_and_resize, crop_window,
                             simulate_updates, track_sequences, write_results)

SPEC = CropSpec(template_side=8, search_side=16)


def brute_force_updates(scores, interval):
    """Reference: split into consecutive windows, first argmax of each complete window."""
    out = []
    for start in range(0, len(scores) - interval + 1, interval):
        window = list(scores[start:start + interval])
        out.append((start + interval - 1, start + window.index(max(window))))
    return out


def test_crop_window_geometry():
    x0, y0, side = crop_window((10, 20, 8, 18), 2.0)
    assert side == pytest.approx(math.sqrt(2 * 8 * 18))
    assert (x0 + side / 2, y0 + side / 2) == pytest.approx((14, 29))


def test_crop_rejects_degenerate_box():
    img = np.zeros((32, 32, 3), np.uint8)
    with pytest.raises(InputError):
        crop_and_resize((img, img), (4, 4, 0, 5), SPEC)
    with pytest.raises(InputError):
        CropSpec(area_factor_template=4.0, area_factor_search=2.0)


def test_resize_only_path_is_identity():
    img = np.random.default_rng(0).integers(0, 255, (16, 16, 3), dtype=np.uint8)
    (rgb, tir), info = crop_and_resize((img, img), (4, 4, 8, 8), SPEC, "search")
    assert (info.x0, info.y0, info.side, info.padded) == (0, 0, 16, False)
    np.testing.assert_array_equal(rgb, img)


def test_modalities_share_geometry():
    rng = np.random.default_rng(1)
    rgb = rng.integers(0, 255, (40, 50, 3), dtype=np.uint8)
    (a, b), _ = crop_and_resize((rgb, rgb.copy()), (12.3, 7.9, 9.5, 6.1), SPEC)
    np.testing.assert_array_equal(a, b)


def test_out_of_frame_area_is_mean_padded():
    rng = np.random.default_rng(2)
    rgb = rng.integers(0, 255, (30, 30, 3), dtype=np.uint8)
    (crop, _), info = crop_and_resize((rgb, rgb), (-20, -20, 6, 6), SPEC)
    assert info.padded
    np.testing.assert_allclose(crop[0, 0], rgb.reshape(-1, 3).mean(0), atol=0.5)


@given(st.floats(5, 60), st.floats(5, 60), st.floats(3, 20), st.floats(3, 20),
       st.floats(0.0, 1.0), st.floats(0.0, 1.0))
@settings(max_examples=100, deadline=None)
def test_crop_inverse_is_exact(x, y, w, h, u, v):
    img = np.zeros((80, 80, 3), np.uint8)
    _, info = crop_and_resize((img, img), (x, y, w, h), SPEC, "search")
    box = info.to_crop((x, y, w, h))
    np.testing.assert_allclose(info.to_image(box), (x, y, w, h), atol=1e-9)
    # an arbitrary point inside the crop maps out and back
    pt = BBox(u, v, 0.1, 0.1)
    back = info.to_crop(info.to_image(pt))
    np.testing.assert_allclose(back, pt, atol=1e-9)


def test_bright_pixel_lands_where_the_inverse_says():
    img = np.zeros((64, 64, 3), np.uint8)
    img[37, 21] = 255
    spec = CropSpec(template_side=16, search_side=32)
    (crop, _), info = crop_and_resize((img, img), (16, 28, 8, 8), spec, "search")
    iy, ix = np.unravel_index(np.argmax(crop[..., 0]), crop.shape[:2])
    s = info.out_side
    cx = info.to_image(BBox((ix + 0.5) / s, (iy + 0.5) / s, 1 / s, 1 / s))
    center = (cx[0] + cx[2] / 2, cx[1] + cx[3] / 2)
    assert abs(center[0] - 21.5) < 0.5 and abs(center[1] - 37.5) < 0.5


def test_ots_picks_max_of_interval():
    assert simulate_updates([0.3, 0.9, 0.5], 3) == [(2, 1)]
    assert simulate_updates(np.linspace(0, 1, 49), 50) == []
    assert simulate_updates(np.ones(10), None) == []


@given(st.lists(st.floats(0, 1), min_size=0, max_size=200), st.integers(1, 60))
@settings(max_examples=100, deadline=None)
def test_ots_matches_brute_force(scores, interval):
    assert simulate_updates(scores, interval) == brute_force_updates(scores, interval)


def test_interval_one_updates_every_frame():
    assert simulate_updates([0.1, 0.4, 0.2], 1) == [(0, 0), (1, 1), (2, 2)]


def test_selector_counter_bounds():
    sel = TemplateSelector(4)
    for t in range(9):
        sel.observe(0.5, t)
        assert 0 <= sel.frames_since_update <= 4
        sel.maybe_update()
        assert 0 <= sel.frames_since_update < 4


def _model(dual=True):
    bb = BackboneConfig.tiny()
    return TATrack(ModelConfig(bb, True, dual, (1,) if dual else ()), seed=0).eval()


class _Seq:
    def __init__(self, n=7, size=48, seed=0):
        rng = np.random.default_rng(seed)
        self.frames_ = [(rng.integers(0, 255, (size, size, 3), dtype=np.uint8),) * 2 for _ in range(n)]
        self.boxes = np.tile([18.0, 18.0, 8.0, 8.0], (n, 1))
        self.name = f"s{seed}"

    def __len__(self):
        return len(self.boxes)

    def frame(self, t):
        return self.frames_[t]


def test_init_and_contracts():
    tracker = Tracker(_model(), update_interval=3)
    seq = _Seq()
    state = tracker.init(seq.frame(0), seq.boxes[0])
    np.testing.assert_array_equal(state.online_template[0], state.initial_template[0])
    assert state.frames_since_update == 0 and state.update_interval == 3
    with pytest.raises(InputError):
        tracker.init(seq.frame(0), (1, 1, 0, 3))
    with pytest.raises(InputError):
        tracker.init(seq.frame(0), (100, 100, 5, 5))
    tracker.track_frame(state, seq.frame(1))
    small = np.zeros((20, 20, 3), np.uint8)
    with pytest.raises(InputError):
        tracker.track_frame(state, (small, small))


def test_search_follows_previous_prediction_and_confidence_is_score_max():
    model = _model()
    tracker = Tracker(model, update_interval=50)
    seq = _Seq()
    state = tracker.init(seq.frame(0), seq.boxes[0])
    prev = state.prev_box.copy()
    inp, info = tracker.prepare(state, seq.frame(1))
    x0, y0, side = crop_window(prev, tracker.spec.area_factor_search)
    assert (info.x0, info.y0) == pytest.approx((x0, y0))
    with T.no_grad():
        score, _, _ = model.dual_forward(
            tuple(a[None] for a in state.init_input), tuple(a[None] for a in state.online_input),
            tuple(a[None] for a in inp))
    box, conf = tracker.finish(state, seq.frame(1), tracker.forward(
        [state.init_input], [state.online_input], [inp])[0], info)
    assert conf == pytest.approx(float(score.data.max()))
    np.testing.assert_array_equal(state.prev_box, box)


def test_no_update_keeps_initial_template():
    tracker = Tracker(_model(), update_interval=None)
    seq = _Seq(n=12)
    res = track_sequences(tracker, [seq])[0]
    assert res.updates == []


def test_updates_happen_on_interval_and_batched_equals_sequential():
    seqs = [_Seq(n=9, seed=s) for s in range(3)]
    batched = track_sequences(Tracker(_model(), update_interval=4), seqs)
    assert batched[0].updates == [3, 7]
    for seq, res in zip(seqs, batched):
        tracker = Tracker(_model(), update_interval=4)
        state = tracker.init(seq.frame(0), seq.boxes[0])
        boxes = [tracker.track_frame(state, seq.frame(t))[0] for t in range(1, len(seq))]
        np.testing.assert_allclose(np.array(boxes), res.boxes[1:], atol=1e-4)


def test_result_files(tmp_path):
    res = track_sequences(Tracker(_model(dual=False)), [_Seq(n=4)])[0]
    write_results(tmp_path / "out" / "seq.txt", res)
    lines = (tmp_path / "out" / "seq.txt").read_text().splitlines()
    assert len(lines) == 4 and len(lines[0].split(",")) == 4
    assert len((tmp_path / "out" / "seq_confidence.txt").read_text().splitlines()) == 4
