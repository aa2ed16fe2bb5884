import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cycletrack.config import ConfigError, SceneConfig
from cycletrack.scenes import (
    FrameRangeError,
    crop_patch,
    export_sequence,
    generate_sequence,
    jitter_box,
    sample_palindrome,
)


def small_cfg(**kw):
    base = dict(image_size=96, n_frames=6, n_distractors=3,
                min_target_size=14.0, max_target_size=30.0)
    base.update(kw)
    return SceneConfig(**base)


def check_invariants(seq, cfg):
    size = cfg.image_size
    assert len(seq.frames) >= 4
    for t, box in enumerate(seq.gt_boxes):
        assert 0 < box[0] < box[2] < size
        assert 0 < box[1] < box[3] < size
        assert (box[2] - box[0]) * (box[3] - box[1]) >= 4.0
        assert seq.frames[t].shape == (3, size, size)
        assert seq.frames[t].min() >= 0.0 and seq.frames[t].max() <= 1.0


def test_zero_motion_zero_scale_keeps_box_fixed():
    cfg = small_cfg(max_speed=0.0, max_scale_step=0.0)
    seq = generate_sequence(cfg, seed=7)
    for box in seq.gt_boxes[1:]:
        assert np.array_equal(box, seq.gt_boxes[0])


def test_same_seed_bit_identical():
    cfg = small_cfg()
    a = generate_sequence(cfg, seed=3)
    b = generate_sequence(cfg, seed=3)
    assert np.array_equal(a.gt_boxes, b.gt_boxes)
    for fa, fb in zip(a.frames, b.frames):
        assert np.array_equal(fa, fb)


def test_invariant_sweep_200_sequences():
    cfg = small_cfg(n_frames=5, n_distractors=2)
    for seed in range(200):
        check_invariants(generate_sequence(cfg, seed), cfg)


def test_infeasible_scene_rejected():
    with pytest.raises(ConfigError):
        generate_sequence(small_cfg(max_target_size=200.0), seed=0)


# ---------------------------------------------------------------------------
# palindrome sampling


def test_palindrome_order_three_search_frames():
    seq = generate_sequence(small_cfg(n_frames=6), seed=1)
    sample = sample_palindrome(seq, n_search=3, gap=1, seed=0)
    assert sample.search_indices == [1, 2, 3, 2, 1]


def test_palindrome_single_search_frame():
    seq = generate_sequence(small_cfg(n_frames=4), seed=2)
    sample = sample_palindrome(seq, n_search=1, gap=1, seed=0)
    assert sample.search_indices == [1]


def test_palindrome_gap_arithmetic():
    seq = generate_sequence(small_cfg(n_frames=20), seed=3)
    sample = sample_palindrome(seq, n_search=3, gap=5, seed=0)
    assert sorted(set([0] + sample.search_indices)) == [0, 5, 10, 15]


def test_palindrome_symmetry_property():
    seq = generate_sequence(small_cfg(n_frames=14), seed=4)
    for n in (2, 3, 4):
        idx = sample_palindrome(seq, n_search=n, gap=2, seed=0).search_indices
        first = idx[:n]
        second = idx[n:]
        assert second == first[:-1][::-1]


def test_palindrome_insufficient_frames():
    seq = generate_sequence(small_cfg(n_frames=5), seed=5)
    with pytest.raises(FrameRangeError):
        sample_palindrome(seq, n_search=3, gap=2, seed=0)


def test_palindrome_gt_never_equals_pseudo_under_jitter():
    seq = generate_sequence(small_cfg(n_frames=6), seed=6)
    sample = sample_palindrome(seq, n_search=3, gap=1, seed=9, jitter_level=0.5)
    assert not np.allclose(sample.pseudo_label.box, seq.gt_boxes[0])
    assert np.array_equal(sample.gt_boxes[0], seq.gt_boxes[0])


# ---------------------------------------------------------------------------
# cropping


def test_crop_exact_subimage_when_aligned():
    frame = np.random.default_rng(0).uniform(0, 1, (3, 64, 64))
    patch = crop_patch(frame, center=(32.0, 32.0), size=16, scale_context=16.0)
    assert np.allclose(patch.image, frame[:, 24:40, 24:40], atol=1e-12)


def test_crop_at_corner_pads_with_channel_mean():
    frame = np.random.default_rng(1).uniform(0, 1, (3, 40, 40))
    patch = crop_patch(frame, center=(0.0, 0.0), size=20, scale_context=20.0)
    mean = frame.mean(axis=(1, 2))
    # everything strictly left/above the frame is mean-padded
    assert np.allclose(patch.image[:, :9, :9], mean[:, None, None])


def test_crop_affine_round_trip():
    frame = np.zeros((3, 50, 50))
    patch = crop_patch(frame, center=(21.3, 17.9), size=32, scale_context=43.7)
    box = np.array([3.2, 4.1, 19.8, 25.6])
    back = patch.box_to_frame(patch.box_to_patch(box))
    assert np.max(np.abs(back - box)) <= 1e-9


@given(st.floats(-10, 60), st.floats(-10, 60), st.floats(8, 80))
@settings(max_examples=50, deadline=None)
def test_crop_round_trip_property(cx, cy, side):
    frame = np.zeros((3, 50, 50))
    patch = crop_patch(frame, center=(cx, cy), size=24, scale_context=side)
    box = np.array([1.0, 2.0, 11.0, 12.0])
    back = patch.box_to_frame(patch.box_to_patch(box))
    assert np.max(np.abs(back - box)) <= 1e-9


# ---------------------------------------------------------------------------
# jitter


def test_jitter_level_zero_returns_box_unchanged():
    box = np.array([10.0, 12.0, 30.0, 26.0])
    assert np.array_equal(jitter_box(box, 0.0, seed=5), box)


def test_jitter_deterministic_and_bounded():
    box = np.array([20.0, 20.0, 40.0, 44.0])
    a = jitter_box(box, 1.0, seed=11)
    b = jitter_box(box, 1.0, seed=11)
    assert np.array_equal(a, b)
    # recover the draws: |center shift| < 0.5*size, size ratio in (0.5, 1.5)
    w, h = 20.0, 24.0
    assert abs(((a[0] + a[2]) / 2) - 30.0) < 0.5 * w
    assert abs(((a[1] + a[3]) / 2) - 32.0) < 0.5 * h
    assert 0.5 * w < a[2] - a[0] < 1.5 * w
    assert 0.5 * h < a[3] - a[1] < 1.5 * h
    assert a[2] > a[0] and a[3] > a[1]


def test_jitter_monte_carlo_mean_near_zero():
    box = np.array([40.0, 40.0, 60.0, 60.0])
    shifts = []
    for seed in range(10_000):
        jb = jitter_box(box, 1.0, seed=seed)
        shifts.append(((jb[0] + jb[2]) / 2 - 50.0) / 20.0)  # sigma_1 draw
    assert abs(np.mean(shifts)) <= 0.01


def test_jitter_respects_bounds():
    box = np.array([1.0, 1.0, 20.0, 20.0])
    for seed in range(50):
        jb = jitter_box(box, 1.0, seed=seed, bounds=(32.0, 32.0))
        assert jb[0] >= 0 and jb[1] >= 0 and jb[2] <= 32 and jb[3] <= 32
        assert jb[2] - jb[0] >= 2.0 and jb[3] - jb[1] >= 2.0


# ---------------------------------------------------------------------------
# export


def test_export_ppm_and_boxes(tmp_path):
    seq = generate_sequence(small_cfg(n_frames=4, image_size=48), seed=8)
    export_sequence(seq, tmp_path)
    ppms = sorted(tmp_path.glob("frame_*.ppm"))
    assert len(ppms) == 4
    raw = ppms[0].read_bytes()
    assert raw.startswith(b"P6\n48 48\n255\n")
    assert len(raw) == len(b"P6\n48 48\n255\n") + 48 * 48 * 3

    lines = (tmp_path / "boxes.txt").read_text().strip().split("\n")
    assert len(lines) == 4
    parts = lines[2].split(" ")
    assert parts[0] == "2"
    for p, ref in zip(parts[1:], seq.gt_boxes[2]):
        assert float(p) == pytest.approx(ref, abs=0.005 + 1e-9)
        assert len(p.split(".")[1]) == 2
