import numpy as np
import pytest
import torch

from aslrec.data import (AugmentConfig, AugmentParams, ClipAnnotation, SyntheticDatasetSpec, VideoDataset,
                         aggregate_box, apply_augmentations, crop_and_resize, generate_synthetic_dataset,
                         legal_window_starts, make_training_clip, mixup_distractor, pad_front,
                         periodic_texture, photometric_augment, random_erase, read_manifest,
                         sample_augment_params, sample_training_window, shift_periodic, square_box,
                         window_overlap_ratio, write_manifest, write_synthetic_dataset)


def annotation(start, end, frames, box=(0, 0, 16, 16), label=0):
    return ClipAnnotation(f"clip_{start}_{end}", label, start, end, np.tile(box, (frames, 1)))


# ------------------------------------------------------------------ windows

def enumerate_legal(gt, length, n_frames, min_ratio):
    """Oracle: try every start and keep those meeting the overlap rule."""
    legal = []
    for s in range(0, n_frames - length + 1):
        inter = max(0, min(gt[1], s + length) - max(gt[0], s))
        if inter / min(gt[1] - gt[0], length) >= min_ratio:
            legal.append(s)
    return legal


def test_overlap_ratio_uses_shorter_interval():
    assert window_overlap_ratio((0, 8), (0, 16)) == 1.0
    assert window_overlap_ratio((0, 16), (7, 23)) == pytest.approx(9 / 16)
    assert window_overlap_ratio((0, 16), (6, 22)) == pytest.approx(10 / 16)


def test_legal_offsets_for_full_length_segment():
    # segment [20, 36) in a 60-frame video: offsets -6..6 around the segment start are legal
    ann = annotation(20, 36, 60)
    starts = legal_window_starts(ann, 16, 0.6)
    assert starts.tolist() == list(range(14, 27))
    assert starts.tolist() == enumerate_legal((20, 36), 16, 60, 0.6)


def test_legal_offsets_clipped_to_video():
    ann = annotation(0, 16, 30)
    assert legal_window_starts(ann, 16, 0.6).tolist() == list(range(0, 7))


def test_short_segment_inside_window_is_legal():
    ann = annotation(4, 12, 24)
    starts = legal_window_starts(ann, 16, 0.6)
    assert set(range(0, 5)) <= set(starts.tolist())
    assert starts.tolist() == enumerate_legal((4, 12), 16, 24, 0.6)


def test_window_oracle_random():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(16, 40))
        a = int(rng.integers(0, n - 1))
        b = int(rng.integers(a + 1, n + 1))
        ann = annotation(a, b, n)
        assert legal_window_starts(ann, 16, 0.6).tolist() == enumerate_legal((a, b), 16, n, 0.6)


def test_window_sampling_is_seeded():
    ann = annotation(20, 36, 60)
    a = [sample_training_window(ann, 16, 0.6, np.random.default_rng(5)) for _ in range(3)]
    assert a[0] == a[1] == a[2]
    s, e = a[0]
    assert e - s == 16 and 14 <= s <= 26


def test_window_requires_padding():
    with pytest.raises(ValueError, match="pad"):
        sample_training_window(annotation(0, 5, 10), 16)


def test_pad_front_duplicates_first_frame():
    video = np.arange(5, dtype=np.float32).reshape(5, 1, 1, 1) * np.ones((5, 2, 2, 3), np.float32)
    padded, ann = pad_front(video, annotation(0, 5, 5), 16)
    assert len(padded) == 16 and ann.num_frames == 16
    assert (ann.start, ann.end) == (11, 16)
    assert np.all(padded[:12] == 0.0)
    assert np.array_equal(padded[11:], video)


# ------------------------------------------------------------------ cropping

def test_max_box_of_two_boxes():
    boxes = np.array([(0, 0, 10, 10), (5, 5, 20, 20)], dtype=float)
    assert aggregate_box(boxes, "max").tolist() == [0, 0, 20, 20]
    assert aggregate_box(boxes, "mean").tolist() == [2.5, 2.5, 15, 15]


def test_identical_boxes_give_identical_crops():
    frames = np.random.default_rng(0).uniform(size=(3, 40, 40, 3)).astype(np.float32)
    boxes = np.tile([4, 6, 30, 28], (3, 1))
    assert np.array_equal(crop_and_resize(frames, boxes, "max", 24), crop_and_resize(frames, boxes, "mean", 24))


def test_max_crop_content_matches_union_box():
    frames = np.random.default_rng(1).uniform(size=(2, 32, 32, 3)).astype(np.float32)
    boxes = np.array([(0, 0, 10, 10), (5, 5, 20, 20)], dtype=float)
    crop = crop_and_resize(frames, boxes, "max", 20)
    assert np.array_equal(crop, frames[:, 0:20, 0:20])


def test_full_frame_box_is_plain_resize():
    frames = np.random.default_rng(2).uniform(size=(2, 32, 32, 3)).astype(np.float32)
    full = crop_and_resize(frames, np.tile([0, 0, 32, 32], (2, 1)), "max", 32)
    assert np.array_equal(full, frames)
    ref = torch.nn.functional.interpolate(torch.from_numpy(frames).permute(0, 3, 1, 2), size=(16, 16),
                                          mode="bilinear", align_corners=False).permute(0, 2, 3, 1).numpy()
    assert np.allclose(crop_and_resize(frames, np.tile([0, 0, 32, 32], (2, 1)), "max", 16), ref)


def test_box_outside_frame_is_zero_filled():
    frames = np.ones((1, 10, 10, 3), np.float32)
    crop = crop_and_resize(frames, np.array([[-5, 0, 5, 10]]), "max", 10)
    assert np.all(crop[:, :, :5] == 0) and np.all(crop[:, :, 5:] == 1)


def test_square_box_grows_short_side():
    assert square_box(np.array([0, 0, 10, 4])).tolist() == [0, -3, 10, 7]


def test_degenerate_box_rejected():
    with pytest.raises(ValueError, match="degenerate"):
        crop_and_resize(np.zeros((1, 8, 8, 3), np.float32), np.array([[2, 2, 2, 6]]))


# ------------------------------------------------------------------ augmentation

def test_photometric_zero_is_identity():
    clip = np.random.default_rng(0).uniform(size=(4, 8, 8, 3)).astype(np.float32)
    assert np.allclose(photometric_augment(clip, AugmentParams()), clip)


def test_brightness_is_additive():
    clip = np.full((3, 4, 4, 3), 0.5, np.float32)
    out = photometric_augment(clip, AugmentParams(brightness=0.1))
    assert np.allclose(out, 0.6)


def test_photometric_same_mapping_per_frame():
    rng = np.random.default_rng(3)
    frame = rng.uniform(size=(8, 8, 3)).astype(np.float32)
    clip = np.stack([frame, frame, frame])
    params = AugmentParams(brightness=0.1, contrast=-0.2, saturation=0.3, hue=0.04)
    out = photometric_augment(clip, params)
    assert np.array_equal(out[0], out[2])


def test_hue_rotation_preserves_gray():
    clip = np.full((1, 2, 2, 3), 0.4, np.float32)
    assert np.allclose(photometric_augment(clip, AugmentParams(hue=0.2)), 0.4, atol=1e-5)


def test_erase_disabled_is_identity():
    clip = np.random.default_rng(0).uniform(size=(2, 6, 6, 3)).astype(np.float32)
    assert random_erase(clip, AugmentParams()) is clip


def test_erase_whole_frame():
    clip = np.zeros((3, 6, 6, 3), np.float32)
    fill = np.random.default_rng(0).uniform(size=(6, 6, 3)).astype(np.float32)
    out = random_erase(clip, AugmentParams(erase_rect=(0, 0, 6, 6), erase_fill=fill))
    assert all(np.array_equal(out[t], fill) for t in range(3))


def test_erase_rect_seeded_and_shared_across_frames():
    a = sample_augment_params(32, 32, np.random.default_rng(9), AugmentConfig(erase_prob=1.0))
    b = sample_augment_params(32, 32, np.random.default_rng(9), AugmentConfig(erase_prob=1.0))
    assert a.erase_rect == b.erase_rect
    out = random_erase(np.zeros((4, 32, 32, 3), np.float32), a)
    assert all(np.array_equal(out[0], out[t]) for t in range(4))


def test_mixup_values():
    clip = np.zeros((2, 4, 4, 3), np.float32)
    assert mixup_distractor(clip, np.ones((4, 4, 3)), 0.0) is clip
    assert np.allclose(mixup_distractor(clip, np.ones((4, 4, 3)), 0.4), 0.4)


def test_mixup_rejects_bad_weight():
    with pytest.raises(ValueError):
        mixup_distractor(np.zeros((1, 2, 2, 3), np.float32), np.ones((2, 2, 3)), 1.5)


def test_augmentation_keeps_range_and_label(rng):
    ds = VideoDataset.from_spec(SyntheticDatasetSpec(num_classes=3, clips_per_class=2, seed=4))
    clips, labels = ds.training_batch([0, 1, 2], 8, 32, rng, AugmentConfig(erase_prob=1, mixup_prob=1))
    assert labels.tolist() == [a.label for a in ds.annotations[:3]]
    assert clips.shape == (3, 3, 8, 32, 32)
    assert clips.min() >= 0 and clips.max() <= 1


def test_apply_augmentations_order():
    clip = np.full((1, 4, 4, 3), 0.5, np.float32)
    params = AugmentParams(brightness=0.1, mixup_weight=0.5, distractor=np.zeros((4, 4, 3), np.float32))
    assert np.allclose(apply_augmentations(clip, params), 0.3)


def test_training_clip_is_seeded():
    ds = VideoDataset.from_spec(SyntheticDatasetSpec(num_classes=2, clips_per_class=1, seed=1))
    a = make_training_clip(ds.video(0), ds.annotations[0], 8, 32, np.random.default_rng(0), AugmentConfig())
    b = make_training_clip(ds.video(0), ds.annotations[0], 8, 32, np.random.default_rng(0), AugmentConfig())
    assert torch.equal(a, b)


# ------------------------------------------------------------------ synthetic dataset

def test_periodic_texture_tiles():
    tex = periodic_texture(32, 4.0, np.random.default_rng(0))
    assert tex.min() == 0.0 and tex.max() == pytest.approx(1.0)
    assert np.allclose(shift_periodic(tex, 32, -32), tex, atol=1e-9)
    assert np.allclose(shift_periodic(tex, 3, 5), np.roll(tex, (3, 5), axis=(0, 1)), atol=1e-9)


def test_synthetic_counts_and_balance():
    videos, anns = generate_synthetic_dataset(SyntheticDatasetSpec(clips_per_class=20))
    assert len(videos) == len(anns) == 200
    assert np.bincount([a.label for a in anns]).tolist() == [20] * 10
    for v, a in zip(videos, anns):
        assert v.dtype == np.uint8 and v.shape[1:] == (72, 72, 3)
        assert a.num_frames == len(v) and 0 <= a.start < a.end <= len(v)


def test_synthetic_is_deterministic():
    spec = SyntheticDatasetSpec(num_classes=3, clips_per_class=2, seed=7)
    a, _ = generate_synthetic_dataset(spec)
    b, _ = generate_synthetic_dataset(spec)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_synthetic_disk_pattern_renders():
    videos, anns = generate_synthetic_dataset(SyntheticDatasetSpec(num_classes=2, clips_per_class=1,
                                                                   pattern="disk"))
    assert len(videos) == 2


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticDatasetSpec(pattern="stripes")
    with pytest.raises(ValueError, match="colour"):
        SyntheticDatasetSpec.from_dict({"colour": 1})


def test_synthetic_round_trip_on_disk(tmp_path):
    spec = SyntheticDatasetSpec(num_classes=2, clips_per_class=2, seed=3)
    manifest = write_synthetic_dataset(spec, tmp_path)
    anns, meta = read_manifest(manifest)
    assert meta["synthetic_spec"] == spec.to_dict()
    ds = VideoDataset.from_manifest(manifest)
    ref = VideoDataset.from_spec(spec)
    assert len(ds) == 4
    assert all(np.array_equal(ds.video(i), ref.video(i)) for i in range(4))


def test_manifest_round_trip(tmp_path):
    anns = [annotation(2, 9, 12, label=1), annotation(0, 4, 5, label=0)]
    write_manifest(anns, tmp_path / "m.json")
    again, _ = read_manifest(tmp_path / "m.json")
    assert [a.to_record() for a in again] == [a.to_record() for a in anns]


def test_annotation_validation():
    with pytest.raises(ValueError, match="empty segment"):
        annotation(5, 5, 10)
    with pytest.raises(ValueError, match="outside"):
        annotation(0, 12, 10)
