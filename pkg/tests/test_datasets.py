import logging

import numpy as np
import pytest
import torch

from hybrid_depth.datasets import (
    DatasetError,
    SyntheticSceneConfig,
    TextureSpec,
    generate_synthetic_scene,
    load_eval_pairs,
    load_sequence_dataset,
    save_depth,
    translating_path,
    write_sequence,
    write_synthetic_dataset,
)
from hybrid_depth.geometry import CameraIntrinsics, Pose6DoF, inverse_warp


def _frames(n, h=16, w=20, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.random((3, h, w)) for _ in range(n)]


@pytest.fixture
def five_frame_root(tmp_path):
    K = CameraIntrinsics(20.0, 20.0, 9.5, 7.5, 20, 16)
    write_sequence(tmp_path, "seq_00", _frames(5), K, depths=[np.full((16, 20), 5.0)] * 5)
    return tmp_path


def test_five_frames_stride_one_gives_three_samples(five_frame_root, caplog):
    with caplog.at_level(logging.WARNING):
        ds = load_sequence_dataset(five_frame_root)
    assert [s.name for s in ds] == ["seq_00/000001", "seq_00/000002", "seq_00/000003"]
    assert sum("skipping" in r.message for r in caplog.records) == 2


def test_stride_two(five_frame_root):
    ds = load_sequence_dataset(five_frame_root, frame_stride=2)
    assert [s.name for s in ds] == ["seq_00/000002"]


def test_empty_split_is_empty(five_frame_root):
    assert list(load_sequence_dataset(five_frame_root, split=[])) == []


def test_split_file(five_frame_root, tmp_path):
    split = tmp_path / "split.txt"
    split.write_text("seq_00/000002.png\n\nseq_00/000003.png\n")
    ds = load_sequence_dataset(five_frame_root, split=split)
    assert len(ds) == 2


def test_missing_intrinsics_is_hard_error(five_frame_root):
    (five_frame_root / "seq_00" / "intrinsics.txt").unlink()
    with pytest.raises(DatasetError, match="intrinsics"):
        load_sequence_dataset(five_frame_root, split=["seq_00/000002.png"])


def test_unreadable_image_names_file(five_frame_root):
    bad = five_frame_root / "seq_00" / "000002.png"
    bad.write_bytes(b"not a png")
    ds = load_sequence_dataset(five_frame_root)
    with pytest.raises(DatasetError, match="000002.png"):
        ds[0]


def test_loaded_images_normalized(five_frame_root):
    sample = next(iter(load_sequence_dataset(five_frame_root)))
    for img in [sample.target, *sample.sources]:
        assert img.dtype == np.float32
        assert img.min() >= 0.0 and img.max() <= 1.0
    assert sample.gt_depth.shape == (16, 20)


def test_resize_scales_intrinsics(five_frame_root):
    sample = load_sequence_dataset(five_frame_root, image_size=(8, 10))[0]
    assert sample.target.shape == (3, 8, 10)
    K = sample.intrinsics
    assert (K.width, K.height) == (10, 8)
    assert K.fx == pytest.approx(10.0)
    # pixel-center convention keeps the image center fixed
    assert K.cx == pytest.approx((10 - 1) / 2)


def test_eval_pairs(tmp_path):
    pred, gt = tmp_path / "pred", tmp_path / "gt"
    pred.mkdir()
    gt.mkdir()
    for i in range(3):
        save_depth(pred / f"{i}.npz", np.full((4, 4), 1.0 + i))
        save_depth(gt / f"{i}.npz", np.full((4, 4), 2.0))
    pairs = load_eval_pairs(pred, gt)
    assert len(pairs) == 3
    assert pairs[1].pred[0, 0] == 2.0

    save_depth(pred / "extra.npz", np.ones((4, 4)))
    with pytest.raises(DatasetError, match="extra.npz"):
        load_eval_pairs(pred, gt)
    (pred / "extra.npz").unlink()

    save_depth(gt / "2.npz", np.ones((5, 4)))
    with pytest.raises(DatasetError, match="shape"):
        load_eval_pairs(pred, gt)


def test_depth_file_requires_meter_unit(tmp_path):
    np.savez(tmp_path / "d.npz", depth=np.ones((2, 2)))
    from hybrid_depth.datasets import load_depth

    with pytest.raises(DatasetError, match="unit"):
        load_depth(tmp_path / "d.npz")


# --------------------------------------------------------------- synthetic


def test_static_plane_frames_identical_and_depth_constant():
    cfg = SyntheticSceneConfig(camera_path=translating_path(3, (0, 0, 0)), plane_depth=10.0, image_size=(32, 48))
    samples, gt = generate_synthetic_scene(cfg, seed=0)
    assert all(np.array_equal(gt.frames[0], f) for f in gt.frames)
    assert all(np.all(d == 10.0) for d in gt.depths)
    assert samples[0].gt_relative_poses[0].as_vector() == pytest.approx(np.zeros(6))


def test_generation_is_deterministic():
    cfg = SyntheticSceneConfig(layout="boxes_on_ground", texture=TextureSpec("noise", 1.5), image_size=(32, 48),
                               camera_path=translating_path(3, (0.1, 0, 0.2)))
    _, a = generate_synthetic_scene(cfg, seed=4)
    _, b = generate_synthetic_scene(cfg, seed=4)
    _, c = generate_synthetic_scene(cfg, seed=5)
    assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))
    assert not np.array_equal(a.frames[0], c.frames[0])


def _plane_homography_warp(src, K, depth, t):
    """Oracle: a fronto-parallel plane under pure translation t maps pixel u to u + fx*tx/Z (rows likewise)."""
    h, w = src.shape[1:]
    shift_x = K.fx * t[0] / (depth + t[2])
    scale = depth / (depth + t[2])
    v, u = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    us = (u - K.cx) * scale + K.cx + shift_x
    vs = (v - K.cy) * scale + K.cy + K.fy * t[1] / (depth + t[2])
    from scipy.ndimage import map_coordinates

    out = np.stack([map_coordinates(ch, [vs, us], order=1, mode="nearest") for ch in src])
    valid = (us >= 0) & (us <= w - 1) & (vs >= 0) & (vs <= h - 1)
    return out, valid


@pytest.mark.parametrize("texture", ["checker", "noise", "stripes"])
def test_translating_plane_reconstructs_target(texture):
    cfg = SyntheticSceneConfig(texture=TextureSpec(texture, 0.5), camera_path=translating_path(3, (0.1, 0, 0)),
                               plane_depth=10.0, image_size=(48, 64))
    samples, gt = generate_synthetic_scene(cfg, seed=0, dtype=np.float64)
    s = samples[0]
    for src, pose in zip(s.sources, s.gt_relative_poses):
        t = pose.translation
        oracle, oracle_valid = _plane_homography_warp(src, s.intrinsics, 10.0, t)
        res = inverse_warp(torch.from_numpy(src)[None], torch.from_numpy(s.gt_depth)[None, None],
                           torch.from_numpy(pose.as_vector())[None], s.intrinsics)
        mask = res.valid_mask[0, 0].numpy() > 0
        assert np.array_equal(mask, oracle_valid)
        assert np.abs(res.warped[0].numpy() - oracle)[:, mask].max() < 1e-9
        assert np.abs(res.warped[0].numpy() - s.target).mean(0)[mask].mean() < 0.02


def test_boxes_scene_reconstruction():
    cfg = SyntheticSceneConfig(layout="boxes_on_ground", texture=TextureSpec("noise", 1.0), image_size=(48, 64),
                               camera_path=translating_path(3, (0.05, 0, 0.3)))
    samples, _ = generate_synthetic_scene(cfg, seed=2, dtype=np.float64)
    s = samples[0]
    for src, pose in zip(s.sources, s.gt_relative_poses):
        res = inverse_warp(torch.from_numpy(src)[None], torch.from_numpy(s.gt_depth)[None, None],
                           torch.from_numpy(pose.as_vector())[None], s.intrinsics)
        mask = res.valid_mask[0, 0].numpy() > 0
        assert np.abs(res.warped[0].numpy() - s.target).mean(0)[mask].mean() < 0.02


def test_camera_inside_geometry_rejected():
    cfg = SyntheticSceneConfig(camera_path=translating_path(3, (0, 0, 6.0)), plane_depth=10.0)
    with pytest.raises(ValueError, match="behind"):
        generate_synthetic_scene(cfg)


def test_config_invariants():
    with pytest.raises(ValueError):
        SyntheticSceneConfig(depth_range=(0.0, 10.0))
    with pytest.raises(ValueError):
        SyntheticSceneConfig(camera_path=translating_path(2, (0, 0, 0)))


def test_written_synthetic_dataset_round_trip(tmp_path):
    cfg = SyntheticSceneConfig(texture=TextureSpec("noise", 1.0), image_size=(32, 48),
                               camera_path=translating_path(4, (0.1, 0, 0)))
    write_synthetic_dataset(tmp_path, cfg, seed=0)
    ds = load_sequence_dataset(tmp_path)
    assert len(ds) == 2
    s = ds[0]
    assert np.all(s.gt_depth == 10.0)
    assert s.gt_relative_poses[1].translation == pytest.approx([-0.1, 0, 0])
    pose = Pose6DoF.from_vector(np.r_[0, 0, 0, 0.1, 0, 0])
    assert s.gt_relative_poses[0].as_vector() == pytest.approx(pose.as_vector())
