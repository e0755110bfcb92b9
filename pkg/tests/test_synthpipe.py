import numpy as np
import pytest
import torch

from dessie.body_model import landmarks_3d, pose_mesh
from dessie.camera import project
from dessie.evaluation import iou
from dessie.synthpipe import (
    FACTORS, AssetSets, Factor, SampleConfig, ShapeSampler, epoch_stream, flatten_items, item_rng, items_for_images,
    load_dataset, load_pose_library, pair_schedule, regenerate, sample_pair, sample_shape, sample_single,
    save_pose_library, write_dataset,
)


def test_shape_sampler_degenerate_and_clipped(rng):
    assert np.all(sample_shape(rng, ShapeSampler(std=0.0)) == 0)
    draws = np.stack([sample_shape(rng, ShapeSampler(std=1.0, clip=2.0)) for _ in range(2000)])
    assert np.abs(draws).max() <= 2.0


def test_shape_sampler_mean_near_zero():
    rng = np.random.default_rng(5)
    draws = np.stack([sample_shape(rng, ShapeSampler(std=1.0, clip=10.0)) for _ in range(10_000)])
    assert np.all(np.abs(draws.mean(0)) < 0.05)


def test_asset_sets_validation(sets):
    with pytest.raises(ValueError):
        AssetSets(sets.textures[:1], sets.poses, sets.backgrounds).validate()
    with pytest.raises(ValueError):
        AssetSets([(9, sets.textures[0][1])] * 2, sets.poses, sets.backgrounds).validate()


def test_stand_in_sets_sizes():
    full = AssetSets.stand_in(0)
    assert len(full.textures) == 80 and len(full.poses) == 40
    assert len({sid for sid, _ in full.textures}) == 8
    assert len({p.label for p in full.poses}) == 8
    small = AssetSets.stand_in(0, n_poses=3, n_textures=8)
    assert len(small.poses) == 3 and len({sid for sid, _ in small.textures}) == 8


def test_single_sample_is_deterministic(sets, assets):
    a = sample_single(item_rng(3, 0), sets, assets)
    b = sample_single(item_rng(3, 0), sets, assets)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.annotation() == b.annotation()


def test_single_sample_annotations_consistent(sets, assets):
    s = sample_single(item_rng(4, 1), sets, assets)
    v = pose_mesh(assets, s.state())
    kp = project(landmarks_3d(assets, v), s.camera).numpy()
    vis = s.visibility > 0
    assert np.array_equal(kp[vis], s.keypoints_gt[vis])
    assert np.all((s.keypoints_gt[vis] >= 0) & (s.keypoints_gt[vis] < 256))
    assert s.silhouette_gt.any()
    np.testing.assert_array_equal(s.xi_gt, [s.cam[1], s.cam[2], 2 * 5000 / (256 * s.cam[0])])
    again = regenerate(s, sets, assets)
    assert iou(again.silhouette_gt, s.silhouette_gt) == 1.0


def test_camera_ranges(sets, assets):
    cfg = SampleConfig()
    for i in range(5):
        s = sample_single(item_rng(11, i), sets, assets)
        assert cfg.s_range[0] <= s.cam[0] <= cfg.s_range[1]
        assert abs(s.cam[1]) <= cfg.t_range and abs(s.cam[2]) <= cfg.t_range
        assert 0 <= s.yaw < 2 * np.pi


def _fields_differ(a, b):
    return {
        "texture": a.texture_id != b.texture_id,
        "beta": not np.array_equal(a.beta_gt, b.beta_gt),
        "pose": a.pose_id != b.pose_id,
        "theta_J": not np.array_equal(a.theta_J_gt, b.theta_J_gt),
        "theta_G": not np.array_equal(a.theta_G_gt, b.theta_G_gt),
        "background": a.background_id != b.background_id,
        "camera": a.cam != b.cam,
    }


@pytest.mark.parametrize("factor,expected", [
    (Factor.APPEARANCE, {"texture", "beta"}),
    (Factor.POSE, {"pose", "theta_J"}),
    (Factor.GLOBAL_ROTATION, {"theta_G"}),
])
def test_pair_varies_exactly_one_factor(sets, assets, factor, expected):
    for seed in range(3):
        p = sample_pair(item_rng(seed, 9), sets, assets, factor)
        diff = {k for k, v in _fields_differ(p.first, p.second).items() if v}
        assert diff == expected
        assert p.varied_factor is factor


@pytest.mark.parametrize("mode,expected", [("texture", {"texture"}), ("shape", {"beta"})])
def test_appearance_sub_modes(sets, assets, mode, expected):
    p = sample_pair(item_rng(2, 2), sets, assets, Factor.APPEARANCE, SampleConfig(appearance_mode=mode))
    assert {k for k, v in _fields_differ(p.first, p.second).items() if v} == expected


def test_pair_schedule_counts():
    sched = pair_schedule(items_for_images(64, 0.5), 0.5)
    n_pairs = sum(1 for s in sched if s >= 0)
    assert n_pairs == 16 and len(sched) - n_pairs + 2 * n_pairs == 64
    assert pair_schedule(999, 1.0) == list(range(999))
    hist = np.bincount([k % 3 for k in pair_schedule(999, 1.0)])
    assert hist.tolist() == [333, 333, 333]


def test_epoch_stream_count_and_worker_independence(sets, assets):
    a = list(epoch_stream(8, 12, 0.5, sets, assets, workers=1))
    b = list(epoch_stream(8, 12, 0.5, sets, assets, workers=4))
    assert len(a) == 12
    ia, pa = flatten_items(a)
    ib, pb = flatten_items(b)
    assert pa == pb
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(ia, ib))


def test_epoch_stream_rejects_empty(sets, assets):
    with pytest.raises(ValueError):
        list(epoch_stream(0, 0, 0.5, sets, assets))


def test_dataset_round_trip(tmp_path, sets, assets):
    items = list(epoch_stream(2, 5, 0.5, sets, assets))
    info = write_dataset(items, tmp_path / "ds")
    images, pairs = flatten_items(items)
    assert info["images"] == len(images) and info["pairs"] == len(pairs)
    loaded, lpairs = load_dataset(tmp_path / "ds")
    assert lpairs == pairs
    for rec, s in zip(loaded, images):
        syn = rec.synthetic()
        np.testing.assert_array_equal(syn.keypoints_gt, s.keypoints_gt)
        np.testing.assert_array_equal(syn.beta_gt, s.beta_gt)
        np.testing.assert_array_equal(syn.theta_G_gt, s.theta_G_gt)
        np.testing.assert_array_equal(rec.silhouette_gt, s.silhouette_gt)
        assert syn.factor_ids == s.factor_ids


def test_dataset_bad_pairs_index(tmp_path, sets, assets):
    write_dataset(list(epoch_stream(2, 2, 0.0, sets, assets)), tmp_path / "ds")
    (tmp_path / "ds" / "pairs.index").write_text("000000 000099 POSE\n")
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "ds")


def test_pose_library_round_trip(tmp_path, sets):
    path = save_pose_library(sets.poses, tmp_path / "poses.npz")
    back = load_pose_library(path)
    assert [p.label for p in back] == [p.label for p in sets.poses]
    for p, q in zip(back, sets.poses):
        np.testing.assert_array_equal(p.theta_J, q.theta_J)
