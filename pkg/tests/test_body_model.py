import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from dessie.body_model import (
    NUM_BETAS, NUM_JOINTS, NUM_LANDMARKS, NUM_PARAMS, AssetError, PoseShapeState, assets_equal,
    forward_kinematics, landmarks_3d, load_assets, pose_mesh, rodrigues, save_assets,
)
from dessie.archive import load_archive, save_archive
from dessie.standin import make_stand_in_assets


def _series_expm(aa):
    """Truncated power series of exp([aa]x), independent of the closed form."""
    x, y, z = aa
    K = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=np.float64)
    out, term = np.eye(3), np.eye(3)
    for k in range(1, 60):
        term = term @ K / k
        out = out + term
    return out


def _rot_about(points, R, c):
    return (points - c) @ R.T + c


def test_constants():
    assert NUM_JOINTS == 36 and NUM_BETAS == 9 and NUM_LANDMARKS == 17
    assert NUM_PARAMS == 120


def test_rodrigues_identity_and_quarter_turn():
    assert torch.equal(rodrigues(torch.zeros(3, dtype=torch.float64)), torch.eye(3, dtype=torch.float64))
    R = rodrigues(torch.tensor([0.0, 0.0, math.pi / 2], dtype=torch.float64)).numpy()
    np.testing.assert_allclose(R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)


def test_rodrigues_matches_series_oracle(rng):
    for _ in range(100):
        aa = rng.normal(size=3) * rng.uniform(0, 3)
        R = rodrigues(torch.as_tensor(aa)).numpy()
        np.testing.assert_allclose(R, _series_expm(aa), atol=1e-9)
        np.testing.assert_allclose(R, expm(np.cross(np.eye(3), aa)), atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-6.0, 6.0), min_size=3, max_size=3))
def test_rodrigues_is_a_rotation(aa):
    R = rodrigues(torch.tensor(aa, dtype=torch.float64)).numpy()
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1) < 1e-9


def test_rodrigues_tiny_angles_are_smooth():
    aa = torch.tensor([1e-5, -2e-5, 3e-6], dtype=torch.float64, requires_grad=True)
    R = rodrigues(aa)
    np.testing.assert_allclose(R.detach().numpy(), _series_expm(aa.detach().numpy()), atol=1e-14)
    R.sum().backward()
    assert torch.isfinite(aa.grad).all()


def test_stand_in_is_deterministic_and_in_range():
    a, b = make_stand_in_assets(7), make_stand_in_assets(7)
    assert assets_equal(a, b)
    assert 300 <= a.num_vertices <= 1000
    a.validate()


@pytest.mark.parametrize("seed", [0, 3, 11])
def test_stand_in_shape_basis_orthogonal(seed):
    basis = make_stand_in_assets(seed).shape_basis.reshape(NUM_BETAS, -1)
    gram = basis @ basis.T
    off = gram - np.diag(np.diag(gram))
    assert np.abs(off).max() < 1e-6
    assert np.all(np.diag(gram) > 0)


def test_stand_in_landmarks_distinct(assets):
    ids = assets.landmark_vertex_ids
    assert len(set(ids.tolist())) == NUM_LANDMARKS
    assert ids.min() >= 0 and ids.max() < assets.num_vertices


def test_stand_in_parent_tree(assets):
    assert assets.parent[0] < 0
    assert all(0 <= assets.parent[j] < j for j in range(1, NUM_JOINTS))


def test_asset_round_trip(tmp_path):
    a = make_stand_in_assets(7)
    path = save_assets(a, tmp_path / "a.npz")
    assert assets_equal(load_assets(path), a)


def _rewrite(src, dst, edit):
    arrays, meta = load_archive(src, "dessie-assets/1")
    edit(arrays)
    save_archive(dst, arrays, "dessie-assets/1", extra={k: v for k, v in meta.items()
                                                        if k not in ("format", "arrays")})


def test_asset_loader_names_bad_skin_weights(tmp_path):
    src = save_assets(make_stand_in_assets(7), tmp_path / "a.npz")

    def scale_row(arrays):
        arrays["skin_weights"][0] *= 0.9
    _rewrite(src, tmp_path / "b.npz", scale_row)
    with pytest.raises(AssetError, match="skin_weights"):
        load_assets(tmp_path / "b.npz")


def test_asset_loader_names_missing_faces(tmp_path):
    src = save_assets(make_stand_in_assets(7), tmp_path / "a.npz")
    _rewrite(src, tmp_path / "b.npz", lambda arrays: arrays.pop("faces"))
    with pytest.raises(AssetError, match="faces"):
        load_assets(tmp_path / "b.npz")


def test_asset_loader_names_shape_mismatch(tmp_path):
    src = save_assets(make_stand_in_assets(7), tmp_path / "a.npz")

    def drop_column(arrays):
        arrays["uv_coords"] = arrays["uv_coords"][:, :1]
    _rewrite(src, tmp_path / "b.npz", drop_column)
    with pytest.raises(AssetError, match="uv_coords"):
        load_assets(tmp_path / "b.npz")


def test_state_rejects_large_angles_and_nans():
    z = PoseShapeState.zeros()
    with pytest.raises(ValueError):
        PoseShapeState(z.beta, torch.tensor([7.0, 0, 0]), z.theta_J, z.xi)
    with pytest.raises(ValueError):
        PoseShapeState(z.beta * float("nan"), z.theta_G, z.theta_J, z.xi)


def test_state_flat_round_trip(rng):
    v = torch.as_tensor(rng.normal(size=NUM_PARAMS) * 0.3)
    assert torch.equal(PoseShapeState.from_flat(v).flat(), v)


def test_rest_pose_kinematics(assets, body):
    joints, A = forward_kinematics(assets, PoseShapeState.zeros())
    np.testing.assert_allclose(A.numpy(), np.broadcast_to(np.eye(4), (NUM_JOINTS, 4, 4)), atol=1e-12)
    rest = assets.joint_regressor @ assets.template_vertices
    np.testing.assert_allclose(joints.numpy(), rest, atol=1e-12)


def test_global_rotation_rotates_joints_about_root(assets):
    z = PoseShapeState.zeros()
    joints, _ = forward_kinematics(assets, PoseShapeState(z.beta, torch.tensor([0, 0, math.pi], dtype=torch.float64), z.theta_J, z.xi))
    rest = assets.joint_regressor @ assets.template_vertices
    Rz = np.diag([-1.0, -1.0, 1.0])
    np.testing.assert_allclose(joints.numpy(), _rot_about(rest, Rz, rest[0]), atol=1e-9)


def test_translation_moves_joints(assets):
    z = PoseShapeState.zeros()
    joints, _ = forward_kinematics(assets, PoseShapeState(z.beta, z.theta_G, z.theta_J, torch.tensor([1.0, 2, 3])))
    rest = assets.joint_regressor @ assets.template_vertices
    np.testing.assert_allclose(joints.numpy(), rest + [1, 2, 3], atol=1e-12)


def test_pose_mesh_identity_and_linearity(assets, rng):
    z = PoseShapeState.zeros()
    np.testing.assert_allclose(pose_mesh(assets, z).numpy(), assets.template_vertices, atol=1e-9)
    e1 = torch.zeros(NUM_BETAS, dtype=torch.float64)
    e1[0] = 1
    v = pose_mesh(assets, PoseShapeState(e1, z.theta_G, z.theta_J, z.xi)).numpy()
    np.testing.assert_allclose(v, assets.template_vertices + assets.shape_basis[0], atol=1e-9)


def test_root_rotation_is_rigid(assets):
    z = PoseShapeState.zeros()
    v = pose_mesh(assets, PoseShapeState(z.beta, torch.tensor([math.pi / 2, 0, 0], dtype=torch.float64), z.theta_J, z.xi)).numpy()
    rest = assets.template_vertices
    root = (assets.joint_regressor @ rest)[0]
    Rx = np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=np.float64)
    np.testing.assert_allclose(v, _rot_about(rest, Rx, root), atol=1e-9)


def test_landmarks_gather(assets, rng):
    state = PoseShapeState(torch.as_tensor(rng.normal(size=9)), torch.as_tensor(rng.normal(size=3) * 0.5),
                           torch.as_tensor(rng.normal(size=(35, 3)) * 0.3), torch.as_tensor(rng.normal(size=3)))
    v = pose_mesh(assets, state)
    lm = landmarks_3d(assets, v)
    np.testing.assert_array_equal(lm.numpy(), np.stack([v[i].numpy() for i in assets.landmark_vertex_ids]))
    rest = pose_mesh(assets, PoseShapeState.zeros())
    np.testing.assert_array_equal(landmarks_3d(assets, rest + 1.5).numpy(), landmarks_3d(assets, rest).numpy() + 1.5)


def test_batched_forward_matches_single(assets, rng):
    flat = torch.as_tensor(rng.normal(size=(4, NUM_PARAMS)) * 0.3)
    batched = pose_mesh(assets, PoseShapeState.from_flat(flat))
    for i in range(4):
        np.testing.assert_allclose(batched[i].numpy(), pose_mesh(assets, PoseShapeState.from_flat(flat[i])).numpy(),
                                   atol=1e-12)
