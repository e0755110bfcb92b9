import numpy as np
import pytest
import torch

from dessie.body_model import PoseShapeState, pose_mesh
from dessie.camera import BehindCameraError, CameraParams
from dessie.renderer import NONE, RasterConfig, rasterize, render_rgb, render_silhouette, visible_landmarks

from oracles import ray_visible, scanline_mask

CAM = CameraParams(1.0)


def _quad(half=0.01, z=0.0):
    v = torch.tensor([[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]], dtype=torch.float64)
    return v, np.array([[0, 1, 2], [0, 2, 3]])


def test_empty_face_list_is_blank():
    sil = render_silhouette(torch.zeros(3, 3, dtype=torch.float64), np.zeros((0, 3), int), CAM)
    assert sil.shape == (256, 256) and float(sil.abs().max()) == 0.0


def test_full_coverage_quad():
    v, f = _quad(1.2)  # 1.2 units at depth 39 projects to about 150 px per side
    sil = render_silhouette(v, f, CAM)
    assert float(sil[8:-8, 8:-8].min()) >= 0.99


def test_behind_camera_raises():
    v, f = _quad(0.01, z=-50.0)
    with pytest.raises(BehindCameraError):
        render_silhouette(v, f, CAM)


def test_horse_mask_matches_scanline(assets):
    v = pose_mesh(assets, PoseShapeState.zeros())
    hard = render_silhouette(v, assets.faces, CAM).numpy() > 0.5
    oracle = scanline_mask(v.numpy(), assets.faces, CAM)
    assert abs(int(hard.sum()) - int(oracle.sum())) <= 0.01 * 256 * 256
    assert np.count_nonzero(hard != oracle) <= 0.01 * 256 * 256


def test_face_order_does_not_change_silhouette(assets, rng):
    v = pose_mesh(assets, PoseShapeState.zeros())
    perm = rng.permutation(len(assets.faces))
    a = render_silhouette(v, assets.faces, CAM)
    b = render_silhouette(v, assets.faces[perm], CAM)
    assert torch.equal(a, b)
    # gradients agree as well
    va = v.clone().requires_grad_()
    vb = v.clone().requires_grad_()
    render_silhouette(va, assets.faces, CAM).sum().backward()
    render_silhouette(vb, assets.faces[perm], CAM).sum().backward()
    assert torch.equal(va.grad, vb.grad)


def test_silhouette_gradient_wrt_vertical_shift(assets):
    v0 = pose_mesh(assets, PoseShapeState.zeros())
    cfg = RasterConfig(soft_sigma=1.0)

    def mean_sil(dy):
        return render_silhouette(v0 + torch.stack([torch.zeros_like(dy), dy, torch.zeros_like(dy)]), assets.faces,
                                 CAM, cfg).mean()
    dy = torch.tensor(0.0, dtype=torch.float64, requires_grad=True)
    mean_sil(dy).backward()
    # small step: the inside distance field has kinks where the nearest outline switches
    h = 2e-5
    fd = (mean_sil(torch.tensor(h, dtype=torch.float64)) - mean_sil(torch.tensor(-h, dtype=torch.float64))) / (2 * h)
    assert abs(float(dy.grad) - float(fd)) <= 1e-2 * abs(float(fd)) + 1e-8


def test_rgb_empty_mesh_is_background(rng):
    bg = rng.uniform(size=(256, 256, 3))
    out = render_rgb(torch.zeros(3, 3, dtype=torch.float64), np.zeros((0, 3), int), np.zeros((3, 2)),
                     np.ones((4, 4, 3)), bg, CAM)
    np.testing.assert_array_equal(out.rgb, bg)


def test_rgb_red_texture_full_coverage():
    v, f = _quad(1.2)
    red = np.zeros((8, 8, 3))
    red[..., 0] = 1
    out = render_rgb(v, f, np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float), red, np.zeros((256, 256, 3)), CAM)
    np.testing.assert_allclose(out.rgb[8:-8, 8:-8], np.broadcast_to([1.0, 0, 0], (240, 240, 3)), atol=1e-5)
    # interior alpha is sigmoid(cutoff), not exactly 1


def test_rgb_background_size_mismatch():
    v, f = _quad()
    with pytest.raises(ValueError):
        render_rgb(v, f, np.zeros((4, 2)), np.ones((2, 2, 3)), np.zeros((128, 128, 3)), CAM)


def test_rgb_alpha_matches_silhouette(assets, sets):
    v = pose_mesh(assets, PoseShapeState.zeros())
    bg = np.zeros((256, 256, 3))
    out = render_rgb(v, assets.faces, assets.uv_coords, sets.textures[0][1], bg, CAM)
    sil = render_silhouette(v, assets.faces, CAM).numpy()
    np.testing.assert_array_equal(out.silhouette > 0.5, sil > 0.5)
    # with a black background and white texture the composite is the alpha itself
    white = render_rgb(v, assets.faces, assets.uv_coords, np.ones((4, 4, 3)), bg, CAM)
    np.testing.assert_array_equal(white.rgb[..., 0] > 0.5, sil > 0.5)


def test_rasterize_depth_order():
    near, f = _quad(0.2, z=-1.0)
    far, _ = _quad(0.2, z=1.0)
    v = torch.cat([far, near])
    faces = np.concatenate([f, f + 4])
    fm, _, depth = rasterize(v, faces, CAM)
    assert set(np.unique(fm[120:136, 120:136])) <= {2, 3}
    assert fm[0, 0] == NONE and np.isinf(depth[0, 0])


def _triangle_with_landmark():
    v = torch.tensor([[0.0, 0.0, 0.0], [0.02, 0.0, 0.0], [0.0, 0.02, 0.0]], dtype=torch.float64)
    return v, np.array([[0, 1, 2]])


def test_unoccluded_landmark_visible():
    v, f = _triangle_with_landmark()
    _, vis = visible_landmarks(v, f, [0], CAM)
    assert vis[0] == 1


def test_occluded_landmark_invisible():
    v, f = _triangle_with_landmark()
    q, qf = _quad(0.05, z=-1.0)
    verts = torch.cat([v, q])
    faces = np.concatenate([f, qf + 3])
    _, vis = visible_landmarks(verts, faces, [0], CAM)
    assert vis[0] == 0
    # monotone: dropping the occluder restores visibility
    _, vis2 = visible_landmarks(verts, f, [0], CAM)
    assert vis2[0] == 1


def test_off_image_landmark_invisible():
    v, f = _triangle_with_landmark()
    _, vis = visible_landmarks(v + torch.tensor([5.0, 0, 0], dtype=torch.float64), f, [0], CAM)
    assert vis[0] == 0


def test_side_view_visibility_matches_ray_casting(assets):
    z = PoseShapeState.zeros()
    v = pose_mesh(assets, z)  # rest pose faces the side camera
    pts, vis = visible_landmarks(v, assets.faces, assets.landmark_vertex_ids, CAM)
    oracle = ray_visible(v.numpy(), assets.faces, assets.landmark_vertex_ids, CAM, radius=2.0)
    np.testing.assert_array_equal(vis, oracle)
    assert 0 < vis.sum() < 17


def test_removing_faces_never_hides_landmarks(assets, rng):
    state = PoseShapeState(torch.zeros(9, dtype=torch.float64), torch.tensor([0, 0.8, 0], dtype=torch.float64),
                           torch.zeros(35, 3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))
    v = pose_mesh(assets, state)
    ids = assets.landmark_vertex_ids
    _, full = visible_landmarks(v, assets.faces, ids, CAM)
    incident = np.isin(assets.faces, ids).any(1)
    # drop a random half of the faces that touch no landmark (potential occluders only)
    drop = (~incident) & (rng.uniform(size=len(assets.faces)) < 0.5)
    _, fewer = visible_landmarks(v, assets.faces[~drop], ids, CAM)
    assert np.all(fewer >= full)
