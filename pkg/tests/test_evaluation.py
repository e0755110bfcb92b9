import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from dessie.body_model import PoseShapeState, pose_mesh
from dessie.camera import CameraParams
from dessie.evaluation import (
    FitConfig, KeypointEval, UndefinedMetricError, auc, auc_from_curve, chamfer_distance, fit_to_observation, iou,
    keypoint_transfer, norm_length_from_gt, pck, procrustes_align, procrustes_transform,
)
from dessie.synthpipe import item_rng, sample_single

from oracles import brute_chamfer_mm, brute_iou, brute_pck, brute_transfer


def _eval(rng, n=17, spread=20.0):
    gt = rng.uniform(40, 200, (n, 2))
    return gt + rng.normal(0, spread, (n, 2)), gt, (rng.uniform(size=n) > 0.2).astype(float)


def test_pck_examples(rng):
    gt = rng.uniform(0, 100, (17, 2))
    vis = np.ones(17)
    assert pck(KeypointEval(gt, gt, vis)) == 100.0
    norm = norm_length_from_gt(gt, vis)
    assert pck(KeypointEval(gt + [0.2 * norm, 0], gt, vis)) == 0.0
    pred = gt.copy()
    vis6 = np.zeros(17)
    vis6[:6] = 1
    pred[:3] += [0.05 * norm, 0]
    pred[3:6] += [0.5 * norm, 0]
    assert pck(KeypointEval(pred, gt, vis6, norm)) == 50.0


def test_pck_requires_visible_and_shape(rng):
    gt = rng.uniform(size=(17, 2))
    with pytest.raises(UndefinedMetricError):
        pck(KeypointEval(gt, gt, np.zeros(17), norm_length=1.0))
    with pytest.raises(ValueError):
        KeypointEval(gt[:10], gt[:10], np.ones(10))
    KeypointEval(gt[:16], gt[:16], np.ones(16))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-500, 500), st.floats(-500, 500))
def test_pck_translation_invariant(seed, dx, dy):
    pred, gt, vis = _eval(np.random.default_rng(seed))
    vis[0] = 1
    a = pck(KeypointEval(pred, gt, vis))
    b = pck(KeypointEval(pred + [dx, dy], gt + [dx, dy], vis))
    assert a == b


def test_iou_examples():
    a = np.zeros((6, 6), bool)
    b = np.zeros((6, 6), bool)
    a[0:2, 0:2] = True
    b[0:2, 1:3] = True
    assert iou(a, a) == 1.0
    c = np.zeros((6, 6), bool)
    c[4:, 4:] = True
    assert iou(a, c) == 0.0
    assert iou(a, b) == pytest.approx(1 / 3)
    assert iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(ValueError):
        iou(np.zeros((3, 3)), np.zeros((4, 4)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_iou_symmetric_and_identity(seed):
    r = np.random.default_rng(seed)
    a, b = r.uniform(size=(12, 12)) > 0.5, r.uniform(size=(12, 12)) > 0.5
    assert iou(a, b) == iou(b, a)
    if a.any() and not np.array_equal(a, b):
        assert iou(a, b) < 1.0


def test_auc_examples():
    ts = np.linspace(0.06, 0.10, 9)
    assert auc_from_curve(ts, np.full(9, 100.0)) == pytest.approx(100.0)
    assert auc_from_curve(ts, np.zeros(9)) == 0.0
    assert abs(auc_from_curve(ts, (ts - 0.06) / 0.04 * 100) - 50.0) <= 1e-9


@pytest.mark.parametrize("steps", [2, 3, 9, 50])
def test_auc_constant_curve(rng, steps):
    gt = rng.uniform(0, 100, (17, 2))
    assert auc(KeypointEval(gt, gt, np.ones(17)), steps=steps) == pytest.approx(100.0)


def test_metric_oracles(rng):
    for _ in range(20):
        pred, gt, vis = _eval(rng)
        vis[0] = 1
        e = KeypointEval(pred, gt, vis)
        assert abs(pck(e) - brute_pck(pred, gt, vis, e.norm_length, 0.1)) <= 1e-9
        a, b = rng.uniform(size=(10, 10)) > 0.4, rng.uniform(size=(10, 10)) > 0.6
        assert abs(iou(a, b) - brute_iou(a, b)) <= 1e-9
        ca, cb = rng.normal(size=(12, 3)) * 0.1, rng.normal(size=(9, 3)) * 0.1
        assert abs(chamfer_distance(ca, cb) - brute_chamfer_mm(ca, cb)) <= 1e-9


def test_chamfer_examples():
    a = np.zeros((1, 3))
    assert chamfer_distance(a, a) == 0.0
    assert chamfer_distance(a, np.array([[0, 0, 0.001]])) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        chamfer_distance(np.zeros((0, 3)), a)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_chamfer_exactly_symmetric(seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(int(r.integers(1, 30)), 3)), r.normal(size=(int(r.integers(1, 30)), 3))
    assert chamfer_distance(a, b) == chamfer_distance(b, a)


def test_procrustes_examples(rng):
    src = rng.normal(size=(40, 3))
    R = Rotation.random(random_state=1).as_matrix()
    dst = 2.0 * src @ R.T + [0.3, -1.0, 2.0]
    np.testing.assert_allclose(procrustes_align(src, dst), dst, atol=1e-9)
    s, R2, t = procrustes_transform(src, src)
    assert s == pytest.approx(1.0) and np.allclose(R2, np.eye(3)) and np.allclose(t, 0, atol=1e-12)
    with pytest.raises(ValueError):
        procrustes_align(np.zeros((5, 3)), src[:5])


def test_procrustes_never_reflects(rng):
    src = rng.normal(size=(30, 3))
    _, R, _ = procrustes_transform(src, src * [1, 1, -1])
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_procrustes_beats_random_search(rng):
    src, dst = rng.normal(size=(25, 3)), rng.normal(size=(25, 3))
    best = ((procrustes_align(src, dst) - dst) ** 2).sum()
    for _ in range(1000):
        R = Rotation.random(random_state=rng).as_matrix()
        s = rng.uniform(0.1, 3)
        t = rng.normal(size=3)
        assert best <= ((s * src @ R.T + t - dst) ** 2).sum() + 1e-12


def test_procrustes_idempotent(rng):
    src, dst = rng.normal(size=(25, 3)), rng.normal(size=(25, 3))
    once = procrustes_align(src, dst)
    twice = procrustes_align(once, dst)
    assert abs(((twice - dst) ** 2).sum() - ((once - dst) ** 2).sum()) < 1e-12


def _transfer_case(rng, nv=60):
    sv = rng.uniform(0, 256, (nv, 2))
    svis = (rng.uniform(size=nv) > 0.3).astype(float)
    svis[0] = 1
    tv = sv + rng.normal(0, 8, (nv, 2))
    sgt = rng.uniform(0, 256, (17, 2))
    tgt = sgt + rng.normal(0, 8, (17, 2))
    return sgt, (rng.uniform(size=17) > 0.2).astype(float), tgt, (rng.uniform(size=17) > 0.2).astype(float), sv, svis, tv


def test_transfer_examples(rng):
    sgt, svis, _, _, sv, vvis, _ = _transfer_case(rng)
    svis[0] = 1
    # keypoints on vertices, identical target: self transfer is perfect
    sgt = sv[rng.integers(0, len(sv), 17)]
    vvis[:] = 1
    assert keypoint_transfer(sgt, svis, sgt, svis, sv, vvis, sv) == 100.0
    norm = norm_length_from_gt(sgt, svis)
    assert keypoint_transfer(sgt, svis, sgt, svis, sv, vvis, sv + [0.2 * norm, 0]) == 0.0
    with pytest.raises(UndefinedMetricError):
        keypoint_transfer(sgt, svis, sgt, svis, sv, np.zeros(len(sv)), sv)


def test_transfer_matches_brute_force(rng):
    for _ in range(20):
        sgt, svis, tgt, tvis, sv, vvis, tv = _transfer_case(rng)
        svis[0] = tvis[0] = 1
        norm = norm_length_from_gt(tgt, tvis)
        assert abs(keypoint_transfer(sgt, svis, tgt, tvis, sv, vvis, tv)
                   - brute_transfer(sgt, svis, tgt, tvis, sv, vvis, tv, norm)) <= 1e-9


@pytest.fixture(scope="module")
def target(assets, sets):
    return sample_single(item_rng(21, 0), sets, assets)


def test_fit_from_ground_truth_keeps_it(assets, target):
    res = fit_to_observation(assets, target.keypoints_gt, target.visibility, target.silhouette_gt, target.state(),
                             target.camera, iters=10)
    start = fit_to_observation(assets, target.keypoints_gt, target.visibility, target.silhouette_gt, target.state(),
                               target.camera, iters=0)
    assert res.loss <= start.loss
    v0 = pose_mesh(assets, target.state())
    v1 = pose_mesh(assets, res.state)
    assert float((v1 - v0).abs().max()) < 1e-2


def test_fit_with_empty_mask_and_empty_render(assets, target):
    z = PoseShapeState.zeros()
    away = CameraParams(1.0, 5.0, 5.0)  # mesh lands far outside the frame
    res = fit_to_observation(assets, target.keypoints_gt, np.zeros(17), np.zeros((256, 256)), z, away, iters=3)
    assert np.isfinite(res.loss) and res.loss >= 0
