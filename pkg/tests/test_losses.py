import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dessie.losses import (
    GaussianPriors, LossWeights, dfl_loss, gm_robustifier, gt_loss, keypoint_loss, prior_loss, silhouette_loss,
    total_loss,
)
from dessie.network import FEATURE_DIM, FeatureTriple, make_prediction
from dessie.synthpipe import Factor

from oracles import gm_loop, smooth_l1_loop

W = LossWeights()
D = torch.float64


def test_weights_defaults_and_validation():
    assert (W.w_K, W.w_S, W.w_prior_beta, W.w_prior_theta, W.w_D) == (0.001, 0.0001, 0.01, 0.01, 0.02)
    with pytest.raises(ValueError):
        LossWeights(w_K=-1)


def test_gm_examples():
    s = 7.0
    assert gm_robustifier(0.0, s) == 0.0
    assert gm_robustifier(s, s) == pytest.approx(s * s / 2, abs=1e-12)
    assert abs(gm_robustifier(1e6 * s, s) - s * s) <= 1e-6 * s * s


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1e4), st.floats(0, 1e4), st.floats(0.1, 500))
def test_gm_monotone_and_bounded(a, b, s):
    lo, hi = sorted((a, b))
    assert gm_robustifier(lo, s) <= gm_robustifier(hi, s) + 1e-9
    assert gm_robustifier(hi, s) <= s * s * (1 + 1e-12)


def _kp(rng, n=17):
    return torch.as_tensor(rng.uniform(0, 256, (n, 2))), rng.uniform(0, 256, (n, 2))


def test_keypoint_loss_examples(rng):
    pred, gt = _kp(rng)
    assert float(keypoint_loss(torch.as_tensor(gt), gt, np.ones(17))) == 0.0
    vis = np.zeros(17)
    vis[3] = 1
    g = pred.numpy().copy()
    g[3] += [W.gm_sigma, 0]
    assert float(keypoint_loss(pred, g, vis)) == pytest.approx(W.w_K * W.gm_sigma ** 2 / 2, rel=1e-12)
    assert float(keypoint_loss(pred, gt, np.zeros(17))) == 0.0


def test_keypoint_loss_matches_loop(rng):
    for _ in range(20):
        pred, gt = _kp(rng)
        vis = (rng.uniform(size=17) > 0.3).astype(float)
        if not vis.any():
            vis[0] = 1
        ref = gm_loop(pred.numpy(), gt, vis, W.gm_sigma, W.w_K)
        assert abs(float(keypoint_loss(pred, gt, vis)) - ref) <= 1e-9


def test_keypoint_loss_ignores_invisible_coordinates(rng):
    pred, gt = _kp(rng)
    vis = (rng.uniform(size=17) > 0.5).astype(float)
    vis[0] = 1
    junk = gt.copy()
    junk[vis == 0] = rng.uniform(-1e6, 1e6, (int((vis == 0).sum()), 2))
    junk2 = gt.copy()
    junk2[vis == 0] = np.nan
    base = float(keypoint_loss(pred, gt, vis))
    assert float(keypoint_loss(pred, junk, vis)) == base
    assert float(keypoint_loss(pred, junk2, vis)) == base
    p = pred.clone().requires_grad_()
    keypoint_loss(p, junk2, vis).backward()
    assert torch.isfinite(p.grad).all() and float(p.grad[vis == 0].abs().max()) == 0


def test_silhouette_loss_examples(rng):
    gt = (rng.uniform(size=(32, 32)) > 0.5).astype(float)
    assert float(silhouette_loss(torch.as_tensor(gt), gt)) == 0.0
    assert float(silhouette_loss(torch.as_tensor(gt + 0.5), gt)) == pytest.approx(W.w_S * 0.125, rel=1e-12)
    pred = torch.as_tensor(rng.uniform(-1, 3, (16, 16)))
    g = rng.uniform(size=(16, 16)) > 0.5
    assert abs(float(silhouette_loss(pred, g)) - smooth_l1_loop(pred.numpy(), g, W.w_S)) <= 1e-9
    with pytest.raises(ValueError):
        silhouette_loss(torch.zeros(4, 4), np.zeros((5, 5)))


def test_prior_loss_examples(rng):
    pri = GaussianPriors.unit()
    z = torch.zeros(1, 9, dtype=D)
    assert float(prior_loss(z, torch.zeros(1, 35, 3, dtype=D), W, pri)) == 0.0
    e1 = z.clone()
    e1[0, 0] = 1
    assert float(prior_loss(e1, torch.zeros(1, 35, 3, dtype=D), W, pri)) == pytest.approx(W.w_prior_beta)
    pri = GaussianPriors(rng.uniform(0.5, 2, 9), rng.normal(size=105), rng.uniform(0.1, 1, 105))
    beta, th = rng.normal(size=9), rng.normal(size=(35, 3))
    ref = W.w_prior_beta * beta @ np.diag(1 / pri.beta_var) @ beta \
        + W.w_prior_theta * (th.ravel() - pri.theta_mean) @ np.diag(1 / pri.theta_var) @ (th.ravel() - pri.theta_mean)
    got = float(prior_loss(torch.as_tensor(beta)[None], torch.as_tensor(th)[None], W, pri))
    assert abs(got - ref) <= 1e-9 * max(1, abs(ref))


def test_prior_fit_floor(sets):
    pri = GaussianPriors.fit(sets.shape_sampler.std, sets.poses)
    assert np.all(pri.theta_var >= 1e-4)
    th = np.stack([p.theta_J.ravel() for p in sets.poses])
    np.testing.assert_allclose(pri.theta_mean, th.mean(0))


def _pred(rng, gA=None, gP=None, gG=None, theta_G=None):
    feats = FeatureTriple(*(torch.as_tensor(rng.normal(size=(1, FEATURE_DIM))) if g is None else g
                            for g in (gA, gP, gG)))
    tg = torch.as_tensor(rng.normal(size=(1, 3))) if theta_G is None else theta_G
    return make_prediction(torch.as_tensor(rng.normal(size=(1, 9))), torch.as_tensor(rng.normal(size=(1, 105))), tg,
                           torch.tensor([[0.9, 0.0, 0.0]], dtype=D), feats)


@pytest.mark.parametrize("factor", list(Factor))
def test_dfl_zero_and_symmetric(rng, factor):
    a, b = _pred(rng), _pred(rng)
    assert float(dfl_loss(a, a, factor)) == 0.0
    assert float(dfl_loss(a, b, factor)) == float(dfl_loss(b, a, factor))


def test_dfl_hand_value(rng):
    tg = torch.zeros(1, 3, dtype=D)
    a = _pred(rng, gP=torch.zeros(1, FEATURE_DIM, dtype=D), theta_G=tg)
    b = _pred(rng, gP=torch.ones(1, FEATURE_DIM, dtype=D), theta_G=tg)
    assert float(dfl_loss(a, b, Factor.APPEARANCE)) == pytest.approx(W.w_D * 1.0, rel=1e-12)


def test_dfl_branches_pick_the_right_terms(rng):
    a, b = _pred(rng), _pred(rng)
    mse = lambda x, y: float(((x - y) ** 2).mean())  # noqa: E731
    gA, gP = mse(a.features.gamma_A, b.features.gamma_A), mse(a.features.gamma_P, b.features.gamma_P)
    tG = mse(a.theta_G, b.theta_G)
    assert float(dfl_loss(a, b, Factor.APPEARANCE)) == pytest.approx(W.w_D * (gP + tG))
    assert float(dfl_loss(a, b, Factor.POSE)) == pytest.approx(W.w_D * (gA + tG))
    assert float(dfl_loss(a, b, Factor.GLOBAL_ROTATION)) == pytest.approx(W.w_D * (gA + gP))


def test_dfl_needs_features(rng):
    a = _pred(rng)
    bare = make_prediction(a.beta, a.theta_J, a.theta_G, a.cam)
    with pytest.raises(ValueError):
        dfl_loss(bare, a, Factor.POSE)


def test_gt_loss_examples(rng):
    p = _pred(rng)
    assert float(gt_loss(p, p.beta, p.theta_G, p.theta_J)) == 0.0
    b = p.beta.clone()
    b[0, 4] += 1
    assert float(gt_loss(p, b, p.theta_G, p.theta_J)) == pytest.approx(1 / 9)
    bg, tg, tj = rng.normal(size=9), rng.normal(size=3), rng.normal(size=(35, 3))
    th_pred = np.concatenate([p.theta_G.numpy().ravel(), p.theta_J.numpy().ravel()])
    th_gt = np.concatenate([tg, tj.ravel()])
    ref = sum((x - y) ** 2 for x, y in zip(p.beta.numpy().ravel(), bg)) / 9 \
        + sum((x - y) ** 2 for x, y in zip(th_pred, th_gt)) / 108
    assert abs(float(gt_loss(p, bg[None], tg[None], tj[None])) - ref) <= 1e-9


def test_total_loss_sums():
    assert float(total_loss({"kp": torch.tensor(0.0)})[0]) == 0.0
    total, logged = total_loss({k: torch.tensor(float(v)) for k, v in zip("abcd", (1, 2, 3, 4))})
    assert float(total) == 10.0 and logged["total"] == 10.0 and logged["c"] == 3.0


def test_all_losses_non_negative(rng):
    for _ in range(10):
        pred, gt = _kp(rng)
        assert float(keypoint_loss(pred, gt, rng.uniform(size=17) > 0.5)) >= 0
        assert float(silhouette_loss(torch.as_tensor(rng.uniform(size=(8, 8))), rng.uniform(size=(8, 8)) > 0.5)) >= 0
        a, b = _pred(rng), _pred(rng)
        assert float(dfl_loss(a, b, Factor.POSE)) >= 0
