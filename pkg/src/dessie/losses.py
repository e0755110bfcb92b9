"""Training objectives: keypoint, silhouette, prior, disentanglement and GT terms.

All functions accept batched tensors. Weighted terms already include their
weight from :class:`LossWeights` so the total objective is a plain sum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .body_model import NUM_BETAS, NUM_POSE_JOINTS, BodyModel
from .camera import CameraParams, project
from .network import Prediction
from .renderer import RasterConfig, render_silhouette
from .synthpipe import Factor


@dataclass(frozen=True)
class LossWeights:
    w_K: float = 0.001
    w_S: float = 0.0001
    w_prior_beta: float = 0.01
    w_prior_theta: float = 0.01
    w_D: float = 0.02
    gm_sigma: float = 100.0

    def __post_init__(self):
        for name in ("w_K", "w_S", "w_prior_beta", "w_prior_theta", "w_D"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.gm_sigma <= 0:
            raise ValueError("gm_sigma must be positive")


def gm_robustifier(e, sigma: float):
    """Geman-McClure penalty ``sigma^2 e^2 / (sigma^2 + e^2)``."""
    e2 = e * e
    return sigma * sigma * e2 / (sigma * sigma + e2)


def _gm_sq(e2: Tensor, sigma: float) -> Tensor:
    # same penalty from the squared residual; avoids the sqrt kink at zero
    return sigma * sigma * e2 / (sigma * sigma + e2)


def keypoint_loss(pred_kp: Tensor, gt_kp, vis, w: LossWeights = LossWeights()) -> Tensor:
    """Visibility-weighted mean of robustified keypoint distances, times ``w_K``.

    With a batch the weighted mean is pooled over every keypoint of every
    instance. Returns 0 when nothing is visible.
    """
    gt_kp = torch.as_tensor(gt_kp, dtype=pred_kp.dtype)
    lam2 = torch.as_tensor(vis, dtype=pred_kp.dtype) ** 2
    seen = lam2 > 0
    # invisible keypoints may carry arbitrary (even non-finite) coordinates
    diff = torch.where(seen[..., None], pred_kp - torch.where(seen[..., None], gt_kp, pred_kp.detach()),
                       torch.zeros_like(pred_kp))
    rho = _gm_sq((diff * diff).sum(-1), w.gm_sigma)
    denom = lam2.sum()
    if float(denom) == 0.0:
        return pred_kp.sum() * 0.0
    return w.w_K * (lam2 * rho).sum() / denom


def silhouette_loss(pred_sil: Tensor, gt_sil, w: LossWeights = LossWeights()) -> Tensor:
    """``w_S`` times the per-pixel mean SmoothL1 (transition at 1)."""
    gt = torch.as_tensor(np.asarray(gt_sil) if not isinstance(gt_sil, Tensor) else gt_sil).to(pred_sil.dtype)
    if gt.shape != pred_sil.shape:
        raise ValueError(f"silhouette shapes differ: {tuple(pred_sil.shape)} vs {tuple(gt.shape)}")
    return w.w_S * F.smooth_l1_loss(pred_sil, gt, reduction="mean", beta=1.0)


@dataclass
class GaussianPriors:
    """Diagonal Gaussians over shape coefficients and joint rotations."""

    beta_var: np.ndarray  # (9,)
    theta_mean: np.ndarray  # (105,)
    theta_var: np.ndarray  # (105,)

    @classmethod
    def fit(cls, shape_std, poses, floor: float = 1e-4) -> "GaussianPriors":
        beta_var = np.maximum(np.broadcast_to(np.asarray(shape_std, dtype=np.float64), (NUM_BETAS,)) ** 2, floor)
        th = np.stack([np.asarray(p.theta_J, dtype=np.float64).reshape(-1) for p in poses])
        return cls(beta_var, th.mean(axis=0), np.maximum(th.var(axis=0), floor))

    @classmethod
    def unit(cls) -> "GaussianPriors":
        return cls(np.ones(NUM_BETAS), np.zeros(3 * NUM_POSE_JOINTS), np.ones(3 * NUM_POSE_JOINTS))


def prior_loss(beta: Tensor, theta_J: Tensor, w: LossWeights = LossWeights(),
               priors: GaussianPriors | None = None) -> Tensor:
    """Weighted squared Mahalanobis distances of shape and pose (batch mean)."""
    priors = priors or GaussianPriors.unit()
    dt = beta.dtype
    bv = torch.as_tensor(priors.beta_var, dtype=dt)
    tm = torch.as_tensor(priors.theta_mean, dtype=dt)
    tv = torch.as_tensor(priors.theta_var, dtype=dt)
    th = theta_J.reshape(*theta_J.shape[:-2], -1)
    lb = (beta * beta / bv).sum(-1)
    lt = ((th - tm) ** 2 / tv).sum(-1)
    return (w.w_prior_beta * lb + w.w_prior_theta * lt).mean()


def _mse(a: Tensor, b: Tensor) -> Tensor:
    return ((a - b) ** 2).mean(-1)


def dfl_terms(out1: Prediction, out2: Prediction, factors) -> Tensor:
    """Unweighted per-pair disentanglement terms, shape (B,)."""
    if out1.features is None or out2.features is None:
        raise ValueError("disentanglement loss needs the feature triple (DESSIE predictions)")
    f1, f2 = out1.features, out2.features
    if isinstance(factors, (Factor, str)):
        factors = [factors] * f1.gamma_A.shape[0] if f1.gamma_A.dim() > 1 else [factors]
    batched = f1.gamma_A.dim() > 1
    terms = []
    for i, fac in enumerate(factors):
        pick = (lambda t: t[i]) if batched else (lambda t: t)
        gA = _mse(pick(f1.gamma_A), pick(f2.gamma_A))
        gP = _mse(pick(f1.gamma_P), pick(f2.gamma_P))
        tG = _mse(pick(out1.theta_G), pick(out2.theta_G))
        fac = Factor(fac)
        if fac is Factor.APPEARANCE:
            terms.append(gP + tG)
        elif fac is Factor.POSE:
            terms.append(gA + tG)
        else:
            terms.append(gA + gP)
    return torch.stack(terms)


def dfl_loss(out1: Prediction, out2: Prediction, varied_factor, w: LossWeights = LossWeights()) -> Tensor:
    """``w_D`` times the factor-selected feature/rotation MSEs (mean over pairs)."""
    return w.w_D * dfl_terms(out1, out2, varied_factor).mean()


def gt_loss(pred: Prediction, beta_gt, theta_G_gt, theta_J_gt) -> Tensor:
    """MSE of shape plus MSE of the stacked (global, joint) rotations; batch mean."""
    dt = pred.beta.dtype
    b = torch.as_tensor(beta_gt, dtype=dt)
    th_gt = torch.cat([torch.as_tensor(theta_G_gt, dtype=dt).reshape(*b.shape[:-1], 3),
                       torch.as_tensor(theta_J_gt, dtype=dt).reshape(*b.shape[:-1], -1)], -1)
    return (_mse(pred.beta, b) + _mse(pred.theta(), th_gt)).mean()


def total_loss(components: dict[str, Tensor]) -> tuple[Tensor, dict[str, float]]:
    """Sum of the enabled components plus their float values for logging."""
    if not components:
        return torch.zeros(()), {}
    total = sum(components.values())
    logged = {k: float(v.detach()) for k, v in components.items()}
    logged["total"] = float(total.detach())
    return total, logged


# ------------------------------------------------------------------ scene evaluation


@dataclass
class Targets:
    """Per-batch supervision. Optional fields may be None."""

    keypoints: Tensor  # (B, 17, 2)
    visibility: Tensor  # (B, 17)
    silhouettes: Tensor | None = None  # (B, r, r)
    use_silhouette: Tensor | None = None  # (B,) bool
    beta: Tensor | None = None
    theta_G: Tensor | None = None
    theta_J: Tensor | None = None
    use_gt: Tensor | None = None  # (B,) bool; real images lack GT parameters


def posed_model_vertices(body: BodyModel, beta: Tensor, theta_G: Tensor, theta_J: Tensor) -> Tensor:
    """Camera-free vertices (B, V, 3); translation comes from the camera."""
    return body(beta, theta_G, theta_J, None)


def project_landmarks(body: BodyModel, verts: Tensor, cam: CameraParams) -> Tensor:
    return project(verts[:, body.landmark_ids], cam)


def render_batch(body: BodyModel, verts: Tensor, cam_t: Tensor, raster: RasterConfig,
                 f: float, r: int, which: Sequence[int] | None = None) -> Tensor:
    idx = range(verts.shape[0]) if which is None else which
    sils = [render_silhouette(verts[i], body.faces, CameraParams(cam_t[i, 0], cam_t[i, 1], cam_t[i, 2], f=f, r=r),
                              raster) for i in idx]
    return torch.stack(sils) if sils else verts.new_zeros(0, raster.resolution, raster.resolution)


def scene_components(pred: Prediction, targets: Targets, body: BodyModel, w: LossWeights = LossWeights(),
                     raster: RasterConfig = RasterConfig(), priors: GaussianPriors | None = None,
                     pairs: Sequence[tuple[int, int, Factor]] = (), enable_sil: bool = True,
                     enable_dfl: bool = True, enable_gt: bool = False, enable_prior: bool = True) -> dict[str, Tensor]:
    """Loss components for a batch. ``pairs`` index rows of the batch."""
    verts = posed_model_vertices(body, pred.beta, pred.theta_G, pred.theta_J)
    kp = project_landmarks(body, verts, pred.camera)
    comps = {"kp": keypoint_loss(kp, targets.keypoints, targets.visibility, w)}
    if enable_sil and targets.silhouettes is not None:
        use = targets.use_silhouette
        rows = [i for i in range(verts.shape[0]) if use is None or bool(use[i])]
        if rows:
            sil = render_batch(body, verts, pred.cam, raster, pred.f, pred.r, rows)
            comps["sil"] = silhouette_loss(sil, targets.silhouettes[rows], w)
    if enable_prior:
        comps["prior"] = prior_loss(pred.beta, pred.theta_J, w, priors)
    if enable_dfl and pairs and pred.features is not None:
        a = [p[0] for p in pairs]
        b = [p[1] for p in pairs]
        comps["dfl"] = dfl_loss(pred.index(a), pred.index(b), [p[2] for p in pairs], w)
    if enable_gt and targets.beta is not None:
        rows = [i for i in range(verts.shape[0]) if targets.use_gt is None or bool(targets.use_gt[i])]
        if rows:
            comps["gt"] = gt_loss(pred.index(rows), targets.beta[rows], targets.theta_G[rows], targets.theta_J[rows])
    return comps
