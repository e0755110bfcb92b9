"""Metrics (PCK, IoU, AUC, keypoint transfer, Chamfer) and a fitting diagnostic.

Metric conventions:

* PCK normalises by the longer side of the bounding box of the visible GT
  keypoints unless an explicit length is given.
* IoU of two empty masks is 1; one empty mask against a non-empty one is 0.
* AUC averages PCK over 9 evenly spaced thresholds with the trapezoid rule.
* Chamfer distance is the symmetric mean of (unsquared) nearest-neighbour
  distances, reported in millimetres for inputs in metres.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree

from .body_model import BodyModel, ModelAssets, PoseShapeState, as_body_model
from .camera import CameraParams, project
from .losses import GaussianPriors
from .renderer import RasterConfig, render_silhouette, visible_landmarks

METRIC_CONVENTIONS = {
    "pck_normaliser": "max side of visible GT keypoint bounding box",
    "iou_both_empty": 1.0,
    "auc_steps": 9,
    "chamfer": "symmetric mean of nearest-neighbour distances, x1000",
}


class UndefinedMetricError(ValueError):
    pass


def norm_length_from_gt(gt, vis) -> float:
    gt = np.asarray(gt, dtype=np.float64)
    m = np.asarray(vis) > 0
    if not m.any():
        raise UndefinedMetricError("no visible keypoints")
    pts = gt[m]
    return float(max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1])))


@dataclass
class KeypointEval:
    pred: np.ndarray
    gt: np.ndarray
    vis: np.ndarray
    norm_length: float | None = None

    def __post_init__(self):
        self.pred = np.asarray(self.pred, dtype=np.float64)
        self.gt = np.asarray(self.gt, dtype=np.float64)
        self.vis = np.asarray(self.vis, dtype=np.float64)
        if self.pred.shape != self.gt.shape or self.gt.shape[-1] != 2 or self.vis.shape != self.gt.shape[:1]:
            raise ValueError("pred/gt must be (J, 2) and vis (J,)")
        if self.gt.shape[0] not in (16, 17):
            raise ValueError(f"expected 16 or 17 keypoints, got {self.gt.shape[0]}")
        if self.norm_length is None:
            self.norm_length = norm_length_from_gt(self.gt, self.vis)
        if not self.norm_length > 0:
            raise UndefinedMetricError("normalisation length must be positive")


def pck(e: KeypointEval, threshold: float = 0.1) -> float:
    m = e.vis > 0
    if not m.any():
        raise UndefinedMetricError("PCK needs at least one visible keypoint")
    err = np.linalg.norm(e.pred[m] - e.gt[m], axis=-1)
    return 100.0 * float(np.count_nonzero(err <= threshold * e.norm_length)) / int(m.sum())


def iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def auc_from_curve(thresholds, values) -> float:
    t = np.asarray(thresholds, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if len(t) < 2:
        raise ValueError("need at least two thresholds")
    area = float(np.sum((t[1:] - t[:-1]) * (v[1:] + v[:-1]) / 2.0))
    return area / float(t[-1] - t[0])


def auc(e: KeypointEval, lo: float = 0.06, hi: float = 0.10, steps: int = 9) -> float:
    if steps < 2 or not hi > lo:
        raise ValueError("need steps >= 2 and hi > lo")
    ts = np.linspace(lo, hi, steps)
    return auc_from_curve(ts, [pck(e, t) for t in ts])


# ------------------------------------------------------------------ keypoint transfer


def keypoint_transfer(src_gt, src_vis, tgt_gt, tgt_vis, src_vertices_2d, src_vertex_vis, tgt_vertices_2d,
                      threshold: float = 0.1, norm_length: float | None = None) -> float:
    """PCK of source keypoints carried to the target through the nearest visible vertex.

    Keypoints must be visible in both images to be scored. The normaliser is
    taken from the target annotation.
    """
    src_gt = np.asarray(src_gt, dtype=np.float64)
    tgt_gt = np.asarray(tgt_gt, dtype=np.float64)
    sv = np.asarray(src_vertices_2d, dtype=np.float64)
    tv = np.asarray(tgt_vertices_2d, dtype=np.float64)
    cand = np.nonzero(np.asarray(src_vertex_vis) > 0)[0]
    if len(cand) == 0:
        raise UndefinedMetricError("no visible source vertices")
    both = (np.asarray(src_vis) > 0) & (np.asarray(tgt_vis) > 0)
    if not both.any():
        raise UndefinedMetricError("no keypoint is visible in both images")
    norm = norm_length_from_gt(tgt_gt, tgt_vis) if norm_length is None else norm_length
    if not norm > 0:
        raise UndefinedMetricError("normalisation length must be positive")
    _, nn = cKDTree(sv[cand]).query(src_gt[both])
    carried = tv[cand[np.atleast_1d(nn)]]
    err = np.linalg.norm(carried - tgt_gt[both], axis=-1)
    return 100.0 * float(np.count_nonzero(err <= threshold * norm)) / int(both.sum())


def mesh_vertex_visibility(vertices, faces, cam: CameraParams, cfg: RasterConfig = RasterConfig(),
                           radius: float = 1.0):
    """Projected vertices (V, 2) with per-vertex visibility flags."""
    ids = np.arange(len(vertices))
    return visible_landmarks(vertices, faces, ids, cam, cfg, radius=radius)


# ------------------------------------------------------------------ 3D comparison


def procrustes_transform(src, dst):
    """Scale, rotation and translation mapping ``src`` onto ``dst`` (no reflection)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3 or len(src) < 3:
        raise ValueError("procrustes needs two (N, 3) clouds with N >= 3")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    a, b = src - mu_s, dst - mu_d
    var_s = float((a * a).sum()) / len(src)
    cov = b.T @ a / len(src)
    u, d, vt = np.linalg.svd(cov)
    if var_s < 1e-300 or np.linalg.matrix_rank(a, tol=1e-12 * max(1.0, np.abs(a).max())) < 2:
        raise ValueError("degenerate source configuration")
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[-1] = -1.0
    R = u @ np.diag(sign) @ vt
    scale = float((d * sign).sum()) / var_s
    t = mu_d - scale * R @ mu_s
    return scale, R, t


def procrustes_align(src, dst) -> np.ndarray:
    scale, R, t = procrustes_transform(src, dst)
    return scale * np.asarray(src, dtype=np.float64) @ R.T + t


def chamfer_distance(a, b, to_mm: float = 1000.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("chamfer distance of an empty cloud")
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    ma, mb = float(np.mean(da)), float(np.mean(db))
    # order the sum so swapping the arguments is bit-identical
    lo, hi = min(ma, mb), max(ma, mb)
    return to_mm * 0.5 * (lo + hi)


def aligned_chamfer(pred_vertices, gt_vertices) -> float:
    return chamfer_distance(procrustes_align(pred_vertices, gt_vertices), gt_vertices)


# ------------------------------------------------------------------ fitting diagnostic


@dataclass(frozen=True)
class FitConfig:
    iters: int = 500
    lr: float = 0.01
    lr_end_ratio: float = 0.05
    lr_beta_scale: float = 0.1
    lr_cam_scale: float = 1.0
    sigma_start: float = 4.0
    sigma_end: float = 0.15
    anneal_fraction: float = 0.5
    w_kp: float = 1.0
    w_sil: float = 0.05
    w_prior: float = 1e-3
    gm_sigma: float = 100.0
    raster: RasterConfig = RasterConfig()


@dataclass
class FitResult:
    state: PoseShapeState
    cam: CameraParams
    loss: float
    best_iter: int
    history: list[float] = field(default_factory=list)


def fit_to_observation(assets: ModelAssets | BodyModel, gt_kp, gt_vis, gt_mask, init_state: PoseShapeState,
                       init_cam: CameraParams, iters: int | None = None, cfg: FitConfig = FitConfig(),
                       priors: GaussianPriors | None = None) -> FitResult:
    """Adam over (beta, theta, s, tx, ty) against keypoints and a mask.

    The silhouette sharpness is annealed from ``sigma_start`` to ``sigma_end``.
    The returned iterate is the best one under the final sharpness, with the
    initial guess included as a candidate.
    """
    n_iter = cfg.iters if iters is None else iters
    body = as_body_model(assets, torch.float64)
    dt = torch.float64
    kp_t = torch.as_tensor(np.asarray(gt_kp), dtype=dt)
    vis_t = torch.as_tensor(np.asarray(gt_vis), dtype=dt)
    mask = torch.as_tensor(np.asarray(gt_mask), dtype=dt)
    pri = priors or GaussianPriors.unit()
    bv = torch.as_tensor(pri.beta_var, dtype=dt)
    tm = torch.as_tensor(pri.theta_mean, dtype=dt)
    tv = torch.as_tensor(pri.theta_var, dtype=dt)

    beta = init_state.beta.detach().to(dt).clone().requires_grad_(True)
    th_g = init_state.theta_G.detach().to(dt).clone().requires_grad_(True)
    th_j = init_state.theta_J.detach().to(dt).clone().requires_grad_(True)
    # log-scale keeps s positive; translation is optimised directly
    log_s = torch.tensor(math.log(float(init_cam.s)), dtype=dt, requires_grad=True)
    txy = torch.tensor([float(init_cam.tx), float(init_cam.ty)], dtype=dt, requires_grad=True)
    opt = torch.optim.Adam([{"params": [beta], "lr": cfg.lr * cfg.lr_beta_scale},
                            {"params": [th_g, th_j], "lr": cfg.lr},
                            {"params": [log_s, txy], "lr": cfg.lr * cfg.lr_cam_scale}], lr=cfg.lr)
    lo = cfg.lr_end_ratio
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda i: lo + (1 - lo) * 0.5 * (1 + math.cos(math.pi * min(i, n_iter) / max(n_iter, 1))))
    n_anneal = max(1, int(round(cfg.anneal_fraction * n_iter)))
    lam2 = vis_t ** 2
    denom = float(lam2.sum())

    def objective(sigma: float):
        verts = body(beta, th_g, th_j, None)[0]
        cam = CameraParams(torch.exp(log_s), txy[0], txy[1], f=init_cam.f, r=init_cam.r)
        kp = project(verts[body.landmark_ids], cam)
        e2 = ((kp - kp_t) ** 2).sum(-1)
        g2 = cfg.gm_sigma ** 2
        l_kp = (lam2 * g2 * e2 / (g2 + e2)).sum() / denom if denom > 0 else verts.sum() * 0.0
        rc = RasterConfig(**{**cfg.raster.__dict__, "soft_sigma": sigma})
        sil = render_silhouette(verts, body.faces, cam, rc)
        l_sil = torch.nn.functional.smooth_l1_loss(sil, mask, reduction="sum", beta=1.0)
        l_pr = (beta * beta / bv).sum() + ((th_j.reshape(-1) - tm) ** 2 / tv).sum()
        return cfg.w_kp * l_kp + cfg.w_sil * l_sil + cfg.w_prior * l_pr

    def snapshot():
        return (beta.detach().clone(), th_g.detach().clone(), th_j.detach().clone(), float(torch.exp(log_s.detach())),
                float(txy[0].detach()), float(txy[1].detach()))

    with torch.no_grad():
        best_loss = float(objective(cfg.sigma_end))
    best, best_it = snapshot(), 0
    history = [best_loss]
    for it in range(1, n_iter + 1):
        k = min(it - 1, n_anneal) / n_anneal
        sigma = cfg.sigma_start * (cfg.sigma_end / cfg.sigma_start) ** k
        opt.zero_grad(set_to_none=True)
        loss = objective(sigma)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"fit diverged at iteration {it}")
        if k >= 1.0:
            # at the final sharpness the loss is the selection criterion for the pre-step iterate
            history.append(float(loss.detach()))
            if history[-1] < best_loss:
                best_loss, best, best_it = history[-1], snapshot(), it - 1
        loss.backward()
        opt.step()
        sched.step()
        with torch.no_grad():
            th_g.copy_(_wrap_aa(th_g))
            th_j.copy_(_wrap_aa(th_j))
    with torch.no_grad():
        last = float(objective(cfg.sigma_end))
    if last < best_loss:
        best_loss, best, best_it = last, snapshot(), n_iter
    b, g, j, s, tx, ty = best
    return FitResult(PoseShapeState(b, g, j, torch.zeros(3, dtype=dt)), CameraParams(s, tx, ty, init_cam.f, init_cam.r),
                     best_loss, best_it, history)


def _wrap_aa(aa: torch.Tensor) -> torch.Tensor:
    """Map axis-angle vectors with |aa| > pi to the equivalent short rotation."""
    flat = aa.reshape(-1, 3)
    ang = flat.norm(dim=-1, keepdim=True)
    over = ang > math.pi
    if not bool(over.any()):
        return aa
    unit = flat / ang.clamp(min=1e-12)
    wrapped = unit * (ang - 2 * math.pi)
    return torch.where(over, wrapped, flat).reshape(aa.shape)
