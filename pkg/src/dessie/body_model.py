"""Parametric articulated quadruped: shape blendshapes, kinematic tree, LBS.

The model follows the SMPL-family recipe: a template mesh is deformed by a
linear PCA shape basis, joints are regressed from the shaped mesh, and the
shaped mesh is posed by linear blend skinning with per-joint axis-angle
rotations composed down a kinematic tree rooted at joint 0.

Coordinate convention of the shipped stand-in: ``+x`` points from tail to
head, ``+y`` points *down* (so it agrees with image rows), ``z`` is lateral.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from torch import Tensor

from .archive import ArchiveError, load_archive, save_archive

NUM_BETAS = 9
NUM_JOINTS = 36
NUM_POSE_JOINTS = NUM_JOINTS - 1
NUM_LANDMARKS = 17
NUM_PARAMS = NUM_BETAS + 3 + 3 * NUM_POSE_JOINTS + 3

ASSET_FORMAT = "dessie-assets/1"

# Ordering follows the 17-point animal keypoint layout used by ViTPose+ (AP-10K).
LANDMARK_NAMES = (
    "left_eye", "right_eye", "nose", "neck", "tail_root",
    "left_shoulder", "left_elbow", "left_front_paw",
    "right_shoulder", "right_elbow", "right_front_paw",
    "left_hip", "left_knee", "left_back_paw",
    "right_hip", "right_knee", "right_back_paw",
)

ASSET_ARRAYS = (
    "template_vertices", "faces", "shape_basis", "joint_regressor",
    "skin_weights", "parent", "landmark_vertex_ids", "uv_coords",
)


class AssetError(ArchiveError):
    """Invalid or inconsistent model assets; ``field`` names the culprit."""


@dataclass(frozen=True, eq=False)
class ModelAssets:
    """Everything needed to evaluate the model. Arrays are treated as immutable.

    ``parent[0]`` is -1 (no parent).
    """

    template_vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3)
    shape_basis: np.ndarray  # (9, V, 3)
    joint_regressor: np.ndarray  # (36, V)
    skin_weights: np.ndarray  # (V, 36)
    parent: np.ndarray  # (36,)
    landmark_vertex_ids: np.ndarray  # (17,)
    uv_coords: np.ndarray  # (V, 2)
    joint_names: tuple[str, ...] = ()

    @property
    def num_vertices(self) -> int:
        return int(self.template_vertices.shape[0])

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in ASSET_ARRAYS}

    def validate(self) -> "ModelAssets":
        """Check shapes and invariants; raises :class:`AssetError`."""
        nv = self.template_vertices.shape[0] if self.template_vertices.ndim == 2 else -1
        expected = {
            "template_vertices": (nv, 3),
            "faces": (None, 3),
            "shape_basis": (NUM_BETAS, nv, 3),
            "joint_regressor": (NUM_JOINTS, nv),
            "skin_weights": (nv, NUM_JOINTS),
            "parent": (NUM_JOINTS,),
            "landmark_vertex_ids": (NUM_LANDMARKS,),
            "uv_coords": (nv, 2),
        }
        if nv < 0:
            raise AssetError("template_vertices must be (V, 3)", field="template_vertices")
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.ndim != len(shape) or any(s is not None and s != a for s, a in zip(shape, arr.shape)):
                raise AssetError(f"{name} has shape {arr.shape}, expected {shape}", field=name)
            if not np.all(np.isfinite(arr)):
                raise AssetError(f"{name} contains non-finite values", field=name)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= nv):
            raise AssetError("faces reference missing vertices", field="faces")
        w = self.skin_weights
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-6):
            raise AssetError("skin_weights rows must be non-negative and sum to 1", field="skin_weights")
        if np.any(np.abs(self.joint_regressor.sum(axis=1) - 1.0) > 1e-6):
            raise AssetError("joint_regressor rows must sum to 1", field="joint_regressor")
        parent = self.parent
        if parent[0] != -1 or any(not (0 <= parent[j] < j) for j in range(1, NUM_JOINTS)):
            raise AssetError("parent must encode a tree rooted at 0 with parent[j] < j", field="parent")
        ids = self.landmark_vertex_ids
        if ids.min() < 0 or ids.max() >= nv or len(set(ids.tolist())) != NUM_LANDMARKS:
            raise AssetError("landmark_vertex_ids must be distinct valid vertex indices",
                             field="landmark_vertex_ids")
        if np.any(self.uv_coords < 0) or np.any(self.uv_coords > 1):
            raise AssetError("uv_coords must lie in [0, 1]", field="uv_coords")
        return self


def save_assets(assets: ModelAssets, path: str | Path) -> Path:
    manifest = {
        "landmarks": {name: int(v) for name, v in zip(LANDMARK_NAMES, assets.landmark_vertex_ids)},
        "joint_names": list(assets.joint_names),
    }
    return save_archive(path, assets.arrays(), ASSET_FORMAT, extra=manifest)


def load_assets(path: str | Path) -> ModelAssets:
    """Load a ``dessie-assets/1`` archive (e.g. a converted hSMAL model)."""
    try:
        arrays, meta = load_archive(path, ASSET_FORMAT)
    except ArchiveError as exc:
        raise AssetError(str(exc), field=exc.field) from exc
    for name in ASSET_ARRAYS:
        if name not in arrays:
            raise AssetError(f"{path}: missing array {name}", field=name)
    kwargs = {name: arrays[name] for name in ASSET_ARRAYS}
    kwargs["faces"] = kwargs["faces"].astype(np.int64)
    kwargs["parent"] = kwargs["parent"].astype(np.int64)
    kwargs["landmark_vertex_ids"] = kwargs["landmark_vertex_ids"].astype(np.int64)
    return ModelAssets(**kwargs, joint_names=tuple(meta.get("joint_names", ()))).validate()


def assets_equal(a: ModelAssets, b: ModelAssets) -> bool:
    return all(
        getattr(a, f.name).dtype == getattr(b, f.name).dtype and np.array_equal(getattr(a, f.name), getattr(b, f.name))
        for f in fields(ModelAssets) if f.name in ASSET_ARRAYS
    )


@dataclass
class PoseShapeState:
    """Model parameters. Tensors may carry a leading batch dimension."""

    beta: Tensor
    theta_G: Tensor
    theta_J: Tensor
    xi: Tensor

    def __post_init__(self):
        self.beta = torch.as_tensor(self.beta)
        dtype = self.beta.dtype if self.beta.is_floating_point() else torch.float64
        self.beta = self.beta.to(dtype)
        self.theta_G = torch.as_tensor(self.theta_G, dtype=dtype)
        self.theta_J = torch.as_tensor(self.theta_J, dtype=dtype)
        self.xi = torch.as_tensor(self.xi, dtype=dtype)
        if self.beta.shape[-1] != NUM_BETAS or self.theta_G.shape[-1] != 3 or self.xi.shape[-1] != 3 \
                or tuple(self.theta_J.shape[-2:]) != (NUM_POSE_JOINTS, 3):
            raise ValueError("PoseShapeState: bad parameter shapes")
        with torch.no_grad():
            for name in ("beta", "theta_G", "theta_J", "xi"):
                if not torch.isfinite(getattr(self, name)).all():
                    raise ValueError(f"PoseShapeState.{name} has non-finite entries")
            angles = torch.cat([self.theta_G.reshape(-1, 3), self.theta_J.reshape(-1, 3)]).norm(dim=-1)
            if (angles >= 2 * np.pi).any():
                raise ValueError("axis-angle magnitude must be < 2*pi")

    @classmethod
    def zeros(cls, dtype=torch.float64, batch: tuple[int, ...] = ()) -> "PoseShapeState":
        return cls(
            torch.zeros(*batch, NUM_BETAS, dtype=dtype),
            torch.zeros(*batch, 3, dtype=dtype),
            torch.zeros(*batch, NUM_POSE_JOINTS, 3, dtype=dtype),
            torch.zeros(*batch, 3, dtype=dtype),
        )

    def flat(self) -> Tensor:
        """Concatenate (beta, theta_G, theta_J, xi) into one vector of 120 values."""
        lead = self.beta.shape[:-1]
        return torch.cat([self.beta, self.theta_G, self.theta_J.reshape(*lead, -1), self.xi], dim=-1)

    @classmethod
    def from_flat(cls, v: Tensor) -> "PoseShapeState":
        lead = v.shape[:-1]
        b, g = NUM_BETAS, NUM_BETAS + 3
        j = g + 3 * NUM_POSE_JOINTS
        return cls(v[..., :b], v[..., b:g], v[..., g:j].reshape(*lead, NUM_POSE_JOINTS, 3), v[..., j:])


def _skew(v: Tensor) -> Tensor:
    zero = torch.zeros_like(v[..., 0])
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    return torch.stack([
        torch.stack([zero, -z, y], dim=-1),
        torch.stack([z, zero, -x], dim=-1),
        torch.stack([-y, x, zero], dim=-1),
    ], dim=-2)


def rodrigues(aa) -> Tensor:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3).

    Uses ``R = I + A K + B K^2`` with the unnormalised skew matrix ``K`` so the
    map (and its gradient) stays well defined at the zero rotation.
    """
    aa = torch.as_tensor(aa)
    if not aa.is_floating_point():
        aa = aa.to(torch.float64)
    t2 = (aa * aa).sum(-1)
    small = t2 < 1e-6
    t2_safe = torch.where(small, torch.ones_like(t2), t2)
    t = torch.sqrt(t2_safe)
    a = torch.where(small, 1 - t2 / 6 + t2 * t2 / 120, torch.sin(t) / t)
    b = torch.where(small, 0.5 - t2 / 24 + t2 * t2 / 720, (1 - torch.cos(t)) / t2_safe)
    k = _skew(aa)
    eye = torch.eye(3, dtype=aa.dtype, device=aa.device).expand(k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def matrix_to_axis_angle(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rodrigues` for a single 3x3 matrix (numpy, angle in [0, pi])."""
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R) - 1) / 2, -1.0, 1.0)
    angle = np.arccos(cos)
    if angle < 1e-8:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2
    if np.pi - angle < 1e-4:
        # near pi the antisymmetric part vanishes; use the symmetric part
        sym = (R + np.eye(3)) / 2
        axis = np.sqrt(np.clip(np.diag(sym), 0, None))
        i = int(np.argmax(axis))
        axis = sym[i] / axis[i]
        axis /= np.linalg.norm(axis)
        return axis * angle
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return w / (2 * np.sin(angle)) * angle


class BodyModel(nn.Module):
    """Differentiable evaluation of :class:`ModelAssets` (batched)."""

    def __init__(self, assets: ModelAssets, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.assets = assets
        self.parents = [int(p) for p in assets.parent]
        self.register_buffer("v_template", torch.as_tensor(assets.template_vertices, dtype=dtype))
        self.register_buffer("shapedirs", torch.as_tensor(assets.shape_basis, dtype=dtype))
        self.register_buffer("J_regressor", torch.as_tensor(assets.joint_regressor, dtype=dtype))
        self.register_buffer("weights", torch.as_tensor(assets.skin_weights, dtype=dtype))
        self.register_buffer("faces", torch.as_tensor(assets.faces, dtype=torch.int64))
        self.register_buffer("landmark_ids", torch.as_tensor(assets.landmark_vertex_ids, dtype=torch.int64))

    def shaped(self, beta: Tensor) -> Tensor:
        return self.v_template + torch.einsum("...k,kvc->...vc", beta, self.shapedirs)

    def rest_joints(self, beta: Tensor) -> Tensor:
        return torch.einsum("jv,...vc->...jc", self.J_regressor, self.shaped(beta))

    def kinematics(self, beta, theta_G, theta_J, xi=None):
        """Posed joints (B, 36, 3) and skinning transforms (B, 36, 4, 4)."""
        beta = beta.reshape(-1, NUM_BETAS)
        bsz = beta.shape[0]
        rots = rodrigues(torch.cat([theta_G.reshape(bsz, 1, 3), theta_J.reshape(bsz, NUM_POSE_JOINTS, 3)], 1))
        J = self.rest_joints(beta)
        world_R = [rots[:, 0]]
        world_p = [J[:, 0]]
        for j in range(1, NUM_JOINTS):
            p = self.parents[j]
            world_R.append(world_R[p] @ rots[:, j])
            world_p.append((world_R[p] @ (J[:, j] - J[:, p])[..., None])[..., 0] + world_p[p])
        R = torch.stack(world_R, 1)
        posed = torch.stack(world_p, 1)
        if xi is not None:
            posed = posed + xi.reshape(bsz, 1, 3)
        t = posed - (R @ J[..., None])[..., 0]
        top = torch.cat([R, t[..., None]], dim=-1)
        bottom = torch.zeros_like(top[..., :1, :])
        bottom[..., 0, 3] = 1
        return posed, torch.cat([top, bottom], dim=-2)

    def forward(self, beta, theta_G, theta_J, xi=None) -> Tensor:
        """Posed vertices (B, V, 3)."""
        beta = beta.reshape(-1, NUM_BETAS)
        _, A = self.kinematics(beta, theta_G, theta_J, xi)
        v = self.shaped(beta)
        R = torch.einsum("vj,bjcd->bvcd", self.weights, A[..., :3, :3])
        t = torch.einsum("vj,bjc->bvc", self.weights, A[..., :3, 3])
        return (R @ v[..., None])[..., 0] + t


@lru_cache(maxsize=8)
def _cached_model(assets: ModelAssets, dtype: torch.dtype) -> BodyModel:
    return BodyModel(assets, dtype=dtype)


def as_body_model(model: ModelAssets | BodyModel, dtype: torch.dtype = torch.float64) -> BodyModel:
    if isinstance(model, BodyModel):
        return model
    return _cached_model(model, dtype)


def _unbatch(x: Tensor, batched: bool) -> Tensor:
    return x if batched else x[0]


def forward_kinematics(model: ModelAssets | BodyModel, state: PoseShapeState) -> tuple[Tensor, Tensor]:
    """Posed joint positions (36, 3) and world transforms (36, 4, 4).

    Batched states give batched outputs. The transforms map shaped rest-pose
    points to posed points (identity at the rest pose).
    """
    body = as_body_model(model, state.beta.dtype)
    batched = state.beta.dim() > 1
    joints, A = body.kinematics(state.beta, state.theta_G, state.theta_J, state.xi)
    return _unbatch(joints, batched), _unbatch(A, batched)


def pose_mesh(model: ModelAssets | BodyModel, state: PoseShapeState) -> Tensor:
    body = as_body_model(model, state.beta.dtype)
    batched = state.beta.dim() > 1
    return _unbatch(body(state.beta, state.theta_G, state.theta_J, state.xi), batched)


def landmarks_3d(model: ModelAssets | BodyModel, vertices: Tensor) -> Tensor:
    ids = model.landmark_ids if isinstance(model, BodyModel) else torch.as_tensor(model.landmark_vertex_ids)
    return vertices[..., ids, :]
