"""Regression network: backbone keys, feature extractors, iterative decoders.

Two variants share the backbone:

* ``DESSIE`` extracts three 640-d features (appearance, pose, global) with
  independent conv heads. The appearance decoder predicts shape, the pose
  decoder predicts joint rotations, and the global decoder predicts the global
  rotation plus the weak-perspective camera.
* ``DINOHMR`` extracts one feature and decodes all parameters with one decoder.

Every decoder refines its parameters residually for a fixed number of
iterations, starting from a constant initial estimate.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .archive import load_archive, save_archive
from .body_model import NUM_BETAS, NUM_POSE_JOINTS
from .camera import DEFAULT_FOCAL, DEFAULT_RESOLUTION, CameraParams, derive_translation

FEATURE_DIM = 640
CKPT_FORMAT = "dessie-ckpt/1"
S_FLOOR = 0.05
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class Variant(str, enum.Enum):
    DESSIE = "DESSIE"
    DINOHMR = "DINOHMR"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str):
            for m in cls:
                if m.value == value.upper():
                    return m
        return None


# ------------------------------------------------------------------ backbones


def to_batch(images, dtype=torch.float32) -> Tensor:
    """(H, W, 3) / (B, H, W, 3) arrays or (B, 3, H, W) tensors to (B, 3, H, W)."""
    x = torch.as_tensor(np.asarray(images) if not isinstance(images, Tensor) else images)
    x = x.to(dtype)
    if x.dim() == 3:
        x = x[None]
    if x.shape[-1] == 3 and x.shape[1] != 3:
        x = x.permute(0, 3, 1, 2)
    return x.contiguous()


class Backbone(nn.Module):
    """Interface: ``forward`` maps normalised images to a (B, C, H/stride, W/stride) grid."""

    patch_stride: int = 8
    out_channels: int = 0

    def normalize(self, x: Tensor) -> Tensor:
        mean = torch.tensor(IMAGENET_MEAN, dtype=x.dtype).view(1, 3, 1, 1)
        std = torch.tensor(IMAGENET_STD, dtype=x.dtype).view(1, 3, 1, 1)
        return (x - mean) / std


class StandInBackbone(Backbone):
    """Small trainable CNN with stride 8 and batch normalisation."""

    def __init__(self, channels: int = 64):
        super().__init__()
        self.out_channels = channels

        def block(cin, cout, k):
            return nn.Sequential(nn.Conv2d(cin, cout, k, stride=2, padding=k // 2), nn.BatchNorm2d(cout), nn.ReLU())

        self.body = nn.Sequential(block(3, 32, 5), block(32, 48, 3), block(48, 64, 3))
        self.c4 = nn.Conv2d(64 + 2, channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.c4(with_coords(self.body(x)))


def with_coords(h: Tensor) -> Tensor:
    """Append normalised x/y coordinate channels so pooled features can encode position."""
    b, _, gh, gw = h.shape
    ys = torch.linspace(-1, 1, gh, dtype=h.dtype).view(1, 1, gh, 1).expand(b, 1, gh, gw)
    xs = torch.linspace(-1, 1, gw, dtype=h.dtype).view(1, 1, 1, gw).expand(b, 1, gh, gw)
    return torch.cat([h, xs, ys], 1)


class ViTKeyBackbone(Backbone):
    """Adapter for a pretrained vision transformer (timm/DINO layout).

    The wrapped model must expose ``patch_embed`` (with ``patch_size``),
    ``blocks`` whose ``attn.qkv`` is a linear layer, and ``forward_features``
    or a plain call. Keys of the final block are captured with a forward hook.
    Only the last ``unfrozen`` blocks stay trainable.
    """

    def __init__(self, vit: nn.Module, unfrozen: int = 3, num_prefix_tokens: int = 1):
        super().__init__()
        self.vit = vit
        ps = vit.patch_embed.patch_size
        self.patch_stride = int(ps[0] if isinstance(ps, (tuple, list)) else ps)
        self.num_prefix_tokens = num_prefix_tokens
        last = vit.blocks[-1].attn
        self.num_heads = int(getattr(last, "num_heads", 1))
        self.out_channels = last.qkv.in_features
        for p in vit.parameters():
            p.requires_grad_(False)
        for blk in list(vit.blocks)[-unfrozen:] if unfrozen > 0 else []:
            for p in blk.parameters():
                p.requires_grad_(True)
        self._keys = None
        last.qkv.register_forward_hook(self._grab)

    def _grab(self, _module, _inp, out):
        self._keys = out

    def forward(self, x: Tensor) -> Tensor:
        b, _, h, w = x.shape
        fn = getattr(self.vit, "forward_features", self.vit)
        fn(x)
        qkv = self._keys
        self._keys = None
        c = self.out_channels
        k = qkv[..., c:2 * c]  # (B, tokens, C): the key slice of the fused projection
        k = k[:, self.num_prefix_tokens:]
        gh, gw = h // self.patch_stride, w // self.patch_stride
        return k.transpose(1, 2).reshape(b, c, gh, gw)


def backbone_keys(image, backbone: Backbone) -> Tensor:
    """Feature grid (B, C, H/stride, W/stride) for images in [0, 1]."""
    x = to_batch(image, dtype=next(backbone.parameters()).dtype)
    h, w = x.shape[-2:]
    if h % backbone.patch_stride or w % backbone.patch_stride:
        raise ValueError(f"image size {h}x{w} is not divisible by patch stride {backbone.patch_stride}")
    return backbone(backbone.normalize(x))


# ------------------------------------------------------------------ heads and decoders


class ExtractorHead(nn.Module):
    """Two stride-2 convs (batch-normalised), then a linear map of the whole spatial grid.

    The grid is pooled to a fixed ``readout`` x ``readout`` size and flattened
    rather than globally averaged. Global pooling left the features nearly
    blind to where the animal sits and how large it is, so the camera decoder
    learned to predict only the dataset mean.
    """

    def __init__(self, in_channels: int, out_dim: int = FEATURE_DIM, readout: int = 8):
        super().__init__()
        self.readout = readout
        self.conv1 = nn.Conv2d(in_channels + 2, 128, 3, stride=2, padding=1)
        self.norm1 = nn.BatchNorm2d(128)
        self.conv2 = nn.Conv2d(128, 32, 3, stride=2, padding=1)
        self.norm2 = nn.BatchNorm2d(32)
        self.fc = nn.Linear(32 * readout * readout, out_dim)

    def forward(self, grid: Tensor) -> Tensor:
        h = F.relu(self.norm1(self.conv1(with_coords(grid))))
        h = F.relu(self.norm2(self.conv2(h)))
        if h.shape[-2:] != (self.readout, self.readout):
            h = F.adaptive_avg_pool2d(h, self.readout)
        return self.fc(h.flatten(1))

    def zero_(self) -> "ExtractorHead":
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self


class ResidualDecoder(nn.Module):
    """fc -> ReLU -> dropout -> fc -> ReLU -> linear residual."""

    def __init__(self, feat_dim: int, param_dim: int, hidden: int = 1024, dropout: float = 0.5):
        super().__init__()
        self.fc1 = nn.Linear(feat_dim + param_dim, hidden)
        self.drop = nn.Dropout(dropout)
        self.fc2 = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, param_dim)
        nn.init.xavier_uniform_(self.out.weight, gain=0.01)
        nn.init.zeros_(self.out.bias)

    def forward(self, feat: Tensor, params: Tensor) -> Tensor:
        h = F.relu(self.fc1(torch.cat([feat, params], -1)))
        h = F.relu(self.fc2(self.drop(h)))
        return self.out(h)

    def zero_residual_(self) -> "ResidualDecoder":
        with torch.no_grad():
            self.out.weight.zero_()
            self.out.bias.zero_()
        return self


@dataclass
class FeatureTriple:
    gamma_A: Tensor
    gamma_P: Tensor
    gamma_G: Tensor


@dataclass
class Prediction:
    beta: Tensor  # (B, 9)
    theta_J: Tensor  # (B, 35, 3)
    theta_G: Tensor  # (B, 3)
    cam: Tensor  # (B, 3) = (s, tx, ty), s already floored
    xi: Tensor  # (B, 3)
    features: FeatureTriple | None = None
    f: float = DEFAULT_FOCAL
    r: int = DEFAULT_RESOLUTION

    @property
    def camera(self) -> CameraParams:
        return CameraParams(self.cam[..., 0], self.cam[..., 1], self.cam[..., 2], f=self.f, r=self.r)

    def theta(self) -> Tensor:
        """(B, 108): global rotation followed by the joint rotations."""
        return torch.cat([self.theta_G, self.theta_J.reshape(self.theta_J.shape[0], -1)], -1)

    def index(self, i) -> "Prediction":
        feats = None
        if self.features is not None:
            feats = FeatureTriple(self.features.gamma_A[i], self.features.gamma_P[i], self.features.gamma_G[i])
        return Prediction(self.beta[i], self.theta_J[i], self.theta_G[i], self.cam[i], self.xi[i], feats, self.f,
                          self.r)


def make_prediction(beta, theta_J, theta_G, cam_raw, features=None, f=DEFAULT_FOCAL, r=DEFAULT_RESOLUTION):
    """Assemble a prediction; the camera scale is floored so the depth stays finite."""
    s = cam_raw[..., 0].clamp(min=S_FLOOR)
    cam = torch.stack([s, cam_raw[..., 1], cam_raw[..., 2]], -1)
    xi = derive_translation(CameraParams(cam[..., 0], cam[..., 1], cam[..., 2], f=f, r=r))
    theta_J = theta_J.reshape(*beta.shape[:-1], NUM_POSE_JOINTS, 3)
    return Prediction(beta, theta_J, theta_G, cam, xi, features, f, r)


# parameter layout: beta(9) | theta_J(105) | theta_G(3) | cam(3)
_B, _J, _G = NUM_BETAS, NUM_BETAS + 3 * NUM_POSE_JOINTS, NUM_BETAS + 3 * NUM_POSE_JOINTS + 3
PARAM_DIM = _G + 3


def initial_params(s0: float = 0.8) -> Tensor:
    p = torch.zeros(PARAM_DIM)
    p[_G] = s0
    return p


class DessieNet(nn.Module):
    def __init__(self, variant: Variant | str = Variant.DESSIE, backbone: Backbone | None = None,
                 iterations: int = 3, hidden: int = 1024, dropout: float = 0.5, s0: float = 0.8):
        super().__init__()
        self.variant = Variant(variant)
        self.backbone = backbone if backbone is not None else StandInBackbone()
        self.iterations = iterations
        c = self.backbone.out_channels
        self.register_buffer("init_params", initial_params(s0))
        if self.variant is Variant.DESSIE:
            self.head_A, self.head_P, self.head_G = ExtractorHead(c), ExtractorHead(c), ExtractorHead(c)
            self.M_A = ResidualDecoder(FEATURE_DIM, _B, hidden, dropout)
            self.M_P = ResidualDecoder(FEATURE_DIM, _J - _B, hidden, dropout)
            self.M_G = ResidualDecoder(FEATURE_DIM, PARAM_DIM - _J, hidden, dropout)
        else:
            self.head = ExtractorHead(c)
            self.M = ResidualDecoder(FEATURE_DIM, PARAM_DIM, hidden, dropout)

    def set_initial_pose(self, theta_J_mean) -> None:
        """Start the iterative decoders from a given mean joint rotation."""
        with torch.no_grad():
            self.init_params[_B:_J] = torch.as_tensor(np.asarray(theta_J_mean), dtype=self.init_params.dtype).reshape(-1)

    # the three stages, exposed separately for probing
    def keys(self, images) -> Tensor:
        return backbone_keys(images, self.backbone)

    def extract_triple(self, grid: Tensor) -> FeatureTriple:
        return FeatureTriple(self.head_A(grid), self.head_P(grid), self.head_G(grid))

    def extract_single(self, grid: Tensor) -> Tensor:
        return self.head(grid)

    def decode_iterative(self, features: FeatureTriple | Tensor, init_params: Tensor | None = None,
                         iterations: int | None = None) -> Prediction:
        n_it = self.iterations if iterations is None else iterations
        feats = features if isinstance(features, FeatureTriple) else None
        ref = feats.gamma_A if feats is not None else features
        p0 = self.init_params if init_params is None else init_params
        p = p0.to(ref.dtype).expand(ref.shape[0], PARAM_DIM)
        if feats is not None:
            beta, joints, glob = p[:, :_B], p[:, _B:_J], p[:, _J:]
            for _ in range(n_it):
                beta = beta + self.M_A(feats.gamma_A, beta)
                joints = joints + self.M_P(feats.gamma_P, joints)
                glob = glob + self.M_G(feats.gamma_G, glob)
        else:
            for _ in range(n_it):
                p = p + self.M(features, p)
            beta, joints, glob = p[:, :_B], p[:, _B:_J], p[:, _J:]
        return make_prediction(beta, joints.reshape(-1, NUM_POSE_JOINTS, 3), glob[:, :3], glob[:, 3:], feats)

    def forward(self, images) -> Prediction:
        grid = self.keys(images)
        if self.variant is Variant.DESSIE:
            return self.decode_iterative(self.extract_triple(grid))
        return self.decode_iterative(self.extract_single(grid))

    def decoders(self) -> dict[str, nn.Module]:
        if self.variant is Variant.DESSIE:
            return {"M_A": self.M_A, "M_P": self.M_P, "M_G": self.M_G}
        return {"M": self.M}


# ------------------------------------------------------------------ checkpoints


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:12]


def save_checkpoint(path, net: DessieNet, config: dict | None = None, optimizer: torch.optim.Optimizer | None = None,
                    meta: dict | None = None) -> Path:
    arrays = {f"w/{k}": v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    opt_meta = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        for pid, st in sd["state"].items():
            for k, v in st.items():
                arrays[f"opt/{pid}/{k}"] = torch.as_tensor(v).detach().cpu().numpy()
        opt_meta = sd["param_groups"]
    extra = {
        "variant": net.variant.value,
        "config": config or {},
        "config_hash": config_hash(config or {}),
        "iterations": net.iterations,
        "optimizer_groups": opt_meta,
        "meta": meta or {},
    }
    return save_archive(path, arrays, CKPT_FORMAT, extra=extra)


def load_checkpoint(path, net: DessieNet | None = None, optimizer: torch.optim.Optimizer | None = None,
                    backbone: Backbone | None = None):
    """Restore weights (and optimiser state); returns (net, manifest meta)."""
    arrays, extra = load_archive(path, CKPT_FORMAT)
    if net is None:
        cfg = extra.get("config") or {}
        net = DessieNet(extra["variant"], backbone=backbone, iterations=extra.get("iterations", 3),
                        hidden=int(cfg.get("hidden", 1024)), dropout=float(cfg.get("dropout", 0.5)))
    if Variant(extra["variant"]) is not net.variant:
        raise ValueError(f"checkpoint variant {extra['variant']} does not match network {net.variant.value}")
    state = {k[2:]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("w/")}
    net.load_state_dict(state)
    if optimizer is not None and extra.get("optimizer_groups") is not None:
        st: dict = {}
        for k, v in arrays.items():
            if k.startswith("opt/"):
                _, pid, name = k.split("/", 2)
                st.setdefault(int(pid), {})[name] = torch.as_tensor(v)
        optimizer.load_state_dict({"state": st, "param_groups": extra["optimizer_groups"]})
    return net, extra
