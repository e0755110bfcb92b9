"""Weak-perspective camera realised as a perspective camera at derived depth.

A scale ``s`` and image-plane offsets ``(tx, ty)`` become the translation
``xi = [tx, ty, 2 f / (r s)]`` that places the body in front of a pinhole
camera with focal length ``f`` and principal point at the image centre.
Pixel origin is the top-left corner, ``v`` grows downwards, and pixel ``i``
spans ``[i, i + 1)`` so its centre is at ``i + 0.5``.

Values may be Python floats, numpy arrays or torch tensors; torch inputs keep
their autograd graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
import torch
from torch import Tensor

DEFAULT_FOCAL = 5000.0
DEFAULT_RESOLUTION = 256


class InvalidCameraError(ValueError):
    pass


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True)
class CameraParams:
    s: Any
    tx: Any = 0.0
    ty: Any = 0.0
    f: float = DEFAULT_FOCAL
    r: int = DEFAULT_RESOLUTION

    def __post_init__(self):
        if not self.f > 0 or not self.r > 0:
            raise InvalidCameraError(f"focal length and resolution must be positive (f={self.f}, r={self.r})")
        with torch.no_grad():
            s = torch.as_tensor(self.s)
            if not bool(torch.all(s > 0)):
                raise InvalidCameraError(f"camera scale must be positive, got {self.s}")

    @property
    def pixels_per_unit(self):
        """Image-space magnification at depth ``xi_z`` (equals ``r s / 2``)."""
        return self.r * self.s / 2

    def as_tensor(self, dtype=torch.float64) -> Tensor:
        """Stack ``(s, tx, ty)`` into a tensor with a trailing axis of 3."""
        parts = [torch.as_tensor(v, dtype=dtype) if not isinstance(v, Tensor) else v for v in (self.s, self.tx, self.ty)]
        parts = torch.broadcast_tensors(*parts)
        return torch.stack(parts, dim=-1)

    @classmethod
    def from_tensor(cls, t: Tensor, f: float = DEFAULT_FOCAL, r: int = DEFAULT_RESOLUTION) -> "CameraParams":
        return cls(t[..., 0], t[..., 1], t[..., 2], f=f, r=r)

    def detached(self) -> "CameraParams":
        conv = lambda v: float(v) if np.ndim(v) == 0 else np.asarray(torch.as_tensor(v).detach())  # noqa: E731
        return CameraParams(conv(self.s), conv(self.tx), conv(self.ty), f=self.f, r=self.r)


def _any_tensor(*vals):
    for v in vals:
        if isinstance(v, Tensor):
            return v
    return None


def derive_translation(cam: CameraParams) -> Tensor:
    """Return ``[tx, ty, 2 f / (r s)]`` (shape ``(..., 3)``)."""
    ref = _any_tensor(cam.s, cam.tx, cam.ty)
    dtype = ref.dtype if ref is not None and ref.is_floating_point() else torch.float64
    s, tx, ty = (v if isinstance(v, Tensor) else torch.as_tensor(v, dtype=dtype) for v in (cam.s, cam.tx, cam.ty))
    with torch.no_grad():
        if not bool(torch.all(s > 0)):
            raise InvalidCameraError(f"camera scale must be positive, got {s}")
    s, tx, ty = torch.broadcast_tensors(s, tx, ty)
    # scalar / tensor goes through a reciprocal in torch; divide two tensors to round once
    depth = torch.full_like(s, 2.0 * cam.f) / (cam.r * s)
    return torch.stack([tx, ty, depth], dim=-1)


def project(points, cam: CameraParams) -> Tensor:
    """Perspective projection of ``(..., N, 3)`` model-space points to pixels.

    A batched camera (entries of shape ``(B,)``) pairs with points of shape
    ``(B, N, 3)``.
    """
    xi = derive_translation(cam)
    points = torch.as_tensor(points, dtype=xi.dtype) if not isinstance(points, Tensor) else points
    p = points + xi[..., None, :].to(points.dtype)
    z = p[..., 2:3]
    with torch.no_grad():
        if p.numel() and not bool(torch.all(z > 0)):
            raise BehindCameraError("a point lies on or behind the camera plane")
    return cam.f * p[..., :2] / z + cam.r / 2.0


def camera_depth(points, cam: CameraParams) -> Tensor:
    """Depth of points along the optical axis after translation."""
    xi = derive_translation(cam)
    points = torch.as_tensor(points, dtype=xi.dtype) if not isinstance(points, Tensor) else points
    return points[..., 2] + xi[..., None, 2].to(points.dtype)
