"""Silhouette and colour rendering of triangle meshes.

The differentiable silhouette is a soft rasterizer. Each face contributes a
logit ``x = +-d^2 / sigma^2`` at a pixel and the pixel takes the strongest
face, ``sigmoid(max_f x_f)``. Outside a face ``d`` is the distance to the
face. Inside, ``d`` is the distance to the outline of the face's *patch*: the
set of faces joined through seams, i.e. shared edges whose two faces project
to opposite sides. A surface split into many triangles therefore shows no
seams, the field is continuous as pixels cross from one face to the next, and
the 0.5 level set is the outline of the projected mesh. Distances are capped
at ``sqrt(cutoff) * sigma``.

The hard rasterizer is a plain z-buffer over pixel centres and provides the
face-index map used for texturing and landmark visibility.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
import torch
from scipy import ndimage, sparse
from scipy.sparse import csgraph
from torch import Tensor

from .camera import CameraParams, camera_depth, project

NONE = -1


@dataclass(frozen=True)
class RasterConfig:
    resolution: int = 256
    soft_sigma: float = 1.0
    # soft_gamma and faces_per_pixel are accepted for interface parity with
    # blend-based soft rasterizers; max aggregation uses one face per pixel.
    soft_gamma: float = 1e-4
    faces_per_pixel: int = 16
    cutoff: float = 12.0  # faces are ignored beyond sqrt(cutoff) * sigma

    def __post_init__(self):
        if self.resolution <= 0 or self.soft_sigma <= 0 or self.faces_per_pixel < 1 or self.cutoff <= 0:
            raise ValueError(f"invalid raster config {self}")


@dataclass
class RenderOutput:
    silhouette: np.ndarray  # (r, r) soft occupancy in [0, 1]
    face_index_map: np.ndarray  # (r, r) int, NONE where empty
    rgb: np.ndarray | None = None  # (r, r, 3)
    depth: np.ndarray | None = field(default=None, repr=False)

    @property
    def hard_mask(self) -> np.ndarray:
        return self.silhouette > 0.5


def _faces_array(faces) -> np.ndarray:
    f = np.asarray(faces.detach().cpu() if isinstance(faces, Tensor) else faces, dtype=np.int64)
    return f.reshape(-1, 3)


def _pixel_pairs(tri: np.ndarray, r: int, margin: float):
    """All (face, pixel) pairs whose pixel centre lies in the face's padded bbox."""
    lo = tri.min(axis=1) - margin
    hi = tri.max(axis=1) + margin
    x0 = np.clip(np.ceil(lo[:, 0] - 0.5), 0, r).astype(np.int64)
    y0 = np.clip(np.ceil(lo[:, 1] - 0.5), 0, r).astype(np.int64)
    x1 = np.clip(np.floor(hi[:, 0] - 0.5), -1, r - 1).astype(np.int64)
    y1 = np.clip(np.floor(hi[:, 1] - 0.5), -1, r - 1).astype(np.int64)
    w = np.maximum(x1 - x0 + 1, 0)
    h = np.maximum(y1 - y0 + 1, 0)
    counts = w * h
    fidx = np.repeat(np.arange(len(tri)), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(counts.sum()) - start
    ww = w[fidx]
    px = x0[fidx] + local % np.maximum(ww, 1)
    py = y0[fidx] + local // np.maximum(ww, 1)
    return fidx, px, py


def _interior_edges(faces: np.ndarray, tri2d: np.ndarray):
    """Seam edges: shared by exactly two faces that project to opposite sides of it.

    Returns ``(flags, f1, f2)`` where ``flags[f, k]`` marks edge k (opposite
    vertex k) of face f and ``(f1[i], f2[i])`` are the face pairs joined by seams.
    """
    nf = len(faces)
    # edge k of a face joins vertices (k+1, k+2)
    a = faces[:, [1, 2, 0]]
    b = faces[:, [2, 0, 1]]
    key = np.sort(np.stack([a, b], -1).reshape(-1, 2), axis=1)
    order = np.lexsort((key[:, 1], key[:, 0]))
    ks = key[order]
    same = np.all(ks[1:] == ks[:-1], axis=1)
    run_start = np.concatenate([[True], ~same])
    run_id = np.cumsum(run_start) - 1
    run_len = np.bincount(run_id)
    flags = np.zeros(nf * 3, dtype=bool)
    first = np.nonzero(same & (run_len[run_id[1:]] == 2))[0]
    e1, e2 = order[first], order[first + 1]
    f1, k1 = e1 // 3, e1 % 3
    f2, k2 = e2 // 3, e2 % 3
    pa, pb = tri2d[f1, (k1 + 1) % 3], tri2d[f1, (k1 + 2) % 3]
    o1, o2 = tri2d[f1, k1], tri2d[f2, k2]
    d = pb - pa
    s1 = d[:, 0] * (o1 - pa)[:, 1] - d[:, 1] * (o1 - pa)[:, 0]
    s2 = d[:, 0] * (o2 - pa)[:, 1] - d[:, 1] * (o2 - pa)[:, 0]
    seam = s1 * s2 < 0
    flags[e1[seam]] = True
    flags[e2[seam]] = True
    return flags.reshape(nf, 3), f1[seam], f2[seam]


def _patches(faces: np.ndarray, tri2d: np.ndarray):
    """Group faces joined by seams into patches and list each patch's outline segments.

    Returns ``(seam, face_order, face_start, seg_vid, seg_start)``: faces of
    patch c are ``face_order[face_start[c]:face_start[c + 1]]`` and its outline
    segments (vertex id pairs) are ``seg_vid[seg_start[c]:seg_start[c + 1]]``.
    """
    nf = len(faces)
    seam, f1, f2 = _interior_edges(faces, tri2d)
    adj = sparse.coo_matrix((np.ones(len(f1)), (f1, f2)), shape=(nf, nf))
    n_patch, label = csgraph.connected_components(adj, directed=False)
    face_order = np.argsort(label, kind="stable")
    face_start = np.searchsorted(label[face_order], np.arange(n_patch + 1))
    fk = np.nonzero(~seam)
    seg_vid = np.stack([faces[fk[0], (fk[1] + 1) % 3], faces[fk[0], (fk[1] + 2) % 3]], -1)
    seg_label = label[fk[0]]
    so = np.argsort(seg_label, kind="stable")
    seg_vid, seg_label = seg_vid[so], seg_label[so]
    seg_start = np.searchsorted(seg_label, np.arange(n_patch + 1))
    return seam, face_order, face_start, seg_vid, seg_start


def _seg_dist2(p, a, b, clip):
    ab = b - a
    t = ((p - a) * ab).sum(-1) / clip((ab * ab).sum(-1), 1e-12, None)
    q = a + clip(t, 0.0, 1.0)[..., None] * ab
    return ((p - q) ** 2).sum(-1)


@numba.njit(cache=True)
def _nb_seg_dist2(qx, qy, ux, uy, vx, vy):
    ex, ey = vx - ux, vy - uy
    t = ((qx - ux) * ex + (qy - uy) * ey) / max(ex * ex + ey * ey, 1e-12)
    t = min(max(t, 0.0), 1.0)
    dx, dy = qx - ux - t * ex, qy - uy - t * ey
    return dx * dx + dy * dy


@numba.njit(cache=True)
def _best_face_kernel(tri, seam, face_order, face_start, seg, seg_start, r, sigma2, cap, margin):
    """Per pixel: the face with the largest logit, whether the pixel is inside it,
    and the outline segment that sets the inside distance (-1 when capped).

    Inside a face the logit is the squared distance to the outline of the
    face's patch, so it is continuous across seams; outside it is minus the
    squared distance to the face.
    """
    n = r * r
    best_x = np.full(n, -np.inf)
    best_f = np.full(n, -1, dtype=np.int64)
    best_in = np.zeros(n, dtype=np.bool_)
    best_s = np.full(n, -1, dtype=np.int64)
    dist = np.full(n, cap)
    arg = np.full(n, -1, dtype=np.int64)
    for c in range(len(face_start) - 1):
        for s in range(seg_start[c], seg_start[c + 1]):
            ux, uy, vx, vy = seg[s, 0], seg[s, 1], seg[s, 2], seg[s, 3]
            x0 = max(int(np.ceil(min(ux, vx) - margin - 0.5)), 0)
            x1 = min(int(np.floor(max(ux, vx) + margin - 0.5)), r - 1)
            y0 = max(int(np.ceil(min(uy, vy) - margin - 0.5)), 0)
            y1 = min(int(np.floor(max(uy, vy) + margin - 0.5)), r - 1)
            for py in range(y0, y1 + 1):
                for px in range(x0, x1 + 1):
                    d2 = _nb_seg_dist2(px + 0.5, py + 0.5, ux, uy, vx, vy)
                    pid = py * r + px
                    if d2 < dist[pid]:
                        dist[pid] = d2
                        arg[pid] = s
        for i in range(face_start[c], face_start[c + 1]):
            f = face_order[i]
            ax, ay = tri[f, 0, 0], tri[f, 0, 1]
            bx, by = tri[f, 1, 0], tri[f, 1, 1]
            cx, cy = tri[f, 2, 0], tri[f, 2, 1]
            area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
            x0 = max(int(np.ceil(min(ax, bx, cx) - margin - 0.5)), 0)
            x1 = min(int(np.floor(max(ax, bx, cx) + margin - 0.5)), r - 1)
            y0 = max(int(np.ceil(min(ay, by, cy) - margin - 0.5)), 0)
            y1 = min(int(np.floor(max(ay, by, cy) + margin - 0.5)), r - 1)
            for py in range(y0, y1 + 1):
                qy = py + 0.5
                for px in range(x0, x1 + 1):
                    qx = px + 0.5
                    inside = abs(area) > 1e-12
                    d_all = np.inf
                    for k in range(3):
                        ux, uy = tri[f, (k + 1) % 3, 0], tri[f, (k + 1) % 3, 1]
                        vx, vy = tri[f, (k + 2) % 3, 0], tri[f, (k + 2) % 3, 1]
                        side = ((vx - ux) * (qy - uy) - (vy - uy) * (qx - ux)) * area
                        # a pixel centre lying exactly on a seam belongs to both faces
                        if inside and (side < 0 or (side == 0 and not seam[f, k])):
                            inside = False
                        d_all = min(d_all, _nb_seg_dist2(qx, qy, ux, uy, vx, vy))
                    pid = py * r + px
                    x = dist[pid] / sigma2 if inside else -d_all / sigma2
                    if x > best_x[pid]:
                        best_x[pid] = x
                        best_f[pid] = f
                        best_in[pid] = inside
                        best_s[pid] = arg[pid] if inside else -1
        for s in range(seg_start[c], seg_start[c + 1]):
            ux, uy, vx, vy = seg[s, 0], seg[s, 1], seg[s, 2], seg[s, 3]
            x0 = max(int(np.ceil(min(ux, vx) - margin - 0.5)), 0)
            x1 = min(int(np.floor(max(ux, vx) + margin - 0.5)), r - 1)
            y0 = max(int(np.ceil(min(uy, vy) - margin - 0.5)), 0)
            y1 = min(int(np.floor(max(uy, vy) + margin - 0.5)), r - 1)
            for py in range(y0, y1 + 1):
                for px in range(x0, x1 + 1):
                    dist[py * r + px] = cap
                    arg[py * r + px] = -1
    return best_x, best_f, best_in, best_s


def render_silhouette(vertices, faces, cam: CameraParams, cfg: RasterConfig = RasterConfig()) -> Tensor:
    """Soft occupancy map of shape ``(r, r)``, differentiable in vertices and camera."""
    r = cfg.resolution
    faces = _faces_array(faces)
    verts = torch.as_tensor(vertices) if not isinstance(vertices, Tensor) else vertices
    if not verts.is_floating_point():
        verts = verts.to(torch.float64)
    if len(faces) == 0:
        return torch.zeros(r, r, dtype=verts.dtype)
    # canonical face order makes the output independent of how faces are listed
    faces = faces[np.lexsort(faces.T[::-1])]
    pix = project(verts, cam)
    pix_np = pix.detach().cpu().double().numpy()
    tri = pix_np[faces]  # (F, 3, 2)
    sigma2 = cfg.soft_sigma ** 2
    cap = cfg.cutoff * sigma2
    seam, face_order, face_start, seg_vid, seg_start = _patches(faces, tri)
    seg = pix_np[seg_vid].reshape(-1, 4)
    best_x, best_f, best_in, best_s = _best_face_kernel(tri, seam, face_order, face_start, seg, seg_start, r,
                                                        sigma2, cap, math.sqrt(cap))

    # differentiate only the selected (pixel, face) pairs
    pid = np.nonzero(best_x > -cfg.cutoff)[0]
    fsel, inside, ssel = best_f[pid], best_in[pid], best_s[pid]
    p = torch.as_tensor(np.stack([pid % r + 0.5, pid // r + 0.5], -1), dtype=pix.dtype)
    t = pix[torch.as_tensor(faces[fsel])]
    d_out = torch.stack([_seg_dist2(p, t[:, (k + 1) % 3], t[:, (k + 2) % 3], torch.clamp) for k in range(3)],
                        -1).min(-1).values
    sv = torch.as_tensor(seg_vid[np.maximum(ssel, 0)]) if len(seg_vid) else torch.zeros(len(pid), 2, dtype=torch.long)
    d_in = torch.where(torch.as_tensor(ssel >= 0), _seg_dist2(p, pix[sv[:, 0]], pix[sv[:, 1]], torch.clamp),
                       torch.full_like(d_out, cap)).clamp(max=cap)
    x = torch.where(torch.as_tensor(inside), d_in, -d_out) / sigma2
    out = torch.zeros(r * r, dtype=pix.dtype)
    return out.index_put((torch.as_tensor(pid),), torch.sigmoid(x)).reshape(r, r)


def _cross(u, v):
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def rasterize(vertices, faces, cam: CameraParams, resolution: int = 256):
    """Z-buffer over pixel centres.

    Returns ``(face_index_map, bary, depth)`` where ``bary`` holds
    perspective-correct barycentric weights of the visible face.
    """
    r = resolution
    faces = _faces_array(faces)
    face_map = np.full((r, r), NONE, dtype=np.int64)
    bary = np.zeros((r, r, 3))
    depth = np.full((r, r), np.inf)
    if len(faces) == 0:
        return face_map, bary, depth
    with torch.no_grad():
        verts = torch.as_tensor(vertices)
        pix = project(verts, cam).double().cpu().numpy()
        z = camera_depth(verts, cam).double().cpu().numpy()
    tri, tz = pix[faces], z[faces]
    fidx, px, py = _pixel_pairs(tri, r, 0.0)
    if len(fidx) == 0:
        return face_map, bary, depth
    p = np.stack([px + 0.5, py + 0.5], -1)
    t = tri[fidx]
    area = (t[:, 1, 0] - t[:, 0, 0]) * (t[:, 2, 1] - t[:, 0, 1]) - (t[:, 1, 1] - t[:, 0, 1]) * (t[:, 2, 0] - t[:, 0, 0])
    lam = []
    for k in range(3):
        a, b = t[:, (k + 1) % 3], t[:, (k + 2) % 3]
        lam.append(((b[:, 0] - a[:, 0]) * (p[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (p[:, 0] - a[:, 0])))
    lam = np.stack(lam, -1)
    ok = np.abs(area) > 1e-12
    lam = lam / np.where(ok, area, 1.0)[:, None]
    inside = ok & np.all(lam >= 0, axis=1)
    fidx, px, py, lam = fidx[inside], px[inside], py[inside], lam[inside]
    w = lam / tz[fidx]
    zz = 1.0 / w.sum(-1)
    pid = py * r + px
    order = np.lexsort((zz, pid))
    first = order[np.concatenate([[True], pid[order][1:] != pid[order][:-1]])]
    face_map.reshape(-1)[pid[first]] = fidx[first]
    bary.reshape(-1, 3)[pid[first]] = w[first] * zz[first, None]
    depth.reshape(-1)[pid[first]] = zz[first]
    return face_map, bary, depth


def sample_texture(texture: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup; ``uv`` (..., 2) in [0, 1], u along columns, v along rows."""
    h, w = texture.shape[:2]
    x = np.clip(uv[..., 0] * (w - 1), 0, w - 1)
    y = np.clip(uv[..., 1] * (h - 1), 0, h - 1)
    x0, y0 = np.floor(x).astype(int), np.floor(y).astype(int)
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    fx, fy = (x - x0)[..., None], (y - y0)[..., None]
    top = texture[y0, x0] * (1 - fx) + texture[y0, x1] * fx
    bot = texture[y1, x0] * (1 - fx) + texture[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def render_rgb(vertices, faces, uv, texture_image, background_image, cam: CameraParams,
               cfg: RasterConfig = RasterConfig()) -> RenderOutput:
    """Flat-textured mesh composited over a background with the soft silhouette as alpha."""
    r = cfg.resolution
    bg = np.asarray(background_image, dtype=np.float64)
    if bg.shape != (r, r, 3):
        raise ValueError(f"background has shape {bg.shape}, expected {(r, r, 3)}")
    faces = _faces_array(faces)
    with torch.no_grad():
        sil = render_silhouette(torch.as_tensor(vertices), faces, cam, cfg).double().numpy()
    face_map, bary, depth = rasterize(vertices, faces, cam, r)
    if len(faces) == 0:
        return RenderOutput(sil, face_map, bg.copy(), depth)
    tex = np.asarray(texture_image, dtype=np.float64)
    uv = np.asarray(uv, dtype=np.float64)
    covered = face_map >= 0
    color = np.zeros((r, r, 3))
    if covered.any():
        fm = face_map[covered]
        pix_uv = (bary[covered][..., None] * uv[faces[fm]]).sum(1)
        color[covered] = sample_texture(tex, pix_uv)
        if not covered.all():
            # soft halo pixels borrow the nearest covered colour
            _, (iy, ix) = ndimage.distance_transform_edt(~covered, return_indices=True)
            color = color[iy, ix]
    else:
        color[:] = tex.reshape(-1, 3).mean(0)
    alpha = sil[..., None]
    rgb = np.clip(alpha * color + (1 - alpha) * bg, 0.0, 1.0)
    return RenderOutput(sil, face_map, rgb, depth)


def visible_landmarks(vertices, faces, landmark_ids, cam: CameraParams, cfg: RasterConfig = RasterConfig(),
                      radius: float = 2.0, face_map: np.ndarray | None = None):
    """Projected landmarks ``(L, 2)`` and 0/1 visibility flags ``(L,)``.

    A landmark is visible when some pixel centre within ``radius`` of its
    projection shows a face incident to the landmark vertex.
    """
    r = cfg.resolution
    faces = _faces_array(faces)
    ids = np.asarray(landmark_ids, dtype=np.int64)
    with torch.no_grad():
        verts = torch.as_tensor(vertices)
        pts = project(verts[torch.as_tensor(ids)], cam).double().numpy()
    if face_map is None:
        face_map = rasterize(vertices, faces, cam, r)[0]
    vis = np.zeros(len(ids))
    if len(faces) == 0:
        return pts, vis
    incident = np.zeros((len(ids), len(faces)), dtype=bool)
    for i, v in enumerate(ids):
        incident[i] = np.any(faces == v, axis=1)
    reach = int(math.ceil(radius)) + 1
    offs = np.arange(-reach, reach + 1)
    for i, (u, v) in enumerate(pts):
        if not (0 <= u < r and 0 <= v < r):
            continue
        cx = np.floor(u).astype(int) + offs
        cy = np.floor(v).astype(int) + offs
        gx, gy = np.meshgrid(cx, cy)
        near = ((gx + 0.5 - u) ** 2 + (gy + 0.5 - v) ** 2 <= radius * radius) \
            & (gx >= 0) & (gx < r) & (gy >= 0) & (gy < r)
        shown = face_map[gy[near], gx[near]]
        shown = shown[shown >= 0]
        vis[i] = float(incident[i, shown].any()) if len(shown) else 0.0
    return pts, vis
