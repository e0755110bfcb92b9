"""Synthetic data generation: annotated single images and one-factor pairs.

Every item of an epoch is generated from its own random generator seeded by
``(seed, index)``, so the stream is reproducible regardless of how many
worker threads produce it or in which order items are consumed.
"""

from __future__ import annotations

import enum
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from .archive import load_archive, save_archive
from .body_model import (
    NUM_BETAS,
    NUM_POSE_JOINTS,
    ModelAssets,
    PoseShapeState,
    matrix_to_axis_angle,
    pose_mesh,
    rodrigues,
)
from .camera import CameraParams, derive_translation
from .renderer import RasterConfig, render_rgb, visible_landmarks
from .standin import PoseEntry, make_pose_library, make_texture_set

POSE_FORMAT = "dessie-poses/1"


class Factor(str, enum.Enum):
    APPEARANCE = "APPEARANCE"
    POSE = "POSE"
    GLOBAL_ROTATION = "GLOBAL_ROTATION"


FACTORS = (Factor.APPEARANCE, Factor.POSE, Factor.GLOBAL_ROTATION)


class DegenerateRenderError(RuntimeError):
    pass


# ------------------------------------------------------------------ asset sets


@dataclass(frozen=True)
class ShapeSampler:
    std: float | tuple = 1.0
    clip: float = 2.0

    def stds(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.std, dtype=np.float64), (NUM_BETAS,)).copy()


def sample_shape(rng: np.random.Generator, sampler: ShapeSampler = ShapeSampler()) -> np.ndarray:
    """Gaussian shape coefficients, clipped to ``+-sampler.clip``."""
    beta = rng.standard_normal(NUM_BETAS) * sampler.stds()
    return np.clip(beta, -sampler.clip, sampler.clip)


@dataclass(frozen=True)
class SolidBackground:
    rgb: tuple[float, float, float]


def load_background(ref, resolution: int = 256) -> np.ndarray:
    """A background reference (image path or :class:`SolidBackground`) as an (r, r, 3) array."""
    if isinstance(ref, SolidBackground):
        return np.broadcast_to(np.asarray(ref.rgb, dtype=np.float64), (resolution, resolution, 3)).copy()
    return load_image(ref, resolution)


def load_image(path, resolution: int | None = None) -> np.ndarray:
    """8-bit raster file to float RGB in [0, 1]; grayscale/alpha inputs become 3-channel.

    With ``resolution`` the image is centre-cropped to a square and resized.
    """
    with Image.open(path) as im:
        im = im.convert("RGB")
        if resolution is not None:
            im = center_crop_resize(im, resolution)
        return np.asarray(im, dtype=np.float64) / 255.0


def center_crop_resize(im: Image.Image, resolution: int) -> Image.Image:
    w, h = im.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    im = im.crop((left, top, left + side, top + side))
    return im.resize((resolution, resolution), Image.BILINEAR) if side != resolution else im


def solid_backgrounds(seed: int = 0, n: int = 16) -> list[SolidBackground]:
    rng = np.random.default_rng(seed + 3000)
    return [SolidBackground(tuple(float(c) for c in rng.uniform(0.05, 0.95, 3))) for _ in range(n)]


def background_refs(directory: str | Path | None, seed: int = 0) -> list:
    """Image files from ``directory`` (sorted); solid colours if there are none."""
    if directory is not None and Path(directory).is_dir():
        exts = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}
        files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in exts)
        if len(files) >= 2:
            return files
    return solid_backgrounds(seed)


@dataclass
class AssetSets:
    textures: list  # (species_id, texture image)
    poses: list  # PoseEntry
    backgrounds: list  # Path or SolidBackground
    shape_sampler: ShapeSampler = ShapeSampler()

    def validate(self) -> "AssetSets":
        for name in ("textures", "poses", "backgrounds"):
            if len(getattr(self, name)) < 2:
                raise ValueError(f"asset set {name!r} needs at least 2 entries")
        for sid, tex in self.textures:
            if not 0 <= sid <= 7:
                raise ValueError(f"species id {sid} outside 0..7")
            if tex.ndim != 3 or tex.shape[2] != 3:
                raise ValueError("textures must be (H, W, 3) images")
        for p in self.poses:
            if not (np.all(np.isfinite(p.theta_G)) and np.all(np.isfinite(p.theta_J))):
                raise ValueError(f"pose {p.pose_id} has non-finite rows")
            if np.shape(p.theta_J) != (NUM_POSE_JOINTS, 3):
                raise ValueError(f"pose {p.pose_id} has theta_J shape {np.shape(p.theta_J)}")
        return self

    @classmethod
    def stand_in(cls, seed: int = 0, background_dir=None, n_poses: int | None = None,
                 n_textures: int | None = None, shape_sampler: ShapeSampler = ShapeSampler()) -> "AssetSets":
        """Procedural sets. ``n_poses``/``n_textures`` pick evenly spread reduced subsets."""
        poses = make_pose_library(seed)
        textures = make_texture_set(seed)
        if n_poses is not None:
            poses = [poses[i] for i in np.linspace(0, len(poses) - 1, n_poses).round().astype(int)]
        if n_textures is not None:
            # one variant per coat pattern first, then further variants
            order = sorted(range(len(textures)), key=lambda i: (i % 10, i))
            textures = [textures[i] for i in sorted(order[:n_textures])]
        return cls(textures, poses, background_refs(background_dir, seed), shape_sampler).validate()


def save_pose_library(poses: Sequence[PoseEntry], path) -> Path:
    arrays = {
        "pose_id": np.array([p.pose_id for p in poses], dtype=np.int64),
        "theta_G": np.stack([p.theta_G for p in poses]),
        "theta_J": np.stack([p.theta_J for p in poses]),
    }
    return save_archive(path, arrays, POSE_FORMAT, extra={"labels": [p.label for p in poses]})


def load_pose_library(path) -> list[PoseEntry]:
    arrays, meta = load_archive(path, POSE_FORMAT)
    labels = meta.get("labels", [""] * len(arrays["pose_id"]))
    return [PoseEntry(int(i), g, j, lab) for i, g, j, lab in
            zip(arrays["pose_id"], arrays["theta_G"], arrays["theta_J"], labels)]


# ------------------------------------------------------------------ samples


@dataclass(frozen=True)
class SampleConfig:
    s_range: tuple[float, float] = (0.6, 1.2)
    t_range: float = 0.2
    raster: RasterConfig = RasterConfig()
    appearance_mode: str = "joint"  # joint | texture | shape
    max_attempts: int = 10
    min_yaw_change: float = math.pi / 6

    def __post_init__(self):
        if self.appearance_mode not in ("joint", "texture", "shape"):
            raise ValueError(f"appearance_mode must be joint, texture or shape, not {self.appearance_mode!r}")


@dataclass
class SyntheticSample:
    image: np.ndarray  # (r, r, 3) in [0, 1]
    silhouette_gt: np.ndarray  # (r, r) bool
    keypoints_gt: np.ndarray  # (17, 2)
    visibility: np.ndarray  # (17,)
    beta_gt: np.ndarray
    theta_G_gt: np.ndarray
    theta_J_gt: np.ndarray
    xi_gt: np.ndarray
    cam: tuple[float, float, float]  # (s, tx, ty)
    texture_id: int
    pose_id: int
    background_id: int
    yaw: float
    species_id: int = -1
    pose_label: str = ""

    @property
    def factor_ids(self) -> tuple:
        return (self.texture_id, self.pose_id, self.background_id, self.yaw)

    @property
    def camera(self) -> CameraParams:
        return CameraParams(*self.cam)

    def state(self) -> PoseShapeState:
        return PoseShapeState(self.beta_gt, self.theta_G_gt, self.theta_J_gt, np.zeros(3))

    def annotation(self) -> dict:
        """JSON-serialisable record of every ground-truth field (floats round-trip exactly)."""
        return {
            "keypoints": self.keypoints_gt.tolist(),
            "visibility": self.visibility.tolist(),
            "beta": self.beta_gt.tolist(),
            "theta_G": self.theta_G_gt.tolist(),
            "theta_J": self.theta_J_gt.tolist(),
            "xi": self.xi_gt.tolist(),
            "camera": {"s": self.cam[0], "tx": self.cam[1], "ty": self.cam[2]},
            "factors": {"texture_id": self.texture_id, "pose_id": self.pose_id,
                        "background_id": self.background_id, "yaw": self.yaw},
            "species_id": self.species_id,
            "pose_label": self.pose_label,
        }


@dataclass
class PairSample:
    first: SyntheticSample
    second: SyntheticSample
    varied_factor: Factor


@dataclass(frozen=True)
class _Draw:
    """All random choices that define one image."""

    texture_id: int
    beta: np.ndarray
    pose_id: int
    theta_G: np.ndarray  # total global rotation (yaw composed with the pose's own)
    theta_J: np.ndarray
    yaw: float
    background_id: int
    cam: tuple[float, float, float]


def _yaw_compose(yaw: float, pose_theta_G: np.ndarray) -> np.ndarray:
    """Axis-angle of ``R_up(yaw) @ R(pose)``; the body's up axis is -y."""
    R = rodrigues(torch.tensor([0.0, -yaw, 0.0], dtype=torch.float64)) @ rodrigues(
        torch.as_tensor(np.asarray(pose_theta_G, dtype=np.float64)))
    return matrix_to_axis_angle(R.numpy())


def _draw(rng: np.random.Generator, sets: AssetSets, cfg: SampleConfig) -> _Draw:
    tex = int(rng.integers(len(sets.textures)))
    beta = sample_shape(rng, sets.shape_sampler)
    pose_i = int(rng.integers(len(sets.poses)))
    yaw = float(rng.uniform(0.0, 2 * math.pi))
    bg = int(rng.integers(len(sets.backgrounds)))
    s = float(rng.uniform(*cfg.s_range))
    tx, ty = (float(v) for v in rng.uniform(-cfg.t_range, cfg.t_range, 2))
    pose = sets.poses[pose_i]
    return _Draw(tex, beta, pose_i, _yaw_compose(yaw, pose.theta_G), np.asarray(pose.theta_J, dtype=np.float64),
                 yaw, bg, (s, tx, ty))


def render_draw(d: _Draw, sets: AssetSets, assets: ModelAssets, cfg: SampleConfig = SampleConfig()) -> SyntheticSample:
    """Render one image with complete annotations from explicit choices."""
    r = cfg.raster.resolution
    state = PoseShapeState(d.beta, d.theta_G, d.theta_J, np.zeros(3))
    with torch.no_grad():
        verts = pose_mesh(assets, state)
    cam = CameraParams(*d.cam, r=r)
    species, texture = sets.textures[d.texture_id]
    bg = load_background(sets.backgrounds[d.background_id], r)
    out = render_rgb(verts, assets.faces, assets.uv_coords, texture, bg, cam, cfg.raster)
    pts, vis = visible_landmarks(verts, assets.faces, assets.landmark_vertex_ids, cam, cfg.raster,
                                 face_map=out.face_index_map)
    pose = sets.poses[d.pose_id]
    return SyntheticSample(
        image=out.rgb,
        silhouette_gt=out.hard_mask,
        keypoints_gt=pts,
        visibility=vis,
        beta_gt=np.asarray(d.beta, dtype=np.float64),
        theta_G_gt=np.asarray(d.theta_G, dtype=np.float64),
        theta_J_gt=np.asarray(d.theta_J, dtype=np.float64),
        xi_gt=derive_translation(cam).numpy(),
        cam=d.cam,
        texture_id=d.texture_id,
        pose_id=d.pose_id,
        background_id=d.background_id,
        yaw=d.yaw,
        species_id=int(species),
        pose_label=getattr(pose, "label", ""),
    )


def _render_checked(d, sets, assets, cfg):
    s = render_draw(d, sets, assets, cfg)
    return s if s.silhouette_gt.any() else None


def sample_single(rng: np.random.Generator, sets: AssetSets, assets: ModelAssets,
                  cfg: SampleConfig = SampleConfig()) -> SyntheticSample:
    for _ in range(cfg.max_attempts):
        s = _render_checked(_draw(rng, sets, cfg), sets, assets, cfg)
        if s is not None:
            return s
    raise DegenerateRenderError(f"empty silhouette after {cfg.max_attempts} attempts")


def _vary(rng, d: _Draw, factor: Factor, sets: AssetSets, cfg: SampleConfig) -> _Draw:
    if factor is Factor.APPEARANCE:
        tex, beta = d.texture_id, d.beta
        if cfg.appearance_mode in ("joint", "texture"):
            tex = int((d.texture_id + 1 + rng.integers(len(sets.textures) - 1)) % len(sets.textures))
        if cfg.appearance_mode in ("joint", "shape"):
            beta = sample_shape(rng, sets.shape_sampler)
        return replace(d, texture_id=tex, beta=beta)
    if factor is Factor.POSE:
        pose_i = int((d.pose_id + 1 + rng.integers(len(sets.poses) - 1)) % len(sets.poses))
        # the global rotation stays bit-identical; only the articulation changes
        return replace(d, pose_id=pose_i, theta_J=np.asarray(sets.poses[pose_i].theta_J, dtype=np.float64))
    if factor is Factor.GLOBAL_ROTATION:
        delta = rng.uniform(cfg.min_yaw_change, 2 * math.pi - cfg.min_yaw_change)
        yaw = float((d.yaw + delta) % (2 * math.pi))
        return replace(d, yaw=yaw, theta_G=_yaw_compose(yaw, sets.poses[d.pose_id].theta_G))
    raise ValueError(f"unknown factor {factor!r}")


def sample_pair(rng: np.random.Generator, sets: AssetSets, assets: ModelAssets, factor: Factor,
                cfg: SampleConfig = SampleConfig()) -> PairSample:
    factor = Factor(factor)
    for _ in range(cfg.max_attempts):
        d1 = _draw(rng, sets, cfg)
        first = _render_checked(d1, sets, assets, cfg)
        if first is None:
            continue
        for _ in range(cfg.max_attempts):
            second = _render_checked(_vary(rng, d1, factor, sets, cfg), sets, assets, cfg)
            if second is not None:
                return PairSample(first, second, factor)
    raise DegenerateRenderError(f"could not build a non-degenerate {factor.value} pair")


def regenerate(sample: SyntheticSample, sets: AssetSets, assets: ModelAssets,
               cfg: SampleConfig = SampleConfig()) -> SyntheticSample:
    """Re-render a sample from its stored ground truth and factor ids."""
    d = _Draw(sample.texture_id, sample.beta_gt, sample.pose_id, sample.theta_G_gt, sample.theta_J_gt,
              sample.yaw, sample.background_id, tuple(sample.cam))
    return render_draw(d, sets, assets, cfg)


# ------------------------------------------------------------------ epochs


def item_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def pair_schedule(n_items: int, pair_fraction: float) -> list[int]:
    """Per-item pair number (or -1 for singles).

    ``pair_fraction`` is the share of *images* that belong to pairs, so the
    share of items that are pairs is ``p / (2 - p)``. Pairs are spread evenly.
    """
    if not 0.0 <= pair_fraction <= 1.0:
        raise ValueError("pair_fraction must lie in [0, 1]")
    q = pair_fraction / (2.0 - pair_fraction)
    out, k = [], 0
    for i in range(n_items):
        if math.floor((i + 1) * q + 1e-9) > math.floor(i * q + 1e-9):
            out.append(k)
            k += 1
        else:
            out.append(-1)
    return out


def items_for_images(n_images: int, pair_fraction: float) -> int:
    """Number of stream items that yields about ``n_images`` images."""
    n_pairs = round(pair_fraction * n_images / 2)
    return n_images - n_pairs


def make_item(seed: int, index: int, pair_no: int, sets: AssetSets, assets: ModelAssets,
              cfg: SampleConfig = SampleConfig()):
    rng = item_rng(seed, index)
    if pair_no < 0:
        return sample_single(rng, sets, assets, cfg)
    return sample_pair(rng, sets, assets, FACTORS[pair_no % 3], cfg)


def epoch_stream(seed: int, n_samples: int, pair_fraction: float, sets: AssetSets, assets: ModelAssets,
                 cfg: SampleConfig = SampleConfig(), workers: int = 1) -> Iterator[SyntheticSample | PairSample]:
    """Ordered stream of ``n_samples`` items (singles and pairs)."""
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    schedule = pair_schedule(n_samples, pair_fraction)
    job = lambda i: make_item(seed, i, schedule[i], sets, assets, cfg)  # noqa: E731
    if workers <= 1:
        for i in range(n_samples):
            yield job(i)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(job, range(n_samples))


def flatten_items(items) -> tuple[list[SyntheticSample], list[tuple[int, int, Factor]]]:
    """Images in stream order plus (first, second, factor) index triples for pairs."""
    images, pairs = [], []
    for it in items:
        if isinstance(it, PairSample):
            pairs.append((len(images), len(images) + 1, it.varied_factor))
            images += [it.first, it.second]
        else:
            images.append(it)
    return images, pairs


# ------------------------------------------------------------------ dataset files


def _to_png(arr: np.ndarray) -> Image.Image:
    return Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8))


def write_dataset(items, out_dir: str | Path) -> dict:
    """Write images/, masks/, annotations/ and pairs.index; returns counts."""
    out = Path(out_dir)
    for sub in ("images", "masks", "annotations"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    images, pairs = flatten_items(items)
    for i, s in enumerate(images):
        name = f"{i:06d}"
        _to_png(s.image).save(out / "images" / f"{name}.png")
        _to_png(s.silhouette_gt.astype(np.float64)).save(out / "masks" / f"{name}.png")
        (out / "annotations" / f"{name}.json").write_text(json.dumps(s.annotation(), sort_keys=True))
    with open(out / "pairs.index", "w") as fh:
        for a, b, f in pairs:
            fh.write(f"{a:06d} {b:06d} {f.value}\n")
    hist = {f.value: sum(1 for *_, g in pairs if g is f) for f in FACTORS}
    return {"images": len(images), "pairs": len(pairs), "factor_histogram": hist}


@dataclass
class RecordedSample:
    """An image with whatever annotations a dataset directory provides."""

    image: np.ndarray
    keypoints_gt: np.ndarray | None = None
    visibility: np.ndarray | None = None
    silhouette_gt: np.ndarray | None = None
    annotation: dict = field(default_factory=dict)

    def synthetic(self) -> SyntheticSample | None:
        a = self.annotation
        if "beta" not in a:
            return None
        cam = a["camera"]
        fac = a["factors"]
        return SyntheticSample(
            image=self.image, silhouette_gt=self.silhouette_gt, keypoints_gt=self.keypoints_gt,
            visibility=self.visibility, beta_gt=np.array(a["beta"]), theta_G_gt=np.array(a["theta_G"]),
            theta_J_gt=np.array(a["theta_J"]), xi_gt=np.array(a["xi"]), cam=(cam["s"], cam["tx"], cam["ty"]),
            texture_id=fac["texture_id"], pose_id=fac["pose_id"], background_id=fac["background_id"],
            yaw=fac["yaw"], species_id=a.get("species_id", -1), pose_label=a.get("pose_label", ""))


def load_dataset(root: str | Path, resolution: int = 256):
    """Read a dataset directory; returns (samples, pairs).

    Works for generated sets and for real images with partial annotations
    (``keypoints``/``visibility`` in the JSON record, optional mask).
    """
    root = Path(root)
    if not (root / "images").is_dir():
        raise FileNotFoundError(f"{root}/images")
    samples = []
    for img_path in sorted((root / "images").iterdir()):
        name = img_path.stem
        ann_path = root / "annotations" / f"{name}.json"
        ann = json.loads(ann_path.read_text()) if ann_path.is_file() else {}
        mask_path = root / "masks" / f"{name}.png"
        mask = None
        if mask_path.is_file():
            with Image.open(mask_path) as m:
                mask = np.asarray(m.convert("L")) > 127
        kp = np.array(ann["keypoints"], dtype=np.float64) if "keypoints" in ann else None
        vis = np.array(ann["visibility"], dtype=np.float64) if "visibility" in ann else None
        samples.append(RecordedSample(load_image(img_path, resolution), kp, vis, mask, ann))
    order = {p.stem: i for i, p in enumerate(sorted((root / "images").iterdir()))}
    pairs = []
    idx = root / "pairs.index"
    if idx.is_file():
        for line in idx.read_text().splitlines():
            if line.strip():
                a, b, f = line.split()
                if a not in order or b not in order:
                    raise ValueError(f"pairs.index names a missing image: {line!r}")
                pairs.append((order[a], order[b], Factor(f)))
    return samples, pairs
