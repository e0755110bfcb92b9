"""Training loop, colour augmentation and config-file parsing.

Each epoch draws a fresh synthetic stream. Pairs stay together inside a
batch so the disentanglement term can compare them. The checkpoint with the
lowest validation loss is kept as ``best.npz``; ``last.npz`` holds the most
recent epoch (with optimizer state) for resuming.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .body_model import BodyModel, ModelAssets
from .losses import GaussianPriors, LossWeights, Targets, scene_components, total_loss
from .network import DessieNet, Variant, load_checkpoint, save_checkpoint, to_batch
from .synthpipe import AssetSets, Factor, SampleConfig, epoch_stream, items_for_images


class RealMix(str, enum.Enum):
    NONE = "NONE"
    EQUAL = "EQUAL"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str) and value.upper() in cls.__members__:
            return cls[value.upper()]
        return None


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant: Variant = Variant.DESSIE
    epochs: int = 20
    learning_rate: float = 5e-5
    batch_size: int = 16
    pair_fraction: float = 0.5
    samples_per_epoch: int = 512
    val_samples: int = 64
    real_mix: RealMix = RealMix.NONE
    real_silhouette: bool = False
    enable_gt_loss: bool = False
    enable_dfl: bool = True
    enable_silhouette: bool = True
    jitter: tuple[float, float, float, float] = (0.2, 0.2, 0.2, 0.05)
    seed: int = 0
    workers: int = 1
    iterations: int = 3
    hidden: int = 1024
    dropout: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.real_mix = RealMix(self.real_mix)
        self.jitter = tuple(float(v) for v in self.jitter)
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be a finite non-negative number")
        if not 1 <= self.epochs <= 800:
            raise ValueError("epochs must lie in [1, 800]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.pair_fraction > 0 and self.batch_size % 2:
            raise ValueError("batch_size must be even when pairs are generated")
        if len(self.jitter) != 4 or any(v < 0 for v in self.jitter):
            raise ValueError("jitter needs four non-negative ranges")
        if self.samples_per_epoch < 1 or self.val_samples < 1:
            raise ValueError("sample counts must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        d["real_mix"] = self.real_mix.value
        d["jitter"] = list(self.jitter)
        return d


# ------------------------------------------------------------------ config files


def _coerce(text: str, typ, name: str):
    t = typ if isinstance(typ, type) else None
    try:
        if typ in (bool, "bool"):
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ in (int, "int"):
            return int(text)
        if typ in (float, "float"):
            return float(text)
        if t is not None and issubclass(t, enum.Enum):
            return t(text.strip())
        if typ in ("tuple[float, float, float, float]",) or name == "jitter":
            return tuple(float(v) for v in text.replace("(", "").replace(")", "").split(","))
    except ValueError as exc:
        raise ValueError(f"bad value for {name}: {text!r}") from exc
    return text


_FIELD_TYPES = {"variant": Variant, "real_mix": RealMix, "epochs": int, "batch_size": int, "samples_per_epoch": int,
                "val_samples": int, "seed": int, "workers": int, "iterations": int, "hidden": int,
                "learning_rate": float, "pair_fraction": float, "dropout": float, "real_silhouette": bool,
                "enable_gt_loss": bool, "enable_dfl": bool, "enable_silhouette": bool, "jitter": "jitter"}
_WEIGHT_TYPES = {f.name: float for f in dataclasses.fields(LossWeights)}


def parse_key_values(pairs: dict[str, str], types: dict[str, object]) -> dict:
    out = {}
    for k, v in pairs.items():
        if k not in types:
            raise ValueError(f"unknown key {k!r}")
        out[k] = _coerce(v, types[k], k)
    return out


def read_key_value_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def config_from_pairs(pairs: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    """Build a TrainConfig from strings. Loss weights use their own names (``w_K`` ...)."""
    base = base or TrainConfig()
    cfg_keys = {k: v for k, v in pairs.items() if k not in _WEIGHT_TYPES}
    w_keys = {k: v for k, v in pairs.items() if k in _WEIGHT_TYPES}
    values = parse_key_values(cfg_keys, _FIELD_TYPES)
    weights = dataclasses.replace(base.weights, **parse_key_values(w_keys, _WEIGHT_TYPES))
    return dataclasses.replace(base, **values, weights=weights)


def load_train_config(path) -> TrainConfig:
    return config_from_pairs(read_key_value_file(path))


def dump_train_config(cfg: TrainConfig) -> str:
    d = cfg.to_dict()
    w = d.pop("weights")
    lines = [f"{k} = {','.join(map(str, v)) if isinstance(v, list) else v}" for k, v in d.items()]
    lines += [f"{k} = {v}" for k, v in w.items()]
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ colour jitter


@dataclass(frozen=True)
class JitterFactors:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0  # fraction of a full turn


def sample_jitter(rng: np.random.Generator, ranges: Sequence[float]) -> JitterFactors:
    b, c, s, h = ranges
    u = rng.uniform(-1.0, 1.0, size=4)
    return JitterFactors(1.0 + b * u[0], 1.0 + c * u[1], 1.0 + s * u[2], h * u[3])


_GRAY = np.array([0.299, 0.587, 0.114])
_RGB2YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


def apply_jitter(image: np.ndarray, j: JitterFactors) -> np.ndarray:
    """Brightness, contrast, saturation, then hue; clipped after every step."""
    x = np.asarray(image, dtype=np.float64)
    if j.brightness != 1.0:
        x = np.clip(x * j.brightness, 0.0, 1.0)
    if j.contrast != 1.0:
        m = float((x @ _GRAY).mean())
        x = np.clip((x - m) * j.contrast + m, 0.0, 1.0)
    if j.saturation != 1.0:
        g = (x @ _GRAY)[..., None]
        x = np.clip((x - g) * j.saturation + g, 0.0, 1.0)
    if j.hue != 0.0:
        a = 2.0 * math.pi * j.hue
        rot = np.array([[1, 0, 0], [0, math.cos(a), -math.sin(a)], [0, math.sin(a), math.cos(a)]])
        x = np.clip(x @ (_YIQ2RGB @ rot @ _RGB2YIQ).T, 0.0, 1.0)
    src = np.asarray(image)
    return x.astype(src.dtype) if src.dtype.kind == "f" else x


def color_jitter(image: np.ndarray, rng: np.random.Generator, ranges: Sequence[float]) -> np.ndarray:
    arr = np.asarray(image)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("color_jitter expects an image in [0, 1]")
    return apply_jitter(arr, sample_jitter(rng, ranges))


# ------------------------------------------------------------------ batching


@dataclass
class Batch:
    images: list[np.ndarray]
    targets: Targets
    pairs: list[tuple[int, int, Factor]]


def make_targets(samples, dtype=torch.float32, use_silhouette=None, use_gt=None) -> Targets:
    """Stack annotations. Samples without GT parameters have ``use_gt`` False."""
    n = len(samples)
    kp = torch.tensor(np.stack([s.keypoints_gt for s in samples]), dtype=dtype)
    vis = torch.tensor(np.stack([s.visibility for s in samples]), dtype=dtype)
    has_sil = [getattr(s, "silhouette_gt", None) is not None for s in samples]
    sil = None
    if any(has_sil):
        r = next(s.silhouette_gt for s in samples if s.silhouette_gt is not None).shape[0]
        sil = torch.stack([torch.as_tensor(np.asarray(s.silhouette_gt, dtype=np.float32)) if h else torch.zeros(r, r)
                           for s, h in zip(samples, has_sil)]).to(dtype)
    use_sil = torch.tensor(has_sil if use_silhouette is None else [a and b for a, b in zip(has_sil, use_silhouette)])
    has_gt = [getattr(s, "beta_gt", None) is not None for s in samples]
    ugt = torch.tensor(has_gt if use_gt is None else [a and b for a, b in zip(has_gt, use_gt)])
    beta = th_g = th_j = None
    if any(has_gt):
        z = lambda shape: np.zeros(shape)  # noqa: E731
        beta = torch.tensor(np.stack([s.beta_gt if h else z(9) for s, h in zip(samples, has_gt)]), dtype=dtype)
        th_g = torch.tensor(np.stack([s.theta_G_gt if h else z(3) for s, h in zip(samples, has_gt)]), dtype=dtype)
        th_j = torch.tensor(np.stack([s.theta_J_gt if h else z((35, 3)) for s, h in zip(samples, has_gt)]),
                            dtype=dtype)
    assert kp.shape[0] == n
    return Targets(kp, vis, sil, use_sil, beta, th_g, th_j, ugt)


def pack_items(items, batch_size: int) -> list[tuple[list, list[tuple[int, int, Factor]]]]:
    """Group singles and pairs into batches without splitting pairs."""
    out, imgs, pairs = [], [], []
    for it in items:
        need = 2 if hasattr(it, "varied_factor") else 1
        if imgs and len(imgs) + need > batch_size:
            out.append((imgs, pairs))
            imgs, pairs = [], []
        if need == 2:
            pairs.append((len(imgs), len(imgs) + 1, it.varied_factor))
            imgs += [it.first, it.second]
        else:
            imgs.append(it)
    if imgs:
        out.append((imgs, pairs))
    return out


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    history: list[dict]
    best_val: float
    net: DessieNet


def recalibrate_norm(net: DessieNet, image_batches) -> None:
    """Replace batch-norm running statistics with the plain average over ``image_batches``.

    With momentum updates the statistics lag far behind early in training,
    which makes the first validation passes meaningless.
    """
    norms = [m for m in net.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    if not norms or not image_batches:
        return
    saved = [m.momentum for m in norms]
    was_training = net.training
    for m in norms:
        m.reset_running_stats()
        m.momentum = None
    net.train()
    with torch.no_grad():
        for imgs in image_batches:
            net(to_batch(np.stack(imgs)))
    for m, mom in zip(norms, saved):
        m.momentum = mom
    net.train(was_training)


def _stream_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


VAL_TAG = 1_000_003


def validation_items(cfg: TrainConfig, sets: AssetSets, assets: ModelAssets, sample_cfg: SampleConfig):
    n = items_for_images(cfg.val_samples, cfg.pair_fraction)
    return list(epoch_stream(_stream_seed(cfg.seed, VAL_TAG), n, cfg.pair_fraction, sets, assets, sample_cfg,
                             cfg.workers))


class Trainer:
    """Holds the model, optimizer and fixed validation set of one run."""

    def __init__(self, cfg: TrainConfig, sets: AssetSets, assets: ModelAssets, out_dir, real_dataset=None,
                 sample_cfg: SampleConfig = SampleConfig(), net: DessieNet | None = None, log_steps: bool = True):
        self.cfg, self.sets, self.assets, self.sample_cfg = cfg, sets, assets, sample_cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.real = list(real_dataset or [])
        if cfg.real_mix is RealMix.EQUAL and not self.real:
            raise ValueError("real_mix=EQUAL needs a real dataset")
        torch.manual_seed(cfg.seed)
        self.net = net or DessieNet(cfg.variant, iterations=cfg.iterations, hidden=cfg.hidden, dropout=cfg.dropout)
        self.body = BodyModel(assets, torch.float32)
        self.raster = sample_cfg.raster
        self.priors = GaussianPriors.fit(sets.shape_sampler.std, sets.poses)
        if net is None:
            self.net.set_initial_pose(self.priors.theta_mean)
        self.opt = torch.optim.Adam(self.net.parameters(), lr=cfg.learning_rate)
        self.val_items = validation_items(cfg, sets, assets, sample_cfg)
        self.history: list[dict] = []
        self.best_val = math.inf
        self.start_epoch = 1
        self.log_steps = log_steps
        self.log_path = self.out / "train_log.jsonl"
        self.calib_batches = 4

    # -- persistence
    def resume(self, checkpoint) -> None:
        _, meta = load_checkpoint(checkpoint, self.net, self.opt)
        m = meta.get("meta", {})
        self.start_epoch = int(m.get("epoch", 0)) + 1
        self.best_val = float(m.get("best_val", math.inf))
        self.history = list(m.get("history", []))

    def _save(self, name: str, epoch: int, with_opt: bool) -> Path:
        meta = {"epoch": epoch, "best_val": self.best_val, "history": self.history}
        return save_checkpoint(self.out / name, self.net, self.cfg.to_dict(), self.opt if with_opt else None, meta)

    def _log(self, rec: dict) -> None:
        with open(self.log_path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    # -- computation
    def components(self, images, targets: Targets, pairs):
        pred = self.net(to_batch(np.stack(images)))
        w = self.cfg.weights
        return scene_components(
            pred, targets, self.body, w, self.raster, self.priors, pairs=pairs,
            enable_sil=self.cfg.enable_silhouette,
            enable_dfl=self.cfg.enable_dfl and self.net.variant is Variant.DESSIE,
            enable_gt=self.cfg.enable_gt_loss)

    def _batches(self, epoch: int):
        cfg = self.cfg
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 7]))
        n_syn = cfg.samples_per_epoch
        syn_batch = cfg.batch_size
        if cfg.real_mix is RealMix.EQUAL:
            syn_batch = max(2, cfg.batch_size // 2) if cfg.pair_fraction > 0 else max(1, cfg.batch_size // 2)
        items = epoch_stream(_stream_seed(cfg.seed, epoch), items_for_images(n_syn, cfg.pair_fraction),
                             cfg.pair_fraction, self.sets, self.assets, self.sample_cfg, cfg.workers)
        for imgs, pairs in pack_items(items, syn_batch):
            use_sil = [True] * len(imgs)
            samples = list(imgs)
            if cfg.real_mix is RealMix.EQUAL:
                pick = rng.integers(0, len(self.real), size=cfg.batch_size - len(imgs))
                real = [self.real[i] for i in pick]
                samples += real
                use_sil += [cfg.real_silhouette] * len(real)
            use_gt = [i < len(imgs) for i in range(len(samples))]
            pics = [apply_jitter(s.image, sample_jitter(rng, cfg.jitter)) if any(cfg.jitter) else s.image
                    for s in samples]
            yield Batch(pics, make_targets(samples, use_silhouette=use_sil, use_gt=use_gt), pairs)

    def validate(self) -> dict[str, float]:
        self.net.eval()
        sums: dict[str, float] = {}
        count = 0
        with torch.no_grad():
            for imgs, pairs in pack_items(self.val_items, self.cfg.batch_size):
                comps = self.components([s.image for s in imgs], make_targets(imgs), pairs)
                _, logged = total_loss(comps)
                for k, v in logged.items():
                    sums[k] = sums.get(k, 0.0) + v * len(imgs)
                count += len(imgs)
        self.net.train()
        return {k: v / count for k, v in sums.items()}

    def run(self) -> TrainResult:
        cfg = self.cfg
        self.net.train()
        last = self.out / "last.npz"
        best = self.out / "best.npz"
        for epoch in range(self.start_epoch, cfg.epochs + 1):
            t0 = time.time()
            # reseeding per epoch makes a resumed run match an uninterrupted one
            torch.manual_seed(_stream_seed(cfg.seed, epoch))
            sums: dict[str, float] = {}
            steps = 0
            recent: list[list[np.ndarray]] = []
            for step, batch in enumerate(self._batches(epoch)):
                comps = self.components(batch.images, batch.targets, batch.pairs)
                loss, logged = total_loss(comps)
                if not all(math.isfinite(v) for v in logged.values()):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}: {logged}")
                self.opt.zero_grad(set_to_none=True)
                loss.backward()
                self.opt.step()
                for k, v in logged.items():
                    sums[k] = sums.get(k, 0.0) + v
                steps += 1
                recent = (recent + [batch.images])[-self.calib_batches:]
                if self.log_steps:
                    self._log({"kind": "step", "epoch": epoch, "step": step, **logged})
            train_mean = {k: v / max(steps, 1) for k, v in sums.items()}
            recalibrate_norm(self.net, recent)
            val = self.validate()
            if not math.isfinite(val.get("total", math.nan)):
                raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}: {val}")
            rec = {"kind": "epoch", "epoch": epoch, "train": train_mean, "val": val, "seconds": time.time() - t0}
            self.history.append(rec)
            self._log(rec)
            if val["total"] < self.best_val:
                self.best_val = val["total"]
                self._save(best.name, epoch, with_opt=False)
            self._save(last.name, epoch, with_opt=True)
        if not best.exists():
            self._save(best.name, self.start_epoch - 1, with_opt=False)
        return TrainResult(best, last, self.history, self.best_val, self.net)


def train(cfg: TrainConfig, sets: AssetSets, assets: ModelAssets, out_dir, real_dataset=None,
          sample_cfg: SampleConfig = SampleConfig(), resume_from=None, net: DessieNet | None = None) -> TrainResult:
    trainer = Trainer(cfg, sets, assets, out_dir, real_dataset, sample_cfg, net)
    if resume_from is not None:
        trainer.resume(resume_from)
    return trainer.run()


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
