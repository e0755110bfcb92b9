"""``dessie`` command line: gen | train | eval | fit | render-overlay.

Every command takes ``key=value`` options. Unknown keys are rejected and
input paths are checked before any work starts. Outputs go to a fresh run
directory ``<out>/<timestamp>-<config hash>`` that also receives the
resolved configuration.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from PIL import Image

from . import evaluation as ev
from .body_model import ModelAssets, PoseShapeState, as_body_model, load_assets, pose_mesh, rodrigues
from .camera import CameraParams, project
from .network import DessieNet, config_hash, load_checkpoint, to_batch
from .renderer import RasterConfig, rasterize, render_silhouette
from .standin import make_stand_in_assets
from .synthpipe import (
    AssetSets,
    SampleConfig,
    epoch_stream,
    items_for_images,
    load_dataset,
    load_image,
    load_pose_library,
    write_dataset,
)
from .training import TrainingDiverged, config_from_pairs, dump_train_config, read_key_value_file, train

ASSETS_ENV = "DESSIE_ASSETS"


class UsageError(ValueError):
    pass


# ------------------------------------------------------------------ option parsing


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


@dataclass(frozen=True)
class Opt:
    kind: Callable[[str], object]
    default: object = None
    path: str = ""  # "in" = must exist, "out" = must be creatable, "" otherwise


COMMON = {
    "seed": Opt(int, 0),
    "out": Opt(str, "runs", "out"),
    "assets": Opt(str, None),
    "assets_seed": Opt(int, 0),
}

SETS = {
    "background_dir": Opt(str, None),
    "fallback": Opt(_bool, True),
    "poses": Opt(str, None, "in"),
    "n_poses": Opt(int, None),
    "n_textures": Opt(int, None),
}

COMMANDS: dict[str, dict[str, Opt]] = {
    "gen": {**COMMON, **SETS, "n": Opt(int, 64), "pair_fraction": Opt(float, 0.5), "workers": Opt(int, 1),
            "appearance_mode": Opt(str, "joint")},
    "train": {**COMMON, **SETS, "config": Opt(str, None, "in"), "real": Opt(str, None, "in"),
              "resume": Opt(str, None, "in")},
    "eval": {**COMMON, "checkpoint": Opt(str, None, "in"), "dataset": Opt(str, None, "in"),
             "protocol": Opt(str, "pck_iou"), "oracle": Opt(_bool, False), "pairs": Opt(str, "index")},
    "fit": {**COMMON, "dataset": Opt(str, None, "in"), "index": Opt(int, -1), "iters": Opt(int, 500),
            "init": Opt(str, "noisy_gt"), "noise": Opt(float, 0.1), "checkpoint": Opt(str, None, "in")},
    "render-overlay": {**COMMON, "checkpoint": Opt(str, None, "in"), "dataset": Opt(str, None, "in"),
                       "images": Opt(str, None), "oracle": Opt(_bool, False)},
}


def parse_options(command: str, tokens: list[str]) -> tuple[dict, dict[str, str]]:
    """Typed options plus leftover train-config keys (``train`` only)."""
    spec = COMMANDS[command]
    opts = {k: o.default for k, o in spec.items()}
    extra: dict[str, str] = {}
    for tok in tokens:
        if "=" not in tok:
            raise UsageError(f"expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        if k in spec:
            try:
                opts[k] = spec[k].kind(v)
            except ValueError as exc:
                raise UsageError(f"bad value for {k}: {v!r}") from exc
        elif command == "train":
            extra[k] = v
        else:
            raise UsageError(f"unknown option {k!r} for {command}")
    for k, o in spec.items():
        if opts[k] is None:
            continue
        if o.path == "in" and not Path(opts[k]).exists():
            raise UsageError(f"{k}: no such path {opts[k]}")
        if o.path == "out":
            try:
                Path(opts[k]).mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise UsageError(f"{k}: cannot create {opts[k]}: {exc}") from exc
            if not os.access(opts[k], os.W_OK):
                raise UsageError(f"{k}: {opts[k]} is not writable")
    return opts, extra


def run_dir(opts: dict, resolved: dict) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(opts["out"]) / f"{stamp}-{config_hash(resolved)}"
    d, n = base, 1
    while d.exists():
        d = base.with_name(f"{base.name}-{n}")
        n += 1
    d.mkdir(parents=True)
    (d / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True, default=str) + "\n")
    return d


# ------------------------------------------------------------------ shared resolution


def resolve_assets(opts: dict) -> ModelAssets:
    path = opts.get("assets") or os.environ.get(ASSETS_ENV)
    if path and path != "standin":
        if not Path(path).is_file():
            raise UsageError(f"assets: no such file {path}")
        return load_assets(path)
    return make_stand_in_assets(opts.get("assets_seed", 0))


def resolve_sets(opts: dict) -> AssetSets:
    bg = opts.get("background_dir")
    if bg is not None and not Path(bg).is_dir():
        if not opts.get("fallback", True):
            raise UsageError(f"background_dir: no such directory {bg}")
        print(f"note: background directory {bg} not found, using solid backgrounds", file=sys.stderr)
        bg = None
    sets = AssetSets.stand_in(opts.get("seed", 0), background_dir=bg, n_poses=opts.get("n_poses"),
                              n_textures=opts.get("n_textures"))
    if opts.get("poses"):
        poses = load_pose_library(opts["poses"])
        sets = AssetSets(sets.textures, poses, sets.backgrounds, sets.shape_sampler).validate()
    return sets


@dataclass
class MeshPrediction:
    vertices: np.ndarray  # (V, 3) camera-free
    cam: CameraParams


def oracle_meshes(samples, assets: ModelAssets) -> list[MeshPrediction]:
    meshes = []
    for s in samples:
        syn = s.synthetic()
        if syn is None:
            raise UsageError("oracle predictions need GT parameters in the annotations")
        v = pose_mesh(assets, syn.state()).numpy()
        meshes.append(MeshPrediction(v, syn.camera))
    return meshes


def network_meshes(net: DessieNet, images, assets: ModelAssets, batch: int = 16) -> list[MeshPrediction]:
    body = as_body_model(assets, torch.float32)
    net.eval()
    meshes = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            p = net(to_batch(np.stack(images[i:i + batch])))
            verts = body(p.beta, p.theta_G, p.theta_J, None).double().numpy()
            for k in range(verts.shape[0]):
                c = p.cam[k].double()
                meshes.append(MeshPrediction(verts[k], CameraParams(float(c[0]), float(c[1]), float(c[2]))))
    return meshes


def predictions_for(opts: dict, samples, assets: ModelAssets) -> list[MeshPrediction]:
    if opts.get("oracle"):
        return oracle_meshes(samples, assets)
    if not opts.get("checkpoint"):
        raise UsageError("pass checkpoint=<path> or oracle=1")
    net, _ = load_checkpoint(opts["checkpoint"])
    return network_meshes(net, [s.image for s in samples], assets)


def _project(mesh: MeshPrediction, ids) -> np.ndarray:
    return project(torch.as_tensor(mesh.vertices[ids]), mesh.cam).numpy()


# ------------------------------------------------------------------ commands


def cmd_gen(opts: dict, _extra) -> int:
    assets = resolve_assets(opts)
    sets = resolve_sets(opts)
    cfg = SampleConfig(appearance_mode=opts["appearance_mode"])
    run = run_dir(opts, {"command": "gen", **opts})
    n_items = items_for_images(opts["n"], opts["pair_fraction"])
    items = epoch_stream(opts["seed"], n_items, opts["pair_fraction"], sets, assets, cfg, opts["workers"])
    counts = write_dataset(items, run)
    print(json.dumps({"run_dir": str(run), **counts}, sort_keys=True))
    return 0


def cmd_train(opts: dict, extra: dict[str, str]) -> int:
    pairs = read_key_value_file(opts["config"]) if opts["config"] else {}
    pairs.update(extra)
    try:
        cfg = config_from_pairs({"seed": str(opts["seed"]), **pairs})
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    assets = resolve_assets(opts)
    sets = resolve_sets(opts)
    real = load_dataset(opts["real"])[0] if opts["real"] else None
    run = run_dir(opts, {"command": "train", **opts, "train_config": cfg.to_dict()})
    (run / "train_config.txt").write_text(dump_train_config(cfg))
    res = train(cfg, sets, assets, run, real_dataset=real, resume_from=opts["resume"])
    print(json.dumps({"run_dir": str(run), "best_checkpoint": str(res.best_checkpoint),
                      "last_checkpoint": str(res.last_checkpoint), "best_val": res.best_val,
                      "epochs": [h["epoch"] for h in res.history]}))
    return 0


def _pck_iou(samples, preds, assets, raster) -> tuple[list[dict], dict]:
    body = as_body_model(assets)
    rows = []
    for i, (s, m) in enumerate(zip(samples, preds)):
        row = {"index": i}
        if s.keypoints_gt is None:
            raise UsageError(f"sample {i} has no keypoint annotation")
        if s.visibility.sum() > 0:
            kp = _project(m, body.landmark_ids.numpy())
            row["pck"] = ev.pck(ev.KeypointEval(kp, s.keypoints_gt, s.visibility))
            row["auc"] = ev.auc(ev.KeypointEval(kp, s.keypoints_gt, s.visibility))
        if s.silhouette_gt is not None:
            fm = rasterize(m.vertices, assets.faces, m.cam, raster.resolution)[0]
            row["iou"] = ev.iou(fm >= 0, s.silhouette_gt)
        rows.append(row)
    return rows, _aggregate(rows, ("pck", "auc", "iou"))


def _aggregate(rows, keys) -> dict:
    agg = {}
    for k in keys:
        vals = [r[k] for r in rows if k in r]
        if vals:
            agg[k] = float(np.mean(vals))
            agg[f"{k}_count"] = len(vals)
    return agg


def cmd_eval(opts: dict, _extra) -> int:
    if not opts["dataset"]:
        raise UsageError("eval needs dataset=<dir>")
    protocol = opts["protocol"]
    if protocol not in ("pck_iou", "auc", "transfer", "chamfer3d"):
        raise UsageError(f"unknown protocol {protocol!r}")
    assets = resolve_assets(opts)
    raster = RasterConfig()
    samples, pairs = load_dataset(opts["dataset"])
    if protocol in ("pck_iou", "auc", "transfer") and any(s.keypoints_gt is None for s in samples):
        raise UsageError(f"protocol {protocol} needs keypoint annotations")
    if protocol == "chamfer3d" and any(s.synthetic() is None for s in samples):
        raise UsageError("protocol chamfer3d needs GT shape and pose annotations")
    preds = predictions_for(opts, samples, assets)
    if protocol in ("pck_iou", "auc"):
        rows, agg = _pck_iou(samples, preds, assets, raster)
    elif protocol == "transfer":
        rows, agg = _transfer(samples, pairs, preds, assets, raster, opts["pairs"])
    else:
        rows = []
        for i, (s, m) in enumerate(zip(samples, preds)):
            gt = pose_mesh(assets, s.synthetic().state()).numpy()
            rows.append({"index": i, "cd_mm": ev.aligned_chamfer(m.vertices, gt)})
        agg = _aggregate(rows, ("cd_mm",))
    run = run_dir(opts, {"command": "eval", **opts})
    report = {"protocol": protocol, "aggregate": agg, "instances": rows,
              "meta": {"dataset": opts["dataset"], "checkpoint": opts["checkpoint"], "oracle": opts["oracle"],
                       "conventions": ev.METRIC_CONVENTIONS}}
    (run / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"run_dir": str(run), **agg}, sort_keys=True))
    return 0


def _transfer(samples, pairs, preds, assets, raster, mode):
    if mode == "self":
        pairs = [(i, i, None) for i in range(len(samples))]
    if not pairs:
        raise UsageError("transfer protocol needs pairs.index (or pairs=self)")
    rows = []
    for a, b, _ in pairs:
        sa, sb = samples[a], samples[b]
        if sa.visibility.sum() == 0 or sb.visibility.sum() == 0:
            continue
        va, visa = ev.mesh_vertex_visibility(preds[a].vertices, assets.faces, preds[a].cam, raster)
        vb = _project(preds[b], np.arange(len(preds[b].vertices)))
        try:
            score = ev.keypoint_transfer(sa.keypoints_gt, sa.visibility, sb.keypoints_gt, sb.visibility, va, visa, vb)
        except ev.UndefinedMetricError:
            continue
        rows.append({"source": a, "target": b, "pck": score})
    return rows, _aggregate(rows, ("pck",))


def cmd_fit(opts: dict, _extra) -> int:
    if not opts["dataset"]:
        raise UsageError("fit needs dataset=<dir>")
    if opts["init"] not in ("noisy_gt", "rest", "network"):
        raise UsageError("init must be noisy_gt, rest or network")
    assets = resolve_assets(opts)
    samples, _ = load_dataset(opts["dataset"])
    which = range(len(samples)) if opts["index"] < 0 else [opts["index"]]
    if opts["init"] == "network":
        if not opts["checkpoint"]:
            raise UsageError("init=network needs checkpoint=<path>")
        net, _ = load_checkpoint(opts["checkpoint"])
    body = as_body_model(assets)
    run = run_dir(opts, {"command": "fit", **opts})
    rows = []
    for i in which:
        s = samples[i]
        if s.keypoints_gt is None or s.silhouette_gt is None:
            raise UsageError(f"sample {i} lacks keypoints or mask")
        rng = np.random.default_rng(np.random.SeedSequence([opts["seed"], i]))
        init_state, init_cam = _fit_init(opts, s, rng, net if opts["init"] == "network" else None, assets)
        res = ev.fit_to_observation(assets, s.keypoints_gt, s.visibility, s.silhouette_gt, init_state, init_cam,
                                    iters=opts["iters"])
        v = pose_mesh(assets, res.state).detach()
        row = {"index": i, "loss": res.loss, "best_iter": res.best_iter,
               "iou": ev.iou(rasterize(v, assets.faces, res.cam)[0] >= 0, s.silhouette_gt),
               "beta": res.state.beta.tolist(), "theta_G": res.state.theta_G.tolist(),
               "theta_J": res.state.theta_J.tolist(),
               "camera": {"s": float(res.cam.s), "tx": float(res.cam.tx), "ty": float(res.cam.ty)}}
        if s.visibility.sum() > 0:
            kp = project(v[body.landmark_ids], res.cam).numpy()
            row["pck"] = ev.pck(ev.KeypointEval(kp, s.keypoints_gt, s.visibility))
        rows.append(row)
    agg = _aggregate(rows, ("pck", "iou"))
    (run / "fit.json").write_text(json.dumps({"aggregate": agg, "instances": rows}, indent=2) + "\n")
    print(json.dumps({"run_dir": str(run), **agg}, sort_keys=True))
    return 0


def _fit_init(opts, s, rng, net, assets):
    if opts["init"] == "network":
        net.eval()
        with torch.no_grad():
            p = net(to_batch(s.image[None]))
        c = p.cam[0].double()
        state = PoseShapeState(p.beta[0].double(), p.theta_G[0].double(), p.theta_J[0].double(),
                               torch.zeros(3, dtype=torch.float64))
        return state, CameraParams(float(c[0]), float(c[1]), float(c[2]))
    if opts["init"] == "rest":
        return PoseShapeState.zeros(), CameraParams(0.8)
    syn = s.synthetic()
    if syn is None:
        raise UsageError("init=noisy_gt needs GT parameters in the annotations")
    st = syn.state()
    sd = opts["noise"]
    th_g = st.theta_G + torch.as_tensor(rng.normal(0, sd, 3))
    th_j = st.theta_J + torch.as_tensor(rng.normal(0, sd, (35, 3)))
    s0, tx, ty = syn.cam
    cam = CameraParams(s0 * (1 + sd * rng.normal()), tx + sd * 0.2 * rng.normal(), ty + sd * 0.2 * rng.normal())
    return PoseShapeState(st.beta, th_g, th_j, st.xi), cam


def _side_view(vertices: np.ndarray, faces, r: int) -> np.ndarray:
    """Grey shaded render of the mesh turned a quarter turn about the vertical axis."""
    R = rodrigues(torch.tensor([0.0, math.pi / 2, 0.0], dtype=torch.float64)).numpy()
    v = (vertices - vertices.mean(0)) @ R.T
    fm, _, depth = rasterize(v, faces, CameraParams(0.8), r)
    img = np.ones((r, r, 3))
    cov = fm >= 0
    if cov.any():
        d = depth[cov]
        shade = 0.85 - 0.5 * (d - d.min()) / max(np.ptp(d), 1e-9)
        img[cov] = shade[:, None] * np.array([0.55, 0.6, 0.75])
    return img


def cmd_render_overlay(opts: dict, _extra) -> int:
    assets = resolve_assets(opts)
    if opts["dataset"]:
        samples, _ = load_dataset(opts["dataset"])
        images = [s.image for s in samples]
    elif opts["images"]:
        paths = [Path(p) for p in opts["images"].split(",")]
        for p in paths:
            if not p.is_file():
                raise UsageError(f"images: no such file {p}")
        try:
            images = [load_image(p, 256) for p in paths]
        except OSError as exc:
            raise UsageError(f"unreadable image: {exc}") from exc
        samples = None
    else:
        raise UsageError("render-overlay needs dataset=<dir> or images=<a.png,b.png>")
    if opts["oracle"]:
        if samples is None:
            raise UsageError("oracle=1 needs dataset=<dir> with annotations")
        preds = oracle_meshes(samples, assets)
    else:
        if not opts["checkpoint"]:
            raise UsageError("pass checkpoint=<path> or oracle=1")
        net, _ = load_checkpoint(opts["checkpoint"])
        preds = network_meshes(net, images, assets)
    run = run_dir(opts, {"command": "render-overlay", **opts})
    r = images[0].shape[0]
    for i, (img, m) in enumerate(zip(images, preds)):
        sil = render_silhouette(torch.as_tensor(m.vertices), assets.faces, m.cam, RasterConfig(resolution=r)).numpy()
        mask = sil > 0.5
        overlay = img.copy()
        overlay[mask] = 0.45 * overlay[mask] + 0.55 * np.array([0.1, 0.8, 0.3])
        trip = np.concatenate([img, overlay, _side_view(m.vertices, assets.faces, r)], axis=1)
        Image.fromarray((np.clip(trip, 0, 1) * 255).round().astype(np.uint8)).save(run / f"overlay_{i:06d}.png")
        Image.fromarray(mask.astype(np.uint8) * 255).save(run / f"mask_{i:06d}.png")
    print(json.dumps({"run_dir": str(run), "overlays": len(images)}))
    return 0


HANDLERS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "fit": cmd_fit,
            "render-overlay": cmd_render_overlay}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dessie", description="Synthetic quadruped data, training and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, spec in COMMANDS.items():
        p = sub.add_parser(name, help=f"{name} (options: {', '.join(sorted(spec))})")
        p.add_argument("options", nargs="*", metavar="key=value")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        opts, extra = parse_options(args.command, args.options)
        return HANDLERS[args.command](opts, extra)
    except UsageError as exc:
        print(f"dessie {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"dessie {args.command}: training diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
