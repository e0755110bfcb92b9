"""Procedural stand-ins for the licensed/unreleased data.

* :func:`make_stand_in_assets` builds a low-poly quadruped with the same
  interface as the real horse model (36 joints, 9 shape coefficients,
  17 landmarks).
* :func:`make_texture_set` paints 80 coat maps (8 coats x 10 variants).
* :func:`make_pose_library` keyframes 40 poses over 8 motion classes.

The mesh is a union of closed, outward-oriented generalized cylinders (torso,
neck, head, ears, legs, tail). Each ring of a cylinder is bound to at most two
joints, blended half/half at joint rings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body_model import (
    LANDMARK_NAMES,
    NUM_BETAS,
    NUM_JOINTS,
    NUM_POSE_JOINTS,
    ModelAssets,
)

JOINT_NAMES = (
    ["root"]
    + [f"spine_f{k}" for k in range(1, 5)]
    + [f"spine_r{k}" for k in range(1, 5)]
    + [f"neck{k}" for k in range(1, 6)]
    + ["head", "ear_l", "ear_r"]
    + ["shoulder_fl", "elbow_fl", "knee_fl", "shoulder_fr", "elbow_fr", "knee_fr"]
    + ["hip_hl", "stifle_hl", "hock_hl", "hip_hr", "stifle_hr", "hock_hr"]
    + [f"tail{k}" for k in range(1, 8)]
)
J = {name: i for i, name in enumerate(JOINT_NAMES)}

PARENTS = np.full(NUM_JOINTS, -1, dtype=np.int64)
for _k in range(1, 5):
    PARENTS[J[f"spine_f{_k}"]] = J[f"spine_f{_k - 1}"] if _k > 1 else 0
    PARENTS[J[f"spine_r{_k}"]] = J[f"spine_r{_k - 1}"] if _k > 1 else 0
PARENTS[J["neck1"]] = J["spine_f4"]
for _k in range(2, 6):
    PARENTS[J[f"neck{_k}"]] = J[f"neck{_k - 1}"]
PARENTS[J["head"]] = J["neck5"]
PARENTS[J["ear_l"]] = PARENTS[J["ear_r"]] = J["head"]
for _side in "lr":
    PARENTS[J[f"shoulder_f{_side}"]] = J["spine_f4"]
    PARENTS[J[f"elbow_f{_side}"]] = J[f"shoulder_f{_side}"]
    PARENTS[J[f"knee_f{_side}"]] = J[f"elbow_f{_side}"]
    PARENTS[J[f"hip_h{_side}"]] = J["spine_r4"]
    PARENTS[J[f"stifle_h{_side}"]] = J[f"hip_h{_side}"]
    PARENTS[J[f"hock_h{_side}"]] = J[f"stifle_h{_side}"]
PARENTS[J["tail1"]] = J["spine_r4"]
for _k in range(2, 8):
    PARENTS[J[f"tail{_k}"]] = J[f"tail{_k - 1}"]

STAND_IN_SCALE = 0.75

_EZ = np.array([0.0, 0.0, 1.0])
_UP = np.array([0.0, -1.0, 0.0])  # +y is down


def _p(x, h, z=0.0):
    """Point from (forward, height, lateral) to model coordinates."""
    return np.array([x, -h, z], dtype=np.float64)


@dataclass
class _Part:
    name: str
    verts: np.ndarray
    faces: np.ndarray
    weights: list  # one {joint: w} per vertex
    rings: list  # vertex index arrays (local) per ring
    centers: np.ndarray
    frames: list  # (up, side) per ring


def _tube(name, centers, radii, ring_weights, n_around, tip=(0.0, 0.0)):
    """Closed generalized cylinder through ``centers`` with elliptic rings.

    ``radii`` holds (a, b) per ring: a along the in-plane normal, b lateral.
    ``tip`` pushes the cap centers outwards by that fraction of the end radius.
    """
    centers = np.asarray(centers, dtype=np.float64)
    m = len(centers)
    verts, weights, rings, frames = [], [], [], []
    for k in range(m):
        t = centers[min(k + 1, m - 1)] - centers[max(k - 1, 0)]
        t /= np.linalg.norm(t)
        side = _EZ - _EZ.dot(t) * t
        if np.linalg.norm(side) < 1e-6:
            side = _UP - _UP.dot(t) * t
        side /= np.linalg.norm(side)
        up = np.cross(side, t)
        a, b = radii[k]
        phi = 2 * np.pi * np.arange(n_around) / n_around
        ring = centers[k] + a * np.cos(phi)[:, None] * up + b * np.sin(phi)[:, None] * side
        rings.append(np.arange(len(verts), len(verts) + n_around))
        frames.append((up, side))
        verts.extend(ring)
        weights.extend([dict(ring_weights[k])] * n_around)
    faces = []
    for k in range(m - 1):
        for i in range(n_around):
            v0, v1 = rings[k][i], rings[k][(i + 1) % n_around]
            v2, v3 = rings[k + 1][i], rings[k + 1][(i + 1) % n_around]
            faces += [(v0, v2, v1), (v1, v2, v3)]
    for k, sgn in ((0, -1.0), (m - 1, 1.0)):
        t = centers[min(k + 1, m - 1)] - centers[max(k - 1, 0)]
        t /= np.linalg.norm(t)
        c = len(verts)
        verts.append(centers[k] + sgn * tip[0 if k == 0 else 1] * min(radii[k]) * t)
        weights.append(dict(ring_weights[k]))
        r = rings[k]
        for i in range(n_around):
            faces.append((c, r[i], r[(i + 1) % n_around]))
    verts = np.asarray(verts)
    faces = np.asarray(faces, dtype=np.int64)
    part = _Part(name, verts, faces, weights, rings, centers, frames)
    _orient_outward(part)
    return part


def _orient_outward(part: _Part) -> None:
    v, f = part.verts, part.faces
    tri = v[f]
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    centroid = tri.mean(axis=1)
    # distance from the polyline of centers as the interior reference
    ref = part.centers[np.argmin(np.linalg.norm(centroid[:, None] - part.centers[None], axis=-1), axis=1)]
    flip = (normal * (centroid - ref)).sum(-1) < 0
    part.faces[flip] = part.faces[flip][:, [0, 2, 1]]


def _chain_weights(joint_ids, attach, n_mid=1):
    """Ring layout and weights for a chain: joint ring, mids, joint ring, ..."""
    layout, weights = [], []
    prev = attach
    for j in joint_ids:
        layout.append(("joint", j))
        weights.append({prev: 0.5, j: 0.5} if prev != j else {j: 1.0})
        for m in range(n_mid):
            layout.append(("mid", j, (m + 1) / (n_mid + 1)))
            weights.append({j: 1.0})
        prev = j
    return layout, weights


def _chain_centers(points, n_mid=1):
    out = []
    for k in range(len(points) - 1):
        out.append(points[k])
        for m in range(n_mid):
            f = (m + 1) / (n_mid + 1)
            out.append((1 - f) * points[k] + f * points[k + 1])
    out.append(points[-1])
    return np.asarray(out)


def make_stand_in_assets(seed: int = 0) -> ModelAssets:
    """Deterministic low-poly quadruped (a little over 700 vertices)."""
    rng = np.random.default_rng(seed)
    jit = lambda s=0.03: 1.0 + s * rng.standard_normal()  # noqa: E731
    leg_k, body_k, neck_k = jit(), jit(), jit()

    joints = np.zeros((NUM_JOINTS, 3))
    joints[0] = _p(0.0, 0.645 * leg_k)
    for k in range(1, 5):
        x = 0.075 * k * body_k
        joints[J[f"spine_f{k}"]] = _p(x, (0.645 + 0.025 * k / 4) * leg_k)
        joints[J[f"spine_r{k}"]] = _p(-x, (0.645 - 0.025 * k / 4) * leg_k)
    neck_base = _p(0.36 * body_k, 0.72 * leg_k)
    neck_top = neck_base + neck_k * (_p(0.56, 1.00) - _p(0.36, 0.72))
    for k in range(5):
        joints[J["neck1"] + k] = neck_base + (neck_top - neck_base) * k / 4
    joints[J["head"]] = neck_top + (_p(0.60, 1.04) - _p(0.56, 1.00))
    head = joints[J["head"]]
    joints[J["ear_l"]] = head + _p(0.0, 0.06, 0.045)
    joints[J["ear_r"]] = head + _p(0.0, 0.06, -0.045)
    front = {"shoulder": (0.24, 0.54), "elbow": (0.23, 0.38), "knee": (0.25, 0.18), "hoof": (0.25, 0.02)}
    hind = {"hip": (-0.28, 0.56), "stifle": (-0.22, 0.38), "hock": (-0.32, 0.20), "hoof": (-0.30, 0.02)}
    legs = {}
    for side, sz in (("l", 0.12), ("r", -0.12)):
        pts = [_p(x * body_k, h * leg_k if name != "hoof" else h, sz) for name, (x, h) in front.items()]
        legs["f" + side] = pts
        for name, p in zip(("shoulder", "elbow", "knee"), pts):
            joints[J[f"{name}_f{side}"]] = p
        pts = [_p(x * body_k, h * leg_k if name != "hoof" else h, sz) for name, (x, h) in hind.items()]
        legs["h" + side] = pts
        for name, p in zip(("hip", "stifle", "hock"), pts):
            joints[J[f"{name}_h{side}"]] = p
    tail_t = np.linspace(0, 1, 8)
    tail_pts = [_p(-0.48 * body_k - 0.14 * np.sin(1.3 * t), 0.70 * leg_k - 0.34 * t ** 1.2) for t in tail_t]
    for k in range(7):
        joints[J[f"tail{k + 1}"]] = tail_pts[k]

    parts: list[_Part] = []
    regressor_ring: dict[int, tuple[int, int]] = {}

    # torso, rear to front: end, spine_r4..spine_r1, root, spine_f1..spine_f4, end
    chain = [J[f"spine_r{k}"] for k in (4, 3, 2, 1)] + [0] + [J[f"spine_f{k}"] for k in (1, 2, 3, 4)]
    centers = [_p(-0.42 * body_k, 0.62 * leg_k)] + list(_chain_centers([joints[j] for j in chain])) \
        + [_p(0.40 * body_k, 0.67 * leg_k)]
    centers = np.asarray(centers)
    # a bone is driven by the joint nearer the root; joint rings blend with the parent
    ring_w, layout = [{chain[0]: 1.0}], [("end",)]
    for i, j in enumerate(chain):
        par = int(PARENTS[j])
        ring_w.append({j: 1.0} if par < 0 else {par: 0.5, j: 0.5})
        layout.append(("joint", j))
        if i + 1 < len(chain):
            nxt = chain[i + 1]
            ring_w.append({nxt if i < 4 else j: 1.0})
            layout.append(("mid",))
    ring_w.append({chain[-1]: 1.0})
    layout.append(("end",))
    assert len(ring_w) == len(centers)
    xs = -centers[:, 0] / (0.45 * body_k)
    radii = [(0.17 * (1 - 0.28 * u ** 2) * jit(0.01), 0.13 * (1 - 0.25 * u ** 2)) for u in np.clip(xs, -1, 1)]
    torso = _tube("torso", centers, radii, ring_w, 12, tip=(0.5, 0.4))
    parts.append(torso)
    for r, item in enumerate(layout):
        if item[0] == "joint":
            regressor_ring[item[1]] = (0, r)

    # neck: neck1..neck5 then head joint
    neck_pts = [joints[J["neck1"] + k] for k in range(5)] + [joints[J["head"]]]
    lay, w = _chain_weights([J["neck1"] + k for k in range(5)], attach=J["spine_f4"])
    centers = _chain_centers(neck_pts)
    lay.append(("joint_end", J["head"]))
    w.append({J["neck5"]: 0.5, J["head"]: 0.5})
    nr = len(centers)
    radii = [(0.10 - 0.035 * k / (nr - 1), 0.07 - 0.02 * k / (nr - 1)) for k in range(nr)]
    neck = _tube("neck", centers, radii, w, 8, tip=(0.0, 0.0))
    parts.append(neck)
    for r, item in enumerate(lay):
        if item[0] == "joint":
            regressor_ring[item[1]] = (len(parts) - 1, r)

    # head: from the head joint towards the nose
    nose = head + _p(0.24, -0.20) * jit(0.02)
    ts = np.array([0.0, 0.3, 0.6, 0.85, 1.0])
    centers = head[None] + ts[:, None] * (nose - head)[None]
    w = [{J["neck5"]: 0.3, J["head"]: 0.7}] + [{J["head"]: 1.0}] * 4
    radii = [(0.075 - 0.03 * t, 0.06 - 0.022 * t) for t in ts]
    head_part = _tube("head", centers, radii, w, 8, tip=(0.0, 0.35))
    parts.append(head_part)
    regressor_ring[J["head"]] = (len(parts) - 1, 0)

    for ear, sz in (("ear_l", 1), ("ear_r", -1)):
        base = joints[J[ear]]
        tipp = base + _p(-0.01, 0.11, 0.01 * sz)
        centers = np.stack([base, base + 0.5 * (tipp - base), tipp])
        w = [{J["head"]: 0.5, J[ear]: 0.5}, {J[ear]: 1.0}, {J[ear]: 1.0}]
        part = _tube(ear, centers, [(0.028, 0.016), (0.02, 0.01), (0.004, 0.003)], w, 4, tip=(0.0, 1.5))
        parts.append(part)
        regressor_ring[J[ear]] = (len(parts) - 1, 0)

    for key, names, attach in (
        ("fl", ("shoulder_fl", "elbow_fl", "knee_fl"), J["spine_f4"]),
        ("fr", ("shoulder_fr", "elbow_fr", "knee_fr"), J["spine_f4"]),
        ("hl", ("hip_hl", "stifle_hl", "hock_hl"), J["spine_r4"]),
        ("hr", ("hip_hr", "stifle_hr", "hock_hr"), J["spine_r4"]),
    ):
        ids = [J[n] for n in names]
        lay, w = _chain_weights(ids, attach=attach)
        centers = _chain_centers(legs[key])
        lay.append(("end",))
        w.append({ids[-1]: 1.0})
        upper = 0.065 if key[0] == "h" else 0.058
        radii = [(r, r) for r in np.interp(np.linspace(0, 1, len(centers)), [0, 0.4, 0.8, 1.0],
                                           [upper, 0.045, 0.034, 0.04])]
        part = _tube("leg_" + key, centers, radii, w, 8, tip=(0.3, 0.0))
        parts.append(part)
        for r, item in enumerate(lay):
            if item[0] == "joint":
                regressor_ring[item[1]] = (len(parts) - 1, r)

    tail_ids = [J[f"tail{k}"] for k in range(1, 8)]
    lay, w = _chain_weights(tail_ids, attach=J["spine_r4"])
    centers = _chain_centers(tail_pts)
    lay.append(("end",))
    w.append({tail_ids[-1]: 1.0})
    radii = [(r, r) for r in np.linspace(0.05, 0.03, len(centers))]
    part = _tube("tail", centers, radii, w, 6, tip=(0.0, 0.6))
    parts.append(part)
    for r, item in enumerate(lay):
        if item[0] == "joint":
            regressor_ring[item[1]] = (len(parts) - 1, r)

    # assemble
    offsets = np.cumsum([0] + [len(p.verts) for p in parts])
    verts = np.concatenate([p.verts for p in parts])
    faces = np.concatenate([p.faces + o for p, o in zip(parts, offsets)])
    nv = len(verts)
    skin = np.zeros((nv, NUM_JOINTS))
    for p, o in zip(parts, offsets):
        for i, wd in enumerate(p.weights):
            for j, wv in wd.items():
                skin[o + i, j] += wv
    skin /= skin.sum(axis=1, keepdims=True)
    regressor = np.zeros((NUM_JOINTS, nv))
    for j in range(NUM_JOINTS):
        pi, r = regressor_ring[j]
        idx = parts[pi].rings[r] + offsets[pi]
        regressor[j, idx] = 1.0 / len(idx)

    part_of = np.concatenate([np.full(len(p.verts), i) for i, p in enumerate(parts)])
    names = [p.name for p in parts]

    def ring_vertex(part_name, ring, score):
        pi = names.index(part_name)
        idx = parts[pi].rings[ring]
        c = parts[pi].centers[ring]
        return int(offsets[pi] + idx[np.argmax([score(verts[offsets[pi] + i] - c) for i in idx])])

    def cap_center(part_name, end):
        pi = names.index(part_name)
        n_ring_verts = sum(len(r) for r in parts[pi].rings)
        return int(offsets[pi] + n_ring_verts + (0 if end == "start" else 1))

    up = np.array([0.0, -1.0, 0.0])
    lm = {}
    for side, sz in (("left", 1.0), ("right", -1.0)):
        lm[f"{side}_eye"] = ring_vertex("head", 1, lambda d, s=sz: s * d[2] + 0.6 * d.dot(up))
    lm["nose"] = cap_center("head", "end")
    lm["neck"] = ring_vertex("neck", 2, lambda d: d.dot(up) + 0.3 * d[0])
    lm["tail_root"] = ring_vertex("tail", 0, lambda d: d.dot(up) - 0.5 * d[0])
    for side, key_f, key_h, sz in (("left", "fl", "hl", 1.0), ("right", "fr", "hr", -1.0)):
        lm[f"{side}_shoulder"] = ring_vertex("leg_" + key_f, 0, lambda d, s=sz: s * d[2])
        lm[f"{side}_elbow"] = ring_vertex("leg_" + key_f, 2, lambda d, s=sz: s * d[2])
        lm[f"{side}_front_paw"] = ring_vertex("leg_" + key_f, 6, lambda d: d[0])
        lm[f"{side}_hip"] = ring_vertex("leg_" + key_h, 0, lambda d, s=sz: s * d[2])
        lm[f"{side}_knee"] = ring_vertex("leg_" + key_h, 2, lambda d, s=sz: s * d[2])
        lm[f"{side}_back_paw"] = ring_vertex("leg_" + key_h, 6, lambda d: d[0])
    landmark_ids = np.array([lm[n] for n in LANDMARK_NAMES], dtype=np.int64)

    basis = _shape_basis(verts, part_of, names, joints, rng)

    # root joint at the origin, body about 1.1 units long
    verts = (verts - regressor[0] @ verts) * STAND_IN_SCALE

    lo, hi = verts.min(axis=0), verts.max(axis=0)
    uv = np.stack([(verts[:, 0] - lo[0]) / (hi[0] - lo[0]), (verts[:, 1] - lo[1]) / (hi[1] - lo[1])], axis=1)

    return ModelAssets(
        template_vertices=verts,
        faces=faces,
        shape_basis=basis,
        joint_regressor=regressor,
        skin_weights=skin,
        parent=PARENTS.copy(),
        landmark_vertex_ids=landmark_ids,
        uv_coords=np.clip(uv, 0.0, 1.0),
        joint_names=tuple(JOINT_NAMES),
    ).validate()


def _shape_basis(verts, part_of, names, joints, rng) -> np.ndarray:
    """Nine semantic deformation fields, orthogonalised, PCA-like decreasing scale."""
    nv = len(verts)
    x, h, z = verts[:, 0], -verts[:, 1], verts[:, 2]
    in_part = lambda *ns: np.isin(part_of, [names.index(n) for n in ns])  # noqa: E731
    torso = in_part("torso")
    legs = in_part("leg_fl", "leg_fr", "leg_hl", "leg_hr")
    headish = in_part("head", "ear_l", "ear_r")
    neck = in_part("neck")

    def field(dx=0.0, dh=0.0, dz=0.0):
        out = np.zeros((nv, 3))
        out[:, 0] = dx
        out[:, 1] = -np.asarray(dh)
        out[:, 2] = dz
        return out

    h_c = np.interp(x, [-0.45, 0.45], [0.62, 0.67])
    neck_dir = joints[J["head"]] - joints[J["neck1"]]
    neck_dir /= np.linalg.norm(neck_dir)
    neck_t = np.clip((verts - joints[J["neck1"]]) @ neck_dir / 0.35, 0, 1)
    neck_t = np.where(headish, 1.0, np.where(neck, neck_t, 0.0))
    fields = [
        field(x, h, z),  # overall size
        field(dx=np.clip(x, -0.45, 0.45)),  # body length
        field(dh=np.minimum(h, 0.55) / 0.55),  # leg length
        field(dh=np.where(torso, h - h_c, 0), dz=np.where(torso, z, 0)),  # girth
        neck_t[:, None] * neck_dir[None],  # neck length
        np.where(headish[:, None], verts - joints[J["head"]], 0.0),  # head size
        field(dh=np.where(torso, -np.maximum(0, h_c - h), 0)),  # belly
        _leg_radial(verts, legs, part_of, names, joints),  # leg thickness
        field(dh=np.clip(-0.1 - x, 0, None) * (h > 0.3)),  # rump height
    ]
    mats = []
    for f in fields:
        f = f + 0.05 * np.linalg.norm(f) / np.sqrt(nv) * _smooth_noise(verts, rng)
        mats.append(f.reshape(-1))
    q, r = np.linalg.qr(np.stack(mats, axis=1))
    q = q * np.sign(np.diag(r))[None]
    rms = np.array([0.045, 0.035, 0.03, 0.025, 0.02, 0.018, 0.015, 0.012, 0.01])
    basis = (q * rms[None] * np.sqrt(nv)).T.reshape(NUM_BETAS, nv, 3)
    return basis


def _leg_radial(verts, legs, part_of, names, joints):
    out = np.zeros_like(verts)
    for key, top in (("fl", "shoulder_fl"), ("fr", "shoulder_fr"), ("hl", "hip_hl"), ("hr", "hip_hr")):
        m = part_of == names.index("leg_" + key)
        axis_pt = joints[J[top]]
        d = verts[m] - axis_pt
        d[:, 1] = 0.0
        out[m] = d - np.array([d[:, 0].mean(), 0.0, d[:, 2].mean()])
    return out


def _smooth_noise(verts, rng):
    freq = rng.normal(0, 3.0, size=(3, 3))
    phase = rng.uniform(0, 2 * np.pi, size=3)
    return np.sin(verts @ freq + phase)


# ---------------------------------------------------------------- poses

POSE_CLASSES = ("standing", "walking", "trotting", "cantering", "eating", "bending_neck", "sitting", "rearing")


@dataclass(frozen=True)
class PoseEntry:
    pose_id: int
    theta_G: np.ndarray  # (3,)
    theta_J: np.ndarray  # (35, 3)
    label: str


def _jrow(name):
    return J[name] - 1


def _keyframe(label: str, v: int, rng) -> tuple[np.ndarray, np.ndarray]:
    th = 0.03 * rng.standard_normal((NUM_POSE_JOINTS, 3))
    g = np.zeros(3)
    phase = 2 * np.pi * v / 5

    def flex(name, a):  # sagittal rotation about the lateral axis
        th[_jrow(name), 2] += a

    def swing(side, a, knee=0.0):
        flex(f"shoulder_f{side}" if side in "lr" else side, a)

    def leg(front, side, a, knee):
        names = ("shoulder_f", "elbow_f", "knee_f") if front else ("hip_h", "stifle_h", "hock_h")
        flex(names[0] + side, a)
        flex(names[1] + side, 0.4 * knee)
        flex(names[2] + side, knee if front else -knee)

    if label == "standing":
        for k in range(1, 6):
            flex(f"neck{k}", 0.04 * (v - 2))
    elif label in ("walking", "trotting", "cantering"):
        amp = {"walking": 0.3, "trotting": 0.45, "cantering": 0.6}[label]
        offs = {"walking": (0, np.pi, np.pi / 2, 3 * np.pi / 2),
                "trotting": (0, np.pi, np.pi, 0),
                "cantering": (0, 0.4, np.pi, np.pi + 0.4)}[label]
        for (front, side), off in zip(((True, "l"), (True, "r"), (False, "l"), (False, "r")), offs):
            s = np.sin(phase + off)
            leg(front, side, -amp * s, 0.9 * amp * max(0.0, s))
        if label == "cantering":
            g[2] = -0.08 * np.sin(phase)
        flex("tail1", -0.2 - 0.1 * v / 4)
    elif label == "eating":
        for k in range(1, 6):
            flex(f"neck{k}", 0.22 + 0.02 * v)
        flex("head", 0.3)
        leg(True, "l", -0.15 if v % 2 else 0.1, 0.0)
    elif label == "bending_neck":
        sgn = 1.0 if v % 2 == 0 else -1.0
        for k in range(1, 6):
            th[_jrow(f"neck{k}"), 1] += sgn * (0.12 + 0.03 * v)
        flex("head", 0.1)
    elif label == "sitting":
        pitch = 0.45 + 0.05 * v
        g[2] = -pitch
        for side in "lr":
            leg(True, side, pitch, 0.0)
            flex(f"hip_h{side}", -1.0 + pitch)
            flex(f"stifle_h{side}", 1.6)
            flex(f"hock_h{side}", -1.3)
        flex("tail1", 0.3)
    elif label == "rearing":
        pitch = 0.8 + 0.06 * v
        g[2] = -pitch
        for side in "lr":
            flex(f"hip_h{side}", pitch - 0.1)
            flex(f"stifle_h{side}", 0.3)
            flex(f"shoulder_f{side}", -0.5 + pitch - 0.1 * v)
            flex(f"elbow_f{side}", 0.4)
            flex(f"knee_f{side}", 1.4)
        for k in range(1, 6):
            flex(f"neck{k}", 0.08)
    else:
        raise ValueError(label)
    return g, th


def make_pose_library(seed: int = 0) -> list[PoseEntry]:
    """Forty keyframes: five variants for each of the eight motion classes."""
    rng = np.random.default_rng(seed + 1000)
    out = []
    for ci, label in enumerate(POSE_CLASSES):
        for v in range(5):
            g, th = _keyframe(label, v, rng)
            out.append(PoseEntry(pose_id=len(out), theta_G=g, theta_J=th, label=label))
    return out


# ---------------------------------------------------------------- textures

COAT_PATTERNS = ("bay", "chestnut", "black", "gray", "palomino", "dappled", "pinto", "striped")

_BASE_COLORS = {
    "bay": (0.45, 0.26, 0.13),
    "chestnut": (0.60, 0.30, 0.12),
    "black": (0.08, 0.07, 0.07),
    "gray": (0.62, 0.62, 0.62),
    "palomino": (0.85, 0.68, 0.38),
    "dappled": (0.55, 0.55, 0.57),
    "pinto": (0.50, 0.30, 0.16),
    "striped": (0.95, 0.95, 0.92),
}


def _blobs(rng, size, n, rmin, rmax):
    yy, xx = np.mgrid[0:size, 0:size] / size
    m = np.zeros((size, size), dtype=bool)
    for _ in range(n):
        cx, cy, r = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(rmin, rmax)
        m |= (xx - cx) ** 2 + ((yy - cy) * 1.3) ** 2 < r * r
    return m


def make_texture(pattern: str, rng, size: int = 128) -> np.ndarray:
    """One coat map in UV space (u to the right, v downwards), values in [0, 1]."""
    base = np.array(_BASE_COLORS[pattern]) * rng.uniform(0.85, 1.15, size=3)
    img = np.ones((size, size, 3)) * base
    yy, xx = np.mgrid[0:size, 0:size] / size
    if pattern == "bay":
        img[yy > 0.72] = (0.07, 0.05, 0.04)  # dark lower legs
    elif pattern == "palomino":
        img[yy > 0.8] = np.clip(base * 1.2, 0, 1)
    elif pattern == "dappled":
        spots = _blobs(rng, size, 90, 0.01, 0.035)
        img[spots] = np.clip(base + 0.25, 0, 1)
    elif pattern == "pinto":
        img[_blobs(rng, size, 7, 0.08, 0.2)] = (0.95, 0.94, 0.9)
    elif pattern == "striped":
        freq = rng.uniform(14, 22)
        stripes = np.sin(2 * np.pi * (freq * xx + 2.0 * np.sin(3 * yy))) > 0
        img[stripes] = (0.05, 0.05, 0.05)
    noise = rng.normal(0, 0.02, size=(size, size, 1))
    return np.clip(img + noise, 0.0, 1.0)


def make_texture_set(seed: int = 0, variants: int = 10, size: int = 128) -> list[tuple[int, np.ndarray]]:
    """(species_id, texture) pairs; species ids index :data:`COAT_PATTERNS`."""
    rng = np.random.default_rng(seed + 2000)
    return [(sid, make_texture(p, rng, size)) for sid, p in enumerate(COAT_PATTERNS) for _ in range(variants)]
