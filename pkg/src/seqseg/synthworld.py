"""Procedural bridge world, random-walk camera, and ray-cast renderer.

The scene is a concrete girder bridge built from axis-aligned boxes: a deck
slab with two edge beams (Beams & Slabs), supporting columns (Columns),
distractor boxes on the ground (Other Nonstructural), plus an infinite
ground plane and sky (both Non-bridge).

Columns and slabs draw their surface from the same concrete-noise
distribution, and the light direction is the space diagonal, so every
axis-aligned face receives the same shade factor: a close-up crop of
concrete carries no class information. Distinguishing columns from slabs
up close requires temporal context, which is the point of the dataset.

Rendering casts one primary ray per pixel through a pinhole camera; the
nearest box/plane hit wins. No anti-aliasing, so label maps stay crisp and
an independent per-ray intersection check can reproduce label and depth
exactly.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from .data import write_json, write_pgm8, write_pgm16, write_ppm
from .errors import ContractViolation

CLASS_NAMES = ("non_bridge", "columns", "beams_slabs", "other_nonstructural")
CLS_NON_BRIDGE, CLS_COLUMN, CLS_BEAM_SLAB, CLS_OTHER = 0, 1, 2, 3

LIGHT_DIR = np.array([1.0, 1.0, 1.0]) / math.sqrt(3.0)
HAZE_RANGE = 80.0       # meters to full haze weight
HAZE_MAX = 0.22
HORIZON_RGB = np.array([0.80, 0.88, 0.97])
ZENITH_RGB = np.array([0.45, 0.65, 0.95])


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    cls: int
    texture_seed: int

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)

    def contains(self, p, margin=0.0):
        return bool(np.all(p > self.lo - margin) and np.all(p < self.hi + margin))


@dataclass
class SceneSpec:
    boxes: list
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    seed: int

    def __post_init__(self):
        self.bounds_lo = np.asarray(self.bounds_lo, dtype=np.float64)
        self.bounds_hi = np.asarray(self.bounds_hi, dtype=np.float64)

    def validate(self):
        columns = [b for b in self.boxes if b.cls == CLS_COLUMN]
        slabs = [b for b in self.boxes if b.cls == CLS_BEAM_SLAB]
        if len(columns) < 2 or not slabs:
            raise ContractViolation("scene needs >= 2 columns and >= 1 slab")
        deck = max(slabs, key=lambda b: b.hi[1])
        for c in columns:
            if not math.isclose(c.hi[1], deck.lo[1], abs_tol=1e-9):
                raise ContractViolation("column tops must touch the slab bottom")
        for b in self.boxes:
            if np.any(b.lo < self.bounds_lo) or np.any(b.hi > self.bounds_hi):
                raise ContractViolation("box outside world bounds")
        return self


@dataclass
class CameraPose:
    position: np.ndarray
    heading: float
    pitch: float
    fov: float = math.pi / 3

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        if not -math.pi / 2 < self.pitch < math.pi / 2:
            raise ContractViolation("pitch must lie in (-pi/2, pi/2)")
        if self.position[1] <= 0:
            raise ContractViolation("camera must stay above ground")


@dataclass
class RenderOutput:
    rgb: np.ndarray      # (3, h, w) float in [0, 1]
    label: np.ndarray    # (h, w) uint8 class ids
    depth: np.ndarray    # (h, w) float meters, +inf where no hit


# ---------------------------------------------------------------------------
# scene construction
# ---------------------------------------------------------------------------

def build_scene(seed) -> SceneSpec:
    """Randomized box-primitive bridge; deterministic for a seed."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    span = rng.uniform(16.0, 26.0)
    width = rng.uniform(5.0, 7.0)
    thick = rng.uniform(0.8, 1.3)
    deck_y = rng.uniform(5.0, 8.0)
    n_col = int(rng.integers(2, 7))
    col_w = rng.uniform(0.9, 1.5)

    def tseed():
        return int(rng.integers(2 ** 31))

    boxes = []
    # columns, evenly spaced with jitter, tops exactly at the slab bottom
    xs = np.linspace(-span / 2 + 1.6, span / 2 - 1.6, n_col)
    xs = xs + rng.uniform(-0.35, 0.35, size=n_col)
    for x in xs:
        boxes.append(Box([x - col_w / 2, 0.0, -col_w / 2],
                         [x + col_w / 2, deck_y, col_w / 2], CLS_COLUMN, tseed()))
    # deck slab
    boxes.append(Box([-span / 2, deck_y, -width / 2],
                     [span / 2, deck_y + thick, width / 2], CLS_BEAM_SLAB, tseed()))
    # two longitudinal edge beams hanging under the slab
    beam_depth = rng.uniform(0.4, 0.7)
    for zc in (-(width / 2 - 0.6), width / 2 - 0.6):
        boxes.append(Box([-span / 2, deck_y - beam_depth, zc - 0.25],
                         [span / 2, deck_y, zc + 0.25], CLS_BEAM_SLAB, tseed()))

    bounds_lo = np.array([-span / 2 - 12.0, 0.0, -width / 2 - 12.0])
    bounds_hi = np.array([span / 2 + 12.0, deck_y + 9.0, width / 2 + 12.0])

    # distractors on the ground, outside the bridge footprint
    for _ in range(int(rng.integers(5, 10))):
        x = z = 0.0
        for _attempt in range(20):
            x = rng.uniform(bounds_lo[0] + 1.5, bounds_hi[0] - 1.5)
            z = rng.uniform(bounds_lo[2] + 1.5, bounds_hi[2] - 1.5)
            if abs(z) > width / 2 + 1.5 or abs(x) > span / 2 + 2.0:
                break
        if rng.random() < 0.6:   # tree-ish block
            w2 = rng.uniform(0.4, 1.0)
            h = rng.uniform(2.5, 6.0)
        else:                    # sign-ish block
            w2 = rng.uniform(0.2, 0.6)
            h = rng.uniform(1.2, 3.0)
        boxes.append(Box([x - w2, 0.0, z - w2], [x + w2, h, z + w2], CLS_OTHER, tseed()))

    scene = SceneSpec(boxes, bounds_lo, bounds_hi, seed)
    return scene.validate()


# ---------------------------------------------------------------------------
# random-walk camera
# ---------------------------------------------------------------------------

def _wrap_angle(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def _aim(src, dst):
    d = dst - src
    heading = math.atan2(d[0], d[2])
    pitch = math.atan2(d[1], math.hypot(d[0], d[2]))
    return heading, pitch


def _push_outside(pos, boxes, margin):
    for b in boxes:
        if b.contains(pos, margin):
            d_lo = pos - (b.lo - margin)
            d_hi = (b.hi + margin) - pos
            pen = np.minimum(d_lo, d_hi)
            ax = int(np.argmin(pen))
            if d_lo[ax] <= d_hi[ax]:
                pos[ax] = b.lo[ax] - margin
            else:
                pos[ax] = b.hi[ax] + margin
    return pos


def random_walk_camera(scene: SceneSpec, seed, length, fov=math.pi / 3):
    """Gaussian-increment 6-DOF walk with rare abrupt jumps.

    The walk alternates between far phases (whole bridge in view) and near
    phases that drift toward a point close to a column face or the deck
    underside, which produces the close-up stretches the experiment needs.
    """
    if length < 1:
        raise ContractViolation("walk length must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    lo, hi = scene.bounds_lo, scene.bounds_hi
    slab = max((b for b in scene.boxes if b.cls == CLS_BEAM_SLAB), key=lambda b: b.hi[1])
    deck_y = float(slab.lo[1])
    center = np.array([0.0, deck_y * 0.7, 0.0])
    columns = [b for b in scene.boxes if b.cls == CLS_COLUMN]

    def far_target():
        ang = rng.uniform(0.0, 2.0 * math.pi)
        r = rng.uniform(10.0, 15.0)
        # mostly below deck level so columns stay visible; sometimes above
        if rng.random() < 0.75:
            y = rng.uniform(1.2, deck_y - 0.5)
        else:
            y = rng.uniform(deck_y, min(hi[1] - 1.0, deck_y + 3.0))
        p = np.array([r * math.sin(ang), y, r * math.cos(ang)])
        p[0] = np.clip(p[0], lo[0] + 1.0, hi[0] - 1.0)
        p[2] = np.clip(p[2], lo[2] + 1.0, hi[2] - 1.0)
        return p, center

    def near_target():
        if columns and rng.random() < 0.72:
            b = columns[int(rng.integers(len(columns)))]
            anchor = np.array([(b.lo[0] + b.hi[0]) / 2,
                               rng.uniform(0.8, deck_y - 0.5),
                               (b.lo[2] + b.hi[2]) / 2])
        else:
            anchor = np.array([rng.uniform(slab.lo[0] + 1.0, slab.hi[0] - 1.0),
                               rng.uniform(slab.lo[1] - 0.4, slab.lo[1]),
                               rng.uniform(slab.lo[2], slab.hi[2])])
        ang = rng.uniform(0.0, 2.0 * math.pi)
        dist = rng.uniform(0.7, 1.8)
        offset = np.array([math.sin(ang) * dist, rng.uniform(-0.4, 0.3), math.cos(ang) * dist])
        p = anchor + offset
        p[1] = max(p[1], 0.6)
        return p, anchor

    mode = "far"
    pos, look = far_target()
    pos = pos.copy()
    heading, pitch = _aim(pos, look)
    target = pos.copy()
    frames_left = 0
    poses = []
    for _ in range(length):
        if frames_left <= 0:
            mode = "near" if mode == "far" else "far"
            target, look = near_target() if mode == "near" else far_target()
            frames_left = int(rng.integers(45, 110))
        frames_left -= 1
        if rng.random() < 0.02:
            # abrupt redraw of heading, pitch, altitude
            heading = rng.uniform(-math.pi, math.pi)
            pitch = rng.uniform(-0.45, 0.45)
            pos[1] = rng.uniform(0.8, hi[1] - 0.8)
        else:
            pos = pos + 0.07 * (target - pos) + rng.normal(0.0, 0.20, size=3)
            aim_h, aim_p = _aim(pos, look)
            heading = heading + 0.20 * _wrap_angle(aim_h - heading) + rng.normal(0.0, 0.05)
            pitch = pitch + 0.20 * (aim_p - pitch) + rng.normal(0.0, 0.035)
        # reflecting bounds, floor above ground, never inside a primitive
        for a in range(3):
            low, high = lo[a] + 0.6, hi[a] - 0.6
            if pos[a] < low:
                pos[a] = low + (low - pos[a])
            if pos[a] > high:
                pos[a] = high - (pos[a] - high)
        pos[1] = max(pos[1], 0.5)
        pos = _push_outside(pos, scene.boxes, 0.35)
        pitch = float(np.clip(pitch, -1.25, 1.25))
        heading = _wrap_angle(heading)
        poses.append(CameraPose(pos.copy(), float(heading), pitch, fov))
    return poses


# ---------------------------------------------------------------------------
# textures
# ---------------------------------------------------------------------------

def _lattice_hash(ix, iy, seed):
    """Integer lattice -> [0,1), splitmix-style mixing."""
    seed_term = np.uint64((int(seed) & 0xFFFFFFFF) * 0x165667B19E3779F9 % 2 ** 64)
    h = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
         + iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
         + seed_term)
    h ^= h >> np.uint64(30)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(27)
    h *= np.uint64(0x94D049BB133111EB)
    h ^= h >> np.uint64(31)
    return h.astype(np.float64) / float(2 ** 64)


def _value_noise(u, v, seed, scale):
    x = u / scale
    y = v / scale
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    sx = fx * fx * (3.0 - 2.0 * fx)
    sy = fy * fy * (3.0 - 2.0 * fy)
    ix = x0.astype(np.int64)
    iy = y0.astype(np.int64)
    n00 = _lattice_hash(ix, iy, seed)
    n10 = _lattice_hash(ix + 1, iy, seed)
    n01 = _lattice_hash(ix, iy + 1, seed)
    n11 = _lattice_hash(ix + 1, iy + 1, seed)
    return (n00 * (1 - sx) + n10 * sx) * (1 - sy) + (n01 * (1 - sx) + n11 * sx) * sy


def _surface_noise(u, v, seed):
    return 0.65 * _value_noise(u, v, seed, 0.55) + 0.35 * _value_noise(u, v, seed + 1, 0.17)


def _scalar_hash(seed, salt):
    return float(_lattice_hash(np.array([salt], dtype=np.int64),
                               np.array([salt + 7], dtype=np.int64), seed)[0])


def _concrete_rgb(u, v, seed):
    """Shared concrete process for every structural surface, class-blind."""
    albedo = 0.46 + 0.22 * _scalar_hash(seed, 101)
    n = _surface_noise(u, v, seed)
    gray = albedo * (0.74 + 0.52 * n)
    return np.stack([gray * 1.00, gray * 0.99, gray * 0.965], axis=-1)

_DISTRACTOR_PALETTE = np.array([
    [0.14, 0.38, 0.14],
    [0.45, 0.12, 0.10],
    [0.16, 0.22, 0.48],
    [0.42, 0.33, 0.18],
])


def _distractor_rgb(u, v, seed):
    base = _DISTRACTOR_PALETTE[int(_scalar_hash(seed, 55) * 4) % 4]
    n = _surface_noise(u, v, seed)
    return base[None, :] * (0.65 + 0.7 * n[:, None])


def _ground_rgb(u, v, seed):
    n = _surface_noise(u, v, seed)
    base = np.array([0.22, 0.36, 0.17])
    return base[None, :] * (0.60 + 0.8 * n[:, None])


def _sky_rgb(dir_y):
    t = np.clip(dir_y, 0.0, 1.0)[:, None]
    return (1.0 - t) * HORIZON_RGB[None, :] + t * ZENITH_RGB[None, :]


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def camera_rays(pose: CameraPose, resolution):
    """Unit ray directions through each pixel center, row-major (h, w)."""
    h, w = resolution
    ch, sh = math.cos(pose.heading), math.sin(pose.heading)
    cp, sp = math.cos(pose.pitch), math.sin(pose.pitch)
    forward = np.array([cp * sh, sp, cp * ch])
    right = np.array([ch, 0.0, -sh])
    up = np.array([-sp * sh, cp, -sp * ch])
    f_px = (w / 2.0) / math.tan(pose.fov / 2.0)
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    ndc_x = (jj + 0.5 - w / 2.0) / f_px
    ndc_y = (h / 2.0 - (ii + 0.5)) / f_px
    dirs = (forward[None, :]
            + ndc_x.reshape(-1)[:, None] * right[None, :]
            + ndc_y.reshape(-1)[:, None] * up[None, :])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs


def _intersect_boxes(origin, dirs, boxes):
    """Nearest-hit distance, primitive index and entry axis per ray.

    Returns (t, prim, axis); prim == len(boxes) marks the ground plane and
    -1 marks sky. Ordering ties resolve to the earliest primitive.
    """
    n = dirs.shape[0]
    t_best = np.full(n, np.inf)
    prim = np.full(n, -1, dtype=np.int32)
    axis = np.zeros(n, dtype=np.int8)
    with np.errstate(divide="ignore", invalid="ignore"):
        for bi, b in enumerate(boxes):
            t1 = (b.lo[None, :] - origin[None, :]) / dirs
            t2 = (b.hi[None, :] - origin[None, :]) / dirs
            tn_ax = np.minimum(t1, t2)
            tf_ax = np.maximum(t1, t2)
            tn = np.max(tn_ax, axis=1)
            tf = np.min(tf_ax, axis=1)
            hit = (tf >= tn) & (tn > 0.0) & (tn < t_best)
            t_best = np.where(hit, tn, t_best)
            prim = np.where(hit, bi, prim)
            axis = np.where(hit, np.argmax(tn_ax, axis=1).astype(np.int8), axis)
        # ground plane y = 0
        t_g = -origin[1] / dirs[:, 1]
        hit = np.isfinite(t_g) & (t_g > 0.0) & (t_g < t_best)
        t_best = np.where(hit, t_g, t_best)
        prim = np.where(hit, len(boxes), prim)
        axis = np.where(hit, np.int8(1), axis)
    return t_best, prim, axis


_UV_AXES = {0: (2, 1), 1: (0, 2), 2: (0, 1)}  # entry axis -> (u, v) coordinates


def render(scene: SceneSpec, pose: CameraPose, resolution) -> RenderOutput:
    """One frame: rgb texture with haze and face shading, exact label map,
    and metric depth (+inf where only sky is visible)."""
    h, w = resolution
    origin = pose.position
    dirs = camera_rays(pose, resolution)
    t, prim, axis = _intersect_boxes(origin, dirs, scene.boxes)
    n_px = dirs.shape[0]

    hit = np.isfinite(t)
    points = origin[None, :] + t[:, None] * dirs
    rgb = np.zeros((n_px, 3))
    label = np.zeros(n_px, dtype=np.uint8)

    sky = ~hit
    if sky.any():
        rgb[sky] = _sky_rgb(dirs[sky, 1])

    ground_id = len(scene.boxes)
    gmask = prim == ground_id
    if gmask.any():
        shade = 0.86 + 0.14 * abs(LIGHT_DIR[1])
        rgb[gmask] = _ground_rgb(points[gmask, 0], points[gmask, 2],
                                 scene.seed * 7919 + 13) * shade

    for bi, b in enumerate(scene.boxes):
        m = prim == bi
        if not m.any():
            continue
        ax = axis[m]
        pu = np.empty(ax.shape[0])
        pv = np.empty(ax.shape[0])
        for a, (ua, va) in _UV_AXES.items():
            sel = ax == a
            pu[sel] = points[m][sel, ua]
            pv[sel] = points[m][sel, va]
        if b.cls == CLS_OTHER:
            base = _distractor_rgb(pu, pv, b.texture_seed)
        else:
            base = _concrete_rgb(pu, pv, b.texture_seed)
        # diagonal light: every axis face shades identically, by construction
        shade = 0.86 + 0.14 * np.abs(LIGHT_DIR[ax])
        rgb[m] = base * shade[:, None]
        label[m] = b.cls

    if hit.any():
        hz = HAZE_MAX * np.clip(t[hit] / HAZE_RANGE, 0.0, 1.0)[:, None]
        rgb[hit] = rgb[hit] * (1.0 - hz) + hz * HORIZON_RGB[None, :]

    depth = np.where(hit, t, np.inf)
    return RenderOutput(
        rgb=np.clip(rgb, 0.0, 1.0).T.reshape(3, h, w),
        label=label.reshape(h, w),
        depth=depth.reshape(h, w),
    )


def encode_depth_mm(depth):
    """Meters -> uint16 millimeters; no hit encodes as 0."""
    mm = np.where(np.isfinite(depth), np.clip(np.round(depth * 1000.0), 0, 65535), 0.0)
    return mm.astype(np.uint16)


def quantize_rgb(rgb):
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

@dataclass
class DatasetConfig:
    scene_seed: int = 0
    train_sequences: int = 20
    test_sequences: int = 4
    frames_per_sequence: int = 100
    resolution: tuple = (48, 64)
    fov: float = math.pi / 3

    def __post_init__(self):
        self.resolution = tuple(int(v) for v in self.resolution)


def bridge_fraction(label):
    """Fraction of pixels on structural classes; the close-up signal."""
    return float(np.isin(label, (CLS_COLUMN, CLS_BEAM_SLAB)).mean())


def generate_dataset(config: DatasetConfig, out_root):
    """Render train/test splits to disk; returns the manifest dict.

    Every output byte is a deterministic function of the config, so
    regenerating from a manifest reproduces the dataset bit for bit.
    """
    scene = build_scene(config.scene_seed)
    manifest = {
        "format": "seqseg-dataset-v1",
        "classes": list(CLASS_NAMES),
        "config": asdict(config),
        "splits": {},
        "class_histogram_train": None,
    }
    hist = np.zeros(len(CLASS_NAMES), dtype=np.int64)
    for split, n_seq in (("train", config.train_sequences), ("test", config.test_sequences)):
        split_idx = 0 if split == "train" else 1
        manifest["splits"][split] = {
            "sequences": n_seq,
            "frames_per_sequence": config.frames_per_sequence,
        }
        for si in range(n_seq):
            seq_dir = os.path.join(out_root, split, f"seq_{si:05d}")
            os.makedirs(seq_dir, exist_ok=True)
            seed_key = (config.scene_seed, split_idx, si)
            poses = random_walk_camera(scene, seed_key, config.frames_per_sequence,
                                       fov=config.fov)
            meta = {"sequence": f"seq_{si:05d}", "split": split,
                    "seed_key": list(seed_key), "poses": []}
            for fi, pose in enumerate(poses):
                out = render(scene, pose, config.resolution)
                write_ppm(os.path.join(seq_dir, f"frame_{fi:04d}.ppm"),
                          quantize_rgb(out.rgb.transpose(1, 2, 0)))
                write_pgm8(os.path.join(seq_dir, f"label_{fi:04d}.pgm"), out.label)
                write_pgm16(os.path.join(seq_dir, f"depth_{fi:04d}.pgm"),
                            encode_depth_mm(out.depth))
                if split == "train":
                    hist += np.bincount(out.label.reshape(-1), minlength=len(CLASS_NAMES))
                meta["poses"].append({
                    "position": [float(v) for v in pose.position],
                    "heading": pose.heading, "pitch": pose.pitch, "fov": pose.fov,
                })
            write_json(os.path.join(seq_dir, "meta.json"), meta)
    manifest["class_histogram_train"] = [int(v) for v in hist]
    write_json(os.path.join(out_root, "manifest.json"), manifest)
    return manifest


def generate_from_manifest(manifest, out_root):
    """Regenerate a dataset from a manifest's recorded config."""
    cfg = DatasetConfig(**manifest["config"])
    return generate_dataset(cfg, out_root)
