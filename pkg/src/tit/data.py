"""Procedural multi-task scenes: a tilted background plane with overlapping
rectangles and disks in front of it.

Every sample carries mutually consistent labels for four dense tasks:
class ids, positive depth, unit surface normals (+z faces the camera) and the
4-connected class-boundary mask.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError

PALETTE = np.array([
    [0.45, 0.45, 0.45],
    [0.90, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.35, 0.90],
    [0.95, 0.85, 0.20],
    [0.80, 0.30, 0.85],
    [0.15, 0.85, 0.85],
    [0.95, 0.55, 0.10],
])

BEVEL = 2.0
BEVEL_TILT = math.radians(45.0)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    H: int = 64
    W: int = 64
    K: int = 5
    min_primitives: int = 2
    max_primitives: int = 5
    noise: float = 0.02

    def __post_init__(self):
        if self.K < 2:
            raise ConfigError(f"need at least two classes, got K={self.K}")
        if self.K > len(PALETTE):
            raise ConfigError(f"K={self.K} exceeds the {len(PALETTE)}-colour palette")
        if not 0 <= self.min_primitives <= self.max_primitives:
            raise ConfigError(f"bad primitive range [{self.min_primitives}, {self.max_primitives}]")
        if self.H < 1 or self.W < 1:
            raise ConfigError(f"bad image size {self.H}x{self.W}")


@dataclass
class Sample:
    image: np.ndarray      # [H, W, 3] in [0, 1]
    semseg: np.ndarray     # [H, W] int64
    depth: np.ndarray      # [H, W] > 0
    normals: np.ndarray    # [H, W, 3] unit
    edge: np.ndarray       # [H, W] uint8


def boundary_mask(semseg):
    """1 where any 4-neighbour inside the image has a different class."""
    s = semseg
    e = np.zeros(s.shape, dtype=bool)
    dv = s[1:, :] != s[:-1, :]
    dh = s[:, 1:] != s[:, :-1]
    e[1:, :] |= dv
    e[:-1, :] |= dv
    e[:, 1:] |= dh
    e[:, :-1] |= dh
    return e.astype(np.uint8)


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _draw_rect(rng, H, W):
    cx, cy = rng.uniform(0.1 * W, 0.9 * W), rng.uniform(0.1 * H, 0.9 * H)
    hw, hh = rng.uniform(0.08 * W, 0.3 * W), rng.uniform(0.08 * H, 0.3 * H)
    py, px = np.mgrid[0:H, 0:W] + 0.5
    mask = (np.abs(px - cx) < hw) & (np.abs(py - cy) < hh)
    # distance to the nearest side and its outward direction
    dists = np.stack([px - (cx - hw), (cx + hw) - px, py - (cy - hh), (cy + hh) - py])
    dirs = np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]])
    near = np.argmin(dists, axis=0)
    return mask, np.min(dists, axis=0), dirs[near]


def _draw_disk(rng, H, W):
    cx, cy = rng.uniform(0.1 * W, 0.9 * W), rng.uniform(0.1 * H, 0.9 * H)
    r = rng.uniform(0.08, 0.25) * min(H, W)
    py, px = np.mgrid[0:H, 0:W] + 0.5
    dx, dy = px - cx, py - cy
    rho = np.hypot(dx, dy)
    safe = np.maximum(rho, 1e-12)
    out = np.stack([dx / safe, dy / safe], axis=-1)
    out[rho < 1e-12] = (1.0, 0.0)
    return rho < r, r - rho, out


def generate(spec: SceneSpec, index: int) -> Sample:
    rng = np.random.default_rng([spec.seed, index])
    H, W = spec.H, spec.W
    v, u = np.mgrid[0:H, 0:W] + 0.5
    u = 2.0 * u / W - 1.0
    v = 2.0 * v / H - 1.0

    gx, gy = rng.uniform(-1.0, 1.0, size=2)
    d0 = rng.uniform(6.0, 8.0)  # plane stays at depth >= 4, behind every primitive
    depth = d0 + gx * u + gy * v
    normals = np.broadcast_to(_unit(np.array([-gx, -gy, 1.0])), (H, W, 3)).copy()
    semseg = np.zeros((H, W), dtype=np.int64)

    count = rng.integers(spec.min_primitives, spec.max_primitives + 1)
    prims = []
    for _ in range(count):
        kind = "disk" if rng.random() < 0.5 else "rect"
        cls = int(rng.integers(1, spec.K))
        z = rng.uniform(1.0, 3.5)
        shape = _draw_disk(rng, H, W) if kind == "disk" else _draw_rect(rng, H, W)
        prims.append((z, cls, shape))
    # painter's order: far first, near overwrites
    prims.sort(key=lambda p: -p[0])
    flat = np.array([0.0, 0.0, 1.0])
    s, c = math.sin(BEVEL_TILT), math.cos(BEVEL_TILT)
    for z, cls, (mask, inset, out_dir) in prims:
        semseg[mask] = cls
        depth[mask] = z
        rim = mask & (inset < BEVEL)
        normals[mask] = flat
        if rim.any():
            tilt = np.concatenate([out_dir[rim] * s, np.full((rim.sum(), 1), c)], axis=-1)
            normals[rim] = _unit(tilt)

    light = _unit(np.array([0.3, -0.4, 1.0]))
    lambert = 0.6 + 0.4 * np.clip(normals @ light, 0.0, 1.0)
    shade = np.clip(1.15 - 0.08 * depth, 0.3, 1.0) * lambert
    image = PALETTE[semseg] * shade[..., None]
    image = np.clip(image + rng.normal(0.0, spec.noise, image.shape), 0.0, 1.0)
    return Sample(image, semseg, depth, normals, boundary_mask(semseg))


# ---------------------------------------------------------------------------
# augmentation


def flip_sample(s: Sample) -> Sample:
    normals = s.normals[:, ::-1].copy()
    normals[..., 0] *= -1.0
    return Sample(s.image[:, ::-1].copy(), s.semseg[:, ::-1].copy(), s.depth[:, ::-1].copy(),
                  normals, s.edge[:, ::-1].copy())


def scale_crop(s: Sample, scale: float, oy: int, ox: int) -> Sample:
    """Nearest-neighbour upscale by ``scale`` then crop back to the input size."""
    H, W = s.semseg.shape
    Hs, Ws = int(round(H * scale)), int(round(W * scale))
    rows = np.minimum((np.arange(Hs) / scale).astype(np.int64), H - 1)[oy:oy + H]
    cols = np.minimum((np.arange(Ws) / scale).astype(np.int64), W - 1)[ox:ox + W]
    take = lambda a: a[rows][:, cols]
    seg = take(s.semseg)
    return Sample(take(s.image), seg, take(s.depth), take(s.normals), boundary_mask(seg))


def color_jitter(s: Sample, brightness: float, contrast: float) -> Sample:
    img = s.image * brightness
    mu = img.mean()
    img = np.clip((img - mu) * contrast + mu, 0.0, 1.0)
    return Sample(img, s.semseg, s.depth, s.normals, s.edge)


def augment(s: Sample, rng) -> Sample:
    H, W = s.semseg.shape
    if rng.random() < 0.5:
        s = flip_sample(s)
    scale = rng.uniform(1.0, 1.25)
    Hs, Ws = int(round(H * scale)), int(round(W * scale))
    s = scale_crop(s, scale, int(rng.integers(0, Hs - H + 1)), int(rng.integers(0, Ws - W + 1)))
    return color_jitter(s, rng.uniform(0.8, 1.2), rng.uniform(0.8, 1.2))


def batch(spec: SceneSpec, indices, augment_data=False, salt=0):
    """Stack samples into arrays keyed by task; augmentation is seeded per (index, salt)."""
    indices = list(indices)
    if not indices:
        raise ValueError("batch needs at least one index")
    samples = []
    for i in indices:
        s = generate(spec, i)
        if augment_data:
            s = augment(s, np.random.default_rng([spec.seed, i, salt, 1]))
        samples.append(s)
    return {
        "image": np.stack([s.image for s in samples]),
        "semseg": np.stack([s.semseg for s in samples]),
        "depth": np.stack([s.depth for s in samples]),
        "normals": np.stack([s.normals for s in samples]),
        "edge": np.stack([s.edge for s in samples]),
    }


# ---------------------------------------------------------------------------
# raw dump

_DUMP_DTYPES = {"image": "<f8", "depth": "<f8", "normals": "<f8", "semseg": "u1", "edge": "u1"}


def dump_sample(sample: Sample, path, meta=None):
    os.makedirs(path, exist_ok=True)
    side = {"arrays": {}}
    for key, dt in _DUMP_DTYPES.items():
        arr = np.ascontiguousarray(getattr(sample, key), dtype=dt)
        fname = f"{key}.bin"
        arr.tofile(os.path.join(path, fname))
        side["arrays"][key] = {"file": fname, "dtype": dt, "shape": list(arr.shape)}
    if meta:
        side.update(meta)
    with open(os.path.join(path, "sample.json"), "w", encoding="utf-8") as fh:
        json.dump(side, fh, indent=1)


def load_dump(path) -> Sample:
    with open(os.path.join(path, "sample.json"), encoding="utf-8") as fh:
        side = json.load(fh)
    arrs = {}
    for key, info in side["arrays"].items():
        a = np.fromfile(os.path.join(path, info["file"]), dtype=info["dtype"]).reshape(info["shape"])
        arrs[key] = a.astype(np.int64) if key == "semseg" else a.astype(np.float64) \
            if key != "edge" else a
    return Sample(**arrs)


def dump_dataset(spec: SceneSpec, indices, root):
    for i in indices:
        dump_sample(generate(spec, i), os.path.join(root, f"{i:06d}"),
                    meta={"spec": asdict(spec), "index": int(i)})
