"""Procedural RGB-D scenes with material classes and sensor-style depth corruption.

Scenes are rendered orthographically from a camera looking straight down at
a tilted, textured ground plane with 2-6 primitives resting on it. Depth is
the distance from the camera plane in metres. Raw depth is corrupted
according to material:

* diffuse (and background): additive Gaussian noise
* transparent: whole object reads the background behind it, or drops out
* specular: multiplicative speckle plus random pixel dropout

On-disk layout of a dataset directory::

    manifest.json          JSON manifest (see DatasetManifest)
    NNNNNN_rgb.png         8-bit RGB
    NNNNNN_raw.png         16-bit unsigned millimetres, 0 = invalid
    NNNNNN_gt.png          16-bit unsigned millimetres
    NNNNNN_label.png       8-bit indexed label map
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .semantics import SCENE_CLASSES, build_default_palette

FORMAT_VERSION = 1

BACKGROUND, DIFFUSE, TRANSPARENT, SPECULAR = range(4)
NON_LAMBERTIAN = (TRANSPARENT, SPECULAR)


class DatasetError(RuntimeError):
    pass


class UnfillableDepthError(ValueError):
    pass


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    near: float = 0.3
    far: float = 1.5
    min_objects: int = 2
    max_objects: int = 6
    view_width_m: float = 0.64
    ground_depth: tuple[float, float] = (0.85, 1.35)
    ground_tilt_m: float = 0.12
    # relative weights of diffuse / transparent / specular objects
    material_weights: tuple[float, float, float] = (0.45, 0.35, 0.20)
    nonlambertian_fraction: tuple[float, float] = (0.10, 0.60)
    transparent_background_prob: float = 0.7
    specular_sigma: float = 0.05
    specular_dropout: float = 0.2
    diffuse_sigma: float = 0.005
    max_attempts: int = 200

    def __post_init__(self):
        self.ground_depth = tuple(self.ground_depth)
        self.material_weights = tuple(self.material_weights)
        self.nonlambertian_fraction = tuple(self.nonlambertian_fraction)
        if self.max_objects < 1 or self.min_objects < 1:
            raise ValueError("scenes need at least one object")
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects > max_objects")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")

    @property
    def pixel_size(self) -> float:
        return self.view_width_m / self.width

    @property
    def enforce_mix(self) -> bool:
        return self.material_weights[1] + self.material_weights[2] > 0


@dataclass
class SceneSample:
    rgb: np.ndarray          # (3, H, W) float64 in [-1, 1], 8-bit quantised
    raw_depth: np.ndarray    # (H, W) metres, 0 = invalid
    gt_depth: np.ndarray     # (H, W) metres
    labels: np.ndarray       # (H, W) int64 in SCENE_CLASSES
    valid_mask: np.ndarray   # (H, W) bool
    seed: Optional[int] = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.gt_depth.shape

    def digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for arr in (self.rgb, self.raw_depth, self.gt_depth, self.labels, self.valid_mask):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass
class DatasetManifest:
    sample_count: int
    image_size: tuple[int, int]
    depth_range: tuple[float, float]
    classes: list[str] = field(default_factory=lambda: list(SCENE_CLASSES))
    generator_seed: Optional[int] = None
    format_version: int = FORMAT_VERSION
    sample_seeds: Optional[list] = None


# -- rendering ---------------------------------------------------------------

def _primitive(rng, cfg: SceneConfig, ground):
    """Random primitive as (kind, params, surface_fn). surface_fn(X, Y) -> depth or inf."""
    w_m = cfg.view_width_m
    h_m = cfg.height * cfg.pixel_size
    cx, cy = rng.uniform(0.12, 0.88) * w_m, rng.uniform(0.12, 0.88) * h_m
    base = ground(cx, cy)
    kind = rng.choice(["sphere", "box", "cylinder"])
    theta = rng.uniform(0, math.pi)
    c, s = math.cos(theta), math.sin(theta)

    if kind == "sphere":
        r = rng.uniform(0.04, 0.10)
        cz = base - r

        def surf(X, Y):
            rho2 = (X - cx) ** 2 + (Y - cy) ** 2
            out = np.full(X.shape, np.inf)
            inside = rho2 < r * r
            out[inside] = cz - np.sqrt(r * r - rho2[inside])
            return out
    elif kind == "box":
        a, b = rng.uniform(0.03, 0.09, size=2)
        hgt = rng.uniform(0.03, 0.14)
        top = base - hgt

        def surf(X, Y):
            u = (X - cx) * c + (Y - cy) * s
            v = -(X - cx) * s + (Y - cy) * c
            out = np.full(X.shape, np.inf)
            out[(np.abs(u) < a) & (np.abs(v) < b)] = top
            return out
    else:
        r = rng.uniform(0.025, 0.06)
        half_len = rng.uniform(0.05, 0.12)
        cz = base - r

        def surf(X, Y):
            u = (X - cx) * c + (Y - cy) * s
            v = -(X - cx) * s + (Y - cy) * c
            out = np.full(X.shape, np.inf)
            inside = (np.abs(u) < half_len) & (np.abs(v) < r)
            out[inside] = cz - np.sqrt(r * r - v[inside] ** 2)
            return out
    return kind, surf


def _shade_normals(depth, pixel_size):
    dzdy, dzdx = np.gradient(depth, pixel_size)
    n = np.stack([dzdx, dzdy, -np.ones_like(depth)])
    return n / np.linalg.norm(n, axis=0, keepdims=True)


def _ground_texture(rng, H, W):
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    period = rng.uniform(5, 11)
    ang = rng.uniform(0, math.pi)
    u = xx * math.cos(ang) + yy * math.sin(ang)
    v = -xx * math.sin(ang) + yy * math.cos(ang)
    checker = ((np.floor(u / period) + np.floor(v / period)) % 2) * 2 - 1
    base = rng.uniform(0.35, 0.75, size=3)
    low = ndimage.gaussian_filter(rng.normal(0, 1, size=(3, H, W)), sigma=(0, 8, 8))
    low /= np.abs(low).max() + 1e-9
    tex = base[:, None, None] * (1 + 0.18 * checker[None] + 0.15 * low)
    return np.clip(tex, 0, 1)


def _sample_materials(rng, n, cfg: SceneConfig):
    w = np.asarray(cfg.material_weights, dtype=np.float64)
    return rng.choice([DIFFUSE, TRANSPARENT, SPECULAR], size=n, p=w / w.sum())


def _layout(rng, cfg: SceneConfig):
    H, W, ps = cfg.height, cfg.width, cfg.pixel_size
    g0 = rng.uniform(*cfg.ground_depth)
    gx, gy = rng.uniform(-1, 1, size=2) * cfg.ground_tilt_m / cfg.view_width_m

    def ground(x, y):
        return g0 + gx * (x - cfg.view_width_m / 2) + gy * (y - H * ps / 2)

    Y, X = (np.mgrid[0:H, 0:W].astype(np.float64) + 0.5) * ps
    ground_depth = ground(X, Y)
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    depth = ground_depth.copy()
    owner = np.full((H, W), -1, dtype=np.int64)
    for k in range(n_obj):
        _, surf = _primitive(rng, cfg, ground)
        d = surf(X, Y)
        closer = d < depth
        depth[closer] = d[closer]
        owner[closer] = k
    return ground_depth, depth, owner, n_obj


def generate_scene(seed: int, config: Optional[SceneConfig] = None) -> SceneSample:
    """Deterministic scene for ``seed``."""
    cfg = config or SceneConfig()
    rng = np.random.default_rng(seed)
    H, W = cfg.height, cfg.width
    lo, hi = cfg.nonlambertian_fraction

    for _ in range(cfg.max_attempts):
        ground_depth, depth, owner, n_obj = _layout(rng, cfg)
        obj_pix = owner >= 0
        if obj_pix.sum() == 0:
            continue
        materials = _sample_materials(rng, n_obj, cfg)
        if not cfg.enforce_mix:
            break
        ok = False
        for _ in range(20):
            nl = np.isin(materials[owner[obj_pix]], NON_LAMBERTIAN).mean()
            if lo <= nl <= hi:
                ok = True
                break
            materials = _sample_materials(rng, n_obj, cfg)
        if ok:
            break
    else:
        raise RuntimeError(f"could not satisfy material mix after {cfg.max_attempts} layouts (seed {seed})")

    labels = np.where(owner >= 0, materials[np.maximum(owner, 0)], BACKGROUND).astype(np.int64)
    gt = np.clip(depth, cfg.near, cfg.far)

    # appearance
    light = np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), -1.0])
    light /= np.linalg.norm(light)
    view = np.array([0.0, 0.0, -1.0])
    half = (light + view) / np.linalg.norm(light + view)
    normals = _shade_normals(depth, cfg.pixel_size)
    ground_normals = _shade_normals(ground_depth, cfg.pixel_size)
    lambert = np.clip(np.einsum("chw,c->hw", normals, light), 0, 1)
    spec = np.clip(np.einsum("chw,c->hw", normals, half), 0, 1) ** 40
    shade = 0.3 + 0.7 * lambert
    ground_shade = 0.3 + 0.7 * np.clip(np.einsum("chw,c->hw", ground_normals, light), 0, 1)

    tex = _ground_texture(rng, H, W)
    background = tex * ground_shade[None]
    rgb = background.copy()
    yy, xx = np.mgrid[0:H, 0:W]
    for k in range(n_obj):
        m = owner == k
        if not m.any():
            continue
        mat = materials[k]
        if mat == DIFFUSE:
            albedo = rng.uniform(0.15, 0.95, size=3)
            rgb[:, m] = albedo[:, None] * shade[m][None]
        elif mat == SPECULAR:
            albedo = rng.uniform(0.25, 0.5) * np.ones(3) + rng.uniform(-0.05, 0.05, size=3)
            rgb[:, m] = albedo[:, None] * shade[m][None] + 0.9 * spec[m][None]
        else:
            alpha = rng.uniform(0.12, 0.28)
            tint = rng.uniform(0.6, 1.0, size=3)
            # refraction: sample the background behind at a normal-dependent offset
            k_ref = rng.uniform(2.0, 4.0)
            sy = np.clip(np.round(yy[m] + k_ref * normals[1][m]), 0, H - 1).astype(int)
            sx = np.clip(np.round(xx[m] + k_ref * normals[0][m]), 0, W - 1).astype(int)
            seen = background[:, sy, sx]
            rgb[:, m] = (1 - alpha) * seen * tint[:, None] + alpha * shade[m][None] + 0.7 * spec[m][None]
    rgb_u8 = np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)
    rgb_f = rgb_u8.astype(np.float64) / 127.5 - 1.0

    # raw depth corruption
    raw = gt + rng.normal(0, cfg.diffuse_sigma, size=(H, W))
    for k in range(n_obj):
        m = owner == k
        if not m.any():
            continue
        mat = materials[k]
        if mat == TRANSPARENT:
            if rng.random() < cfg.transparent_background_prob:
                raw[m] = ground_depth[m] + rng.normal(0, cfg.diffuse_sigma, size=int(m.sum()))
            else:
                raw[m] = 0.0
        elif mat == SPECULAR:
            speck = gt[m] * (1 + rng.normal(0, cfg.specular_sigma, size=int(m.sum())))
            drop = rng.random(int(m.sum())) < cfg.specular_dropout
            raw[m] = np.where(drop, 0.0, speck)
    raw = np.maximum(raw, 0.0)
    # millimetre grid, matching what the on-disk format can hold
    raw = np.round(raw * 1000) / 1000
    gt = np.round(gt * 1000) / 1000
    return SceneSample(rgb=rgb_f, raw_depth=raw, gt_depth=gt, labels=labels, valid_mask=raw > 0, seed=seed)


def scene_seed(base_seed: int, index: int) -> int:
    return base_seed * 1_000_000 + index


def generate_dataset(count: int, seed: int, config: Optional[SceneConfig] = None) -> list[SceneSample]:
    return [generate_scene(scene_seed(seed, i), config) for i in range(count)]


# -- preprocessing -----------------------------------------------------------

def fill_invalid(depth: np.ndarray, valid: Optional[np.ndarray] = None) -> np.ndarray:
    """Replace invalid pixels with the nearest valid value."""
    depth = np.asarray(depth, dtype=np.float64)
    if valid is None:
        valid = np.isfinite(depth) & (depth > 0)
    if not valid.any():
        raise UnfillableDepthError("depth map has no valid pixels")
    if valid.all():
        return depth.copy()
    _, (iy, ix) = ndimage.distance_transform_edt(~valid, return_indices=True)
    return depth[iy, ix]


def preprocess_depth(depth, near: float, far: float) -> np.ndarray:
    """Metres -> (3, H, W) in [-1, 1]: clamp, fill holes, affine map, replicate."""
    if not near < far:
        raise ValueError("need near < far")
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(depth) & (depth > 0)
    filled = fill_invalid(np.clip(np.where(valid, depth, near), near, far), valid)
    norm = (filled - near) / (far - near) * 2.0 - 1.0
    return np.repeat(norm[None], 3, axis=0)


def denormalize_depth(img, near: float, far: float) -> np.ndarray:
    """(C, H, W) or (H, W) normalised depth -> metres (channel mean, then affine)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    elif img.ndim != 2:
        raise ValueError(f"expected (C, H, W) or (H, W), got {img.shape}")
    return (img + 1.0) / 2.0 * (far - near) + near


# -- dataset I/O -------------------------------------------------------------

def _to_mm(depth):
    return np.clip(np.round(np.asarray(depth) * 1000.0), 0, 65535).astype(np.uint16)


def _write_png16(path, arr_u16):
    Image.fromarray(arr_u16.astype(np.uint16)).save(path)


def _read_png16(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im).astype(np.uint16)


def write_dataset(samples, out_dir, config: Optional[SceneConfig] = None,
                  generator_seed: Optional[int] = None) -> DatasetManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = config or SceneConfig()
    samples = list(samples)
    if samples:
        size = tuple(int(v) for v in samples[0].shape)
    else:
        size = (cfg.height, cfg.width)
    pal = build_default_palette(len(SCENE_CLASSES))
    pal_bytes = list(np.round((pal.colors + 1) * 127.5).astype(np.uint8).ravel())
    for i, s in enumerate(samples):
        stem = out / f"{i:06d}"
        Image.fromarray(np.round((np.moveaxis(s.rgb, 0, -1) + 1) * 127.5).astype(np.uint8), "RGB").save(
            f"{stem}_rgb.png")
        _write_png16(f"{stem}_raw.png", _to_mm(s.raw_depth))
        _write_png16(f"{stem}_gt.png", _to_mm(s.gt_depth))
        lab = Image.fromarray(s.labels.astype(np.uint8), "P")
        lab.putpalette(pal_bytes)
        lab.save(f"{stem}_label.png")
    manifest = DatasetManifest(
        sample_count=len(samples),
        image_size=size,
        depth_range=(cfg.near, cfg.far),
        generator_seed=generator_seed,
        sample_seeds=[s.seed for s in samples],
    )
    (out / "manifest.json").write_text(json.dumps(asdict(manifest), indent=2) + "\n")
    return manifest


def read_manifest(data_dir) -> DatasetManifest:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {data_dir}")
    try:
        raw = json.loads(path.read_text())
        man = DatasetManifest(
            sample_count=int(raw["sample_count"]),
            image_size=tuple(int(v) for v in raw["image_size"]),
            depth_range=tuple(float(v) for v in raw["depth_range"]),
            classes=list(raw.get("classes", SCENE_CLASSES)),
            generator_seed=raw.get("generator_seed"),
            format_version=int(raw["format_version"]),
            sample_seeds=raw.get("sample_seeds"),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"corrupted manifest {path}: {exc}") from None
    if man.format_version != FORMAT_VERSION:
        raise DatasetError(f"dataset format version {man.format_version}, expected {FORMAT_VERSION}")
    if man.sample_count < 0 or len(man.image_size) != 2 or len(man.depth_range) != 2:
        raise DatasetError(f"corrupted manifest {path}")
    return man


def read_sample(data_dir, index: int, manifest: Optional[DatasetManifest] = None) -> SceneSample:
    data_dir = Path(data_dir)
    stem = data_dir / f"{index:06d}"
    try:
        with Image.open(f"{stem}_rgb.png") as im:
            rgb = np.moveaxis(np.array(im.convert("RGB")), -1, 0).astype(np.float64) / 127.5 - 1.0
        raw = _read_png16(f"{stem}_raw.png").astype(np.float64) / 1000.0
        gt = _read_png16(f"{stem}_gt.png").astype(np.float64) / 1000.0
        with Image.open(f"{stem}_label.png") as im:
            labels = np.array(im).astype(np.int64)
    except (OSError, SyntaxError, ValueError) as exc:
        raise DatasetError(f"unreadable sample {index} in {data_dir}: {exc}") from None
    if manifest is not None and tuple(gt.shape) != tuple(manifest.image_size):
        raise DatasetError(f"sample {index} has shape {gt.shape}, manifest says {manifest.image_size}")
    seed = None
    if manifest is not None and manifest.sample_seeds and index < len(manifest.sample_seeds):
        seed = manifest.sample_seeds[index]
    return SceneSample(rgb=rgb, raw_depth=raw, gt_depth=gt, labels=labels, valid_mask=raw > 0, seed=seed)


def read_dataset(data_dir) -> tuple[DatasetManifest, Iterator[SceneSample]]:
    """Manifest plus a lazy iterator over samples; missing files raise ``DatasetError``."""
    manifest = read_manifest(data_dir)
    data_dir = Path(data_dir)
    for i in range(manifest.sample_count):
        for suffix in ("rgb", "raw", "gt", "label"):
            if not (data_dir / f"{i:06d}_{suffix}.png").exists():
                raise DatasetError(f"dataset truncated: {i:06d}_{suffix}.png missing")

    def it():
        for i in range(manifest.sample_count):
            yield read_sample(data_dir, i, manifest)

    return manifest, it()


def load_samples(data_dir) -> tuple[DatasetManifest, list[SceneSample]]:
    manifest, it = read_dataset(data_dir)
    return manifest, list(it)
