"""Deterministic procedural stereo pairs with analytic ground truth.

Scenes are ray-cast: textured primitives (fronto-parallel and slanted
rectangles, spheres) in front of a far background plane, viewed by two
pinhole cameras separated horizontally by the rig baseline. Textures are
object-space value noise plus a soft checker, so the same surface point
shades identically in both views and block matching is well-posed.
Everything derives from the sample seed; identical specs give
bit-identical samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import CameraRig, ScalarField
from .imaging import Image
from . import io_formats
from .parallel import parallel_map

_LIGHT = np.array([0.35, -0.5, -0.75])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    width: int = 192
    height: int = 96
    rig: CameraRig = field(default_factory=lambda: CameraRig(0.54, 480.0))
    object_count: int = 8
    depth_range_m: tuple[float, float] = (4.0, 90.0)
    texture_scale: float = 1.0

    def __post_init__(self):
        z_min, z_max = self.depth_range_m
        if not (1.0 <= z_min < z_max <= 100.0):
            raise ValueError(f"depth range must satisfy 1 <= z_min < z_max <= 100, "
                             f"got [{z_min}, {z_max}]")
        if self.object_count < 1:
            raise ValueError(f"object_count must be >= 1, got {self.object_count}")
        if self.width < 2 or self.height < 2:
            raise ValueError(f"scene must be at least 2x2, got {self.width}x{self.height}")
        if self.texture_scale <= 0:
            raise ValueError("texture_scale must be > 0")


@dataclass
class StereoSample:
    """Rectified pair with dense analytic ground truth.

    `covisible` marks left pixels whose warp footprint in the right image
    sees the same surface: the subset where photoconsistency of a
    ground-truth warp is expected to hold.
    """

    left: Image
    right: Image
    z_gt: ScalarField
    d_gt: ScalarField
    valid: np.ndarray
    covisible: np.ndarray


# -- primitives -----------------------------------------------------------------

@dataclass
class _Rect:
    center: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    half_u: float
    half_v: float
    normal: np.ndarray

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Depth t (= camera Z, since dir_z == 1) per ray, inf on miss."""
        denom = dirs @ self.normal
        num = (self.center - origin) @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
        p = origin + t[..., None] * dirs
        rel = p - self.center
        lu = rel @ self.axis_u
        lv = rel @ self.axis_v
        hit = (t > 0) & (np.abs(lu) <= self.half_u) & (np.abs(lv) <= self.half_v)
        return np.where(hit, t, np.inf)

    def local_uv(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rel = p - self.center
        # normalized to roughly [-0.5, 0.5] so texture density tracks size
        return (rel @ self.axis_u) / (2 * self.half_u), (rel @ self.axis_v) / (2 * self.half_v)

    def normals(self, p: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.normal, p.shape)


@dataclass
class _Sphere:
    center: np.ndarray
    radius: float

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origin - self.center
        a = np.einsum("...i,...i->...", dirs, dirs)
        b = 2.0 * (dirs @ oc)
        c = oc @ oc - self.radius * self.radius
        disc = b * b - 4.0 * a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t = (-b - sq) / (2.0 * a)
        return np.where((disc > 0) & (t > 0), t, np.inf)

    def local_uv(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = (p - self.center) / self.radius
        u = np.arctan2(n[..., 2], n[..., 0]) / (2 * math.pi)
        v = np.arcsin(np.clip(n[..., 1], -1.0, 1.0)) / math.pi
        return u, v

    def normals(self, p: np.ndarray) -> np.ndarray:
        return (p - self.center) / self.radius


# -- deterministic texture hashing ------------------------------------------------

def _hash_u64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; wraps mod 2^64 by uint64 arithmetic
    x = (x + np.uint64(0x9E3779B97F4A7C15)).astype(np.uint64)
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return x


def _lattice(ix: np.ndarray, iy: np.ndarray, salt: int) -> np.ndarray:
    key = (ix.astype(np.int64).view(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
           ^ iy.astype(np.int64).view(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
           ^ np.uint64(salt & 0xFFFFFFFFFFFFFFFF))
    return (_hash_u64(key) >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _value_noise(u: np.ndarray, v: np.ndarray, salt: int) -> np.ndarray:
    iu = np.floor(u)
    iv = np.floor(v)
    fu = u - iu
    fv = v - iv
    # smoothstep fade keeps the field C1, which keeps warp resampling benign
    fu = fu * fu * (3.0 - 2.0 * fu)
    fv = fv * fv * (3.0 - 2.0 * fv)
    n00 = _lattice(iu, iv, salt)
    n10 = _lattice(iu + 1, iv, salt)
    n01 = _lattice(iu, iv + 1, salt)
    n11 = _lattice(iu + 1, iv + 1, salt)
    return (n00 * (1 - fu) * (1 - fv) + n10 * fu * (1 - fv)
            + n01 * (1 - fu) * fv + n11 * fu * fv)


def _texture(u: np.ndarray, v: np.ndarray, salt: int, scale: float) -> np.ndarray:
    """Two-octave value noise plus a soft sine checker, range [0, 1]."""
    a = u * 6.0 * scale
    b = v * 6.0 * scale
    noise = 0.68 * _value_noise(a, b, salt) + 0.32 * _value_noise(
        2.0 * a + 17.0, 2.0 * b + 29.0, salt ^ 0x5BF03635)
    checker = 0.5 + 0.5 * np.sin(math.pi * a) * np.sin(math.pi * b)
    return np.clip(0.55 * noise + 0.3 * checker + 0.075, 0.0, 1.0)


# -- scene assembly ----------------------------------------------------------------

def _build_objects(spec: SceneSpec, rng: np.random.Generator) -> list:
    z_min, z_max = spec.depth_range_m
    fx = spec.rig.focal_x_px
    cx = (spec.width - 1) / 2.0
    cy = (spec.height - 1) / 2.0
    z_lo = z_min * 1.02
    z_hi = z_max * 0.88
    objects = []
    for i in range(spec.object_count):
        z = math.exp(rng.uniform(math.log(z_lo), math.log(z_hi)))
        px = rng.uniform(0.12 * spec.width, 0.88 * spec.width)
        py = rng.uniform(0.12 * spec.height, 0.88 * spec.height)
        center = np.array([(px - cx) / fx * z, (py - cy) / fx * z, z])
        size_px = rng.uniform(16.0, 52.0)
        half = 0.5 * size_px / fx * z
        kind = i % 3
        if kind == 2:
            r = min(half, 0.5 * (z - z_lo), 0.5 * (z_hi - z))
            if r > 0.01 * z:
                objects.append(_Sphere(center, r))
                continue
            kind = 0  # too cramped for a sphere; fall back to a flat card
        if kind == 0:
            tilt = 0.0
        else:
            tilt = rng.uniform(0.35, 0.95)  # radians, up to ~55 degrees
        phi = rng.uniform(0.0, 2.0 * math.pi)
        # tilt the plane normal away from -z around a random in-plane axis
        axis_u = np.array([math.cos(phi), math.sin(phi), 0.0])
        axis_w = np.array([-math.sin(phi), math.cos(phi), 0.0])
        normal = math.cos(tilt) * np.array([0.0, 0.0, -1.0]) + math.sin(tilt) * axis_w
        axis_v = np.cross(normal, axis_u)
        hu, hv = half, half * rng.uniform(0.6, 1.4)
        # keep all four corners inside the legal depth band
        for _ in range(8):
            corners_z = [center[2] + su * hu * axis_u[2] + sv * hv * axis_v[2]
                         for su in (-1, 1) for sv in (-1, 1)]
            if min(corners_z) >= z_lo and max(corners_z) <= z_hi:
                break
            hu *= 0.7
            hv *= 0.7
        objects.append(_Rect(center, axis_u, axis_v, hu, hv, normal))
    return objects


def _cast(objects: list, z_bg: float, origin: np.ndarray,
          dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-hit depth and primitive id (0 = background) per ray."""
    depth = np.full(dirs.shape[:-1], z_bg)
    ids = np.zeros(dirs.shape[:-1], dtype=np.int32)
    for k, obj in enumerate(objects, start=1):
        t = obj.intersect(origin, dirs)
        closer = t < depth
        depth = np.where(closer, t, depth)
        ids = np.where(closer, k, ids)
    return depth, ids


def _shade(objects: list, z_bg: float, origin: np.ndarray, dirs: np.ndarray,
           depth: np.ndarray, ids: np.ndarray, spec: SceneSpec) -> np.ndarray:
    """Per-pixel RGB from object-space textures and fixed Lambert light."""
    p = origin + depth[..., None] * dirs
    rgb = np.zeros(depth.shape + (3,))
    bg_cell = 14.0 * z_bg / spec.rig.focal_x_px  # ~14 px per noise cell
    for k in range(len(objects) + 1):
        mask = ids == k
        if not mask.any():
            continue
        pk = p[mask]
        if k == 0:
            u = pk[:, 0] / bg_cell
            v = pk[:, 1] / bg_cell
            lambert = np.full(u.shape, 0.9)
            salt = 0xB0
        else:
            obj = objects[k - 1]
            u, v = obj.local_uv(pk)
            n = obj.normals(pk)
            facing = np.sign(-n[..., 2:3] + 1e-12)  # orient toward the camera
            lambert = np.clip((facing * n * _LIGHT).sum(-1), 0.0, 1.0)
            salt = 0xC1A0 + k
        base = 0.4 + 0.6 * lambert
        for c in range(3):
            tex = _texture(u, v, (salt << 8) | c, spec.texture_scale)
            rgb[mask, c] = np.clip(base * (0.25 + 0.75 * tex), 0.0, 1.0)
    return rgb


def _pixel_dirs(spec: SceneSpec, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    fx = spec.rig.focal_x_px
    cx = (spec.width - 1) / 2.0
    cy = (spec.height - 1) / 2.0
    return np.stack([(xs - cx) / fx, (ys - cy) / fx, np.ones_like(xs)], axis=-1)


def generate_scene(spec: SceneSpec) -> StereoSample:
    """Render one stereo pair with analytic depth, disparity and masks."""
    rng = np.random.default_rng(np.random.PCG64(spec.seed))
    objects = _build_objects(spec, rng)
    z_bg = spec.depth_range_m[1]
    h, w = spec.height, spec.width
    rig = spec.rig

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dirs = _pixel_dirs(spec, xs, ys)
    left_origin = np.zeros(3)
    right_origin = np.array([rig.baseline_m, 0.0, 0.0])

    z_left, id_left = _cast(objects, z_bg, left_origin, dirs)
    z_right, id_right = _cast(objects, z_bg, right_origin, dirs)
    left = Image(_shade(objects, z_bg, left_origin, dirs, z_left, id_left, spec))
    right = Image(_shade(objects, z_bg, right_origin, dirs, z_right, id_right, spec))

    d_gt = rig.bf / z_left

    # Covisibility: the warp target x - d and both its bilinear neighbors
    # must see the same primitive, and the continuous right-view ray must
    # not be blocked by a nearer surface (convex self-occlusion).
    xt = xs - d_gt
    inb = (xt >= 0.0) & (xt <= w - 1.0)
    x0 = np.clip(np.floor(xt).astype(np.intp), 0, w - 2)
    rows = np.arange(h)[:, None] * np.ones(w, dtype=np.intp)[None, :]
    same_id = (id_right[rows, x0] == id_left) & (id_right[rows, x0 + 1] == id_left)
    dirs_r = _pixel_dirs(spec, np.clip(xt, 0.0, w - 1.0), ys)
    z_reproj, _ = _cast(objects, z_bg, right_origin, dirs_r)
    unblocked = z_reproj >= z_left * (1.0 - 1e-9)
    covis = inb & same_id & unblocked

    valid = np.ones((h, w), dtype=bool)
    return StereoSample(
        left=left,
        right=right,
        z_gt=ScalarField(z_left, valid.copy()),
        d_gt=ScalarField(d_gt, valid.copy()),
        valid=valid,
        covisible=covis,
    )


def generate_dataset(spec_base: SceneSpec, count: int, out_dir,
                     threads: int = 1) -> Path:
    """Write `count` samples (seeds seed..seed+count-1) plus manifest.tsv.

    Returns the manifest path. Reruns with identical arguments produce
    identical bytes.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def render_one(i: int) -> io_formats.ManifestEntry:
        from dataclasses import replace
        sample = generate_scene(replace(spec_base, seed=spec_base.seed + i))
        return io_formats.write_sample_dir(
            out_dir / f"sample_{i:05d}", sample.left, sample.right,
            sample.z_gt, sample.d_gt, sample.valid)

    entries = parallel_map(render_one, list(range(count)), threads)
    manifest = io_formats.Manifest(spec_base.rig, entries)
    manifest_path = out_dir / "manifest.tsv"
    io_formats.write_manifest(manifest, manifest_path)
    return manifest_path
