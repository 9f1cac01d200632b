"""Bit-exact on-disk formats: PFM float maps, binary PGM/PPM, the dataset
manifest, and CRC-protected network checkpoints.

PFM carries all float data (disparity, depth) so nothing is lost to 8-bit
quantization; PGM/PPM carry images and masks. All writers go through an
atomic rename so readers never observe partial files.
"""

from __future__ import annotations

import os
import shutil
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import CameraRig, ScalarField
from .imaging import Image

CHECKPOINT_MAGIC = b"DRCK"
CHECKPOINT_VERSIONS = (1,)

_F32_NAN = np.float32(np.nan)  # canonical quiet NaN, 0x7FC00000


class FormatError(ValueError):
    """Malformed, truncated or unsupported file content."""


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# -- PFM (portable float map) --------------------------------------------------

def write_pfm(f: ScalarField, path) -> bytes:
    """Write a one-channel PFM, little-endian, rows bottom-to-top.

    Invalid pixels are stored as NaN so the validity mask survives the
    round trip; valid values round to float32.
    """
    arr = f.values.astype(np.float32)
    arr[~f.valid] = _F32_NAN
    header = f"Pf\n{f.width} {f.height}\n-1.0\n".encode("ascii")
    payload = header + np.flipud(arr).astype("<f4").tobytes()
    _atomic_write(path, payload)
    return payload


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    # Skip whitespace and '#' comment lines, then read one token.
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("malformed header: missing token")
    return buf[start:pos], pos


def read_pfm(path) -> ScalarField:
    """Read a one-channel PFM; non-finite values become invalid pixels."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic == b"PF":
        raise FormatError("3-channel PFM not accepted for scalar fields")
    if magic != b"Pf":
        raise FormatError(f"not a PFM file (identifier {magic!r})")
    wtok, pos = _read_token(buf, pos)
    htok, pos = _read_token(buf, pos)
    stok, pos = _read_token(buf, pos)
    try:
        w, h, scale = int(wtok), int(htok), float(stok)
    except ValueError as e:
        raise FormatError(f"malformed header: {e}") from None
    if w < 1 or h < 1 or scale == 0.0:
        raise FormatError(f"malformed header: w={w} h={h} scale={scale}")
    pos += 1  # exactly one whitespace byte separates header and payload
    need = w * h * 4
    data = buf[pos:pos + need]
    if len(data) < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(data)}")
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.flipud(np.frombuffer(data, dtype=dtype).reshape(h, w))
    valid = np.isfinite(arr)
    values = np.where(valid, arr.astype(np.float64), 0.0)
    return ScalarField(values, valid)


# -- binary PGM / PPM ------------------------------------------------------------

def _quantize(values: np.ndarray) -> np.ndarray:
    # round-half-up: 0.5 -> 128
    return np.floor(values * 255.0 + 0.5).astype(np.uint8)


def _read_pnm_header(buf: bytes, magic: bytes) -> tuple[int, int, int]:
    tok, pos = _read_token(buf, 0)
    if tok != magic:
        raise FormatError(f"expected {magic!r} file, got identifier {tok!r}")
    wtok, pos = _read_token(buf, pos)
    htok, pos = _read_token(buf, pos)
    mtok, pos = _read_token(buf, pos)
    try:
        w, h, maxval = int(wtok), int(htok), int(mtok)
    except ValueError as e:
        raise FormatError(f"malformed header: {e}") from None
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}, only 255 is handled")
    if w < 1 or h < 1:
        raise FormatError(f"malformed header: {w}x{h}")
    return w, h, pos + 1


def write_pgm(values: np.ndarray, path) -> bytes:
    """Write an 8-bit binary PGM from float values in [0, 1], shape (H, W)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"PGM wants a 2-D array, got shape {values.shape}")
    h, w = values.shape
    payload = f"P5\n{w} {h}\n255\n".encode("ascii") + _quantize(values).tobytes()
    _atomic_write(path, payload)
    return payload


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    w, h, pos = _read_pnm_header(buf, b"P5")
    data = buf[pos:pos + w * h]
    if len(data) < w * h:
        raise FormatError(f"truncated payload: need {w * h} bytes, have {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def write_ppm(img: Image, path) -> bytes:
    """Write an 8-bit binary PPM from a 3-channel image."""
    if img.channels != 3:
        raise ValueError(f"PPM wants 3 channels, got {img.channels}")
    payload = (f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
               + _quantize(img.values).tobytes())
    _atomic_write(path, payload)
    return payload


def read_ppm(path) -> Image:
    buf = Path(path).read_bytes()
    w, h, pos = _read_pnm_header(buf, b"P6")
    need = w * h * 3
    data = buf[pos:pos + need]
    if len(data) < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    return Image(arr.astype(np.float64) / 255.0)


# -- dataset layout ---------------------------------------------------------------

SAMPLE_FILES = ("left.ppm", "right.ppm", "z_gt.pfm", "d_gt.pfm", "valid.pgm")


@dataclass
class ManifestEntry:
    """Relative file paths of one sample; d_baseline is optional."""

    left: str
    right: str
    z_gt: str
    d_gt: str
    valid: str
    d_baseline: Optional[str] = None

    @property
    def sample_dir(self) -> str:
        return str(Path(self.left).parent)


@dataclass
class Manifest:
    rig: CameraRig
    entries: list[ManifestEntry] = field(default_factory=list)
    d_max: Optional[int] = None


def write_manifest(manifest: Manifest, path) -> None:
    header = (f"baseline_m={manifest.rig.baseline_m!r}"
              f"\tfocal_x_px={manifest.rig.focal_x_px!r}")
    if manifest.d_max is not None:
        header += f"\td_max={manifest.d_max}"
    lines = [header]
    for e in manifest.entries:
        cols = [e.left, e.right, e.z_gt, e.d_gt, e.valid]
        if e.d_baseline is not None:
            cols.append(e.d_baseline)
        lines.append("\t".join(cols))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_manifest(path) -> Manifest:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FormatError("empty manifest")
    header = dict(kv.split("=", 1) for kv in lines[0].split("\t"))
    try:
        rig = CameraRig(float(header["baseline_m"]), float(header["focal_x_px"]))
    except KeyError as e:
        raise FormatError(f"manifest header missing {e}") from None
    d_max = int(header["d_max"]) if "d_max" in header else None
    entries = []
    for line in lines[1:]:
        if not line:
            continue
        cols = line.split("\t")
        if len(cols) not in (5, 6):
            raise FormatError(f"manifest row has {len(cols)} columns, expected 5 or 6")
        entries.append(ManifestEntry(*cols))
    return Manifest(rig, entries, d_max)


@dataclass
class DatasetSample:
    """One fully loaded sample (RAM side of the on-disk layout)."""

    left: Image
    right: Image
    z_gt: ScalarField
    d_gt: ScalarField
    valid: np.ndarray
    d_baseline: Optional[ScalarField] = None


def load_sample(root, entry: ManifestEntry) -> DatasetSample:
    root = Path(root)
    d_base = None
    if entry.d_baseline is not None:
        d_base = read_pfm(root / entry.d_baseline)
    return DatasetSample(
        left=read_ppm(root / entry.left),
        right=read_ppm(root / entry.right),
        z_gt=read_pfm(root / entry.z_gt),
        d_gt=read_pfm(root / entry.d_gt),
        valid=read_pgm(root / entry.valid) > 0.5,
        d_baseline=d_base,
    )


def write_sample_dir(sample_dir, left: Image, right: Image,
                     z_gt: ScalarField, d_gt: ScalarField,
                     valid: np.ndarray) -> ManifestEntry:
    """Write one sample's five core files and return its manifest entry."""
    sample_dir = Path(sample_dir)
    sample_dir.mkdir(parents=True, exist_ok=True)
    write_ppm(left, sample_dir / "left.ppm")
    write_ppm(right, sample_dir / "right.ppm")
    write_pfm(z_gt, sample_dir / "z_gt.pfm")
    write_pfm(d_gt, sample_dir / "d_gt.pfm")
    write_pgm(valid.astype(np.float64), sample_dir / "valid.pgm")
    name = sample_dir.name
    return ManifestEntry(*(f"{name}/{f}" for f in SAMPLE_FILES))


def ingest_external_disparity(manifest_path, sample_index: int, pfm_path) -> ManifestEntry:
    """Register an externally produced disparity map as a sample's baseline.

    The PFM must match the sample's image dimensions. Bytes are copied
    verbatim into the sample directory as d_baseline.pfm and the manifest
    is rewritten with the extra column.
    """
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    if not (0 <= sample_index < len(manifest.entries)):
        raise IndexError(f"sample index {sample_index} out of range")
    entry = manifest.entries[sample_index]
    root = manifest_path.parent
    ext = read_pfm(pfm_path)
    z_gt = read_pfm(root / entry.z_gt)
    if (ext.height, ext.width) != (z_gt.height, z_gt.width):
        raise ValueError(
            f"external disparity is {ext.height}x{ext.width}, "
            f"sample is {z_gt.height}x{z_gt.width}"
        )
    dst_rel = f"{entry.sample_dir}/d_baseline.pfm"
    shutil.copyfile(pfm_path, root / dst_rel)
    entry.d_baseline = dst_rel
    write_manifest(manifest, manifest_path)
    return entry


# -- checkpoints -------------------------------------------------------------------

def write_checkpoint_tensors(tensors: dict[str, np.ndarray], path) -> None:
    """Serialize named float arrays: DRCK magic, version, float32 payload,
    trailing CRC32 of everything before it."""
    if len(set(tensors)) != len(tensors):
        raise ValueError("tensor names must be unique")
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSIONS[-1])
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        out += struct.pack("<I", len(nb))
        out += nb
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    _atomic_write(path, bytes(out))


def read_checkpoint_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise FormatError("truncated checkpoint")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (crc_stored,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc_stored:
        raise FormatError("CRC mismatch: checkpoint is corrupted")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version not in CHECKPOINT_VERSIONS:
        raise FormatError(
            f"unknown checkpoint version {version}; supported: "
            + ", ".join(map(str, CHECKPOINT_VERSIONS))
        )
    (count,) = struct.unpack_from("<I", buf, 8)
    pos = 12
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            if name in tensors:
                raise FormatError(f"duplicate tensor name {name!r}")
            tensors[name] = arr.astype(np.float64)
    except struct.error:
        raise FormatError("truncated checkpoint") from None
    return tensors


def save_checkpoint(net, path) -> None:
    """Persist a RefineNetwork: parameters plus architecture metadata."""
    tensors = {name: t.data for name, t in net.params.items()}
    cfg = net.cfg
    tensors["meta.arch"] = np.array(
        [cfg.levels, cfg.base_channels, cfg.in_channels, cfg.leaky_slope],
        dtype=np.float64,
    )
    tensors["meta.head"] = np.array([float(net.head.value)], dtype=np.float64)
    write_checkpoint_tensors(tensors, path)


def load_checkpoint(path):
    """Rebuild a RefineNetwork from a checkpoint written by save_checkpoint."""
    from .refine import HeadMode, RefineNetwork, UNetConfig

    tensors = read_checkpoint_tensors(path)
    try:
        arch = tensors.pop("meta.arch")
        head_raw = tensors.pop("meta.head")
    except KeyError as e:
        raise FormatError(f"checkpoint missing tensor {e}") from None
    cfg = UNetConfig(
        levels=int(arch[0]),
        base_channels=int(arch[1]),
        in_channels=int(arch[2]),
        leaky_slope=float(arch[3]),
    )
    head = HeadMode(int(head_raw[0]))
    return RefineNetwork.from_tensors(cfg, head, tensors)
