"""Readers/writers: PGM/PPM images, annotation CSV, ROI masks, CSDM density maps, manifests.

All binary integers are little-endian.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import CorruptFileError, ParseError
from .tensor import DTYPE

PathLike = Union[str, Path]


# --- netpbm -----------------------------------------------------------------

def _read_header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Pull `count` whitespace-separated header tokens, skipping # comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise CorruptFileError("truncated netpbm header")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_netpbm(path: PathLike) -> np.ndarray:
    """Raw uint8 raster of a binary PGM (H, W) or PPM (H, W, 3)."""
    data = Path(path).read_bytes()
    if data[:2] not in (b"P5", b"P6"):
        raise CorruptFileError(f"{path}: unknown magic {data[:2]!r}, expected P5 or P6")
    channels = 1 if data[:2] == b"P5" else 3
    try:
        (_, w, h, maxval), pos = _read_header_tokens(data, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise CorruptFileError(f"{path}: malformed netpbm header") from exc
    if maxval != 255:
        raise CorruptFileError(f"{path}: maxval {maxval} unsupported (only 255)")
    if w < 1 or h < 1:
        raise CorruptFileError(f"{path}: bad dimensions {w}x{h}")
    need = w * h * channels
    raster = data[pos:pos + need]
    if len(raster) < need:
        raise CorruptFileError(f"{path}: truncated raster ({len(raster)} of {need} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(h, w) if channels == 1 else arr.reshape(h, w, 3)


def write_netpbm(raster: np.ndarray, path: PathLike):
    raster = np.asarray(raster, dtype=np.uint8)
    if raster.ndim == 2:
        magic = b"P5"
    elif raster.ndim == 3 and raster.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write raster of shape {raster.shape}")
    h, w = raster.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + raster.tobytes())


def load_image(path: PathLike, rgb: bool = True) -> np.ndarray:
    """Load P5/P6 as a (1, C, H, W) float32 tensor scaled to [0, 1].

    With rgb=True a grayscale image is replicated to 3 channels; with
    rgb=False a colour image is reduced to its channel mean.
    """
    raster = read_netpbm(path).astype(DTYPE) / DTYPE(255)
    if raster.ndim == 2:
        chw = raster[None]
        if rgb:
            chw = np.repeat(chw, 3, axis=0)
    else:
        chw = raster.transpose(2, 0, 1)
        if not rgb:
            chw = chw.mean(axis=0, keepdims=True, dtype=DTYPE)
    return np.ascontiguousarray(chw[None])


def to_bytes(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def save_image(tensor: np.ndarray, path: PathLike):
    """Write a (1, 1|3, H, W) tensor in [0, 1] as P5 or P6."""
    tensor = np.asarray(tensor)
    if tensor.ndim != 4 or tensor.shape[0] != 1 or tensor.shape[1] not in (1, 3):
        raise ValueError(f"expected a (1, 1|3, H, W) tensor, got {tensor.shape}")
    raster = to_bytes(tensor[0])
    write_netpbm(raster[0] if raster.shape[0] == 1 else raster.transpose(1, 2, 0), path)


# --- annotations and ROI ------------------------------------------------------

def parse_annotations(path: PathLike) -> np.ndarray:
    """CSV with header 'x,y' and one 'x,y' float pair per line -> (n, 2) array."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].replace(" ", "").lower() != "x,y":
        raise ParseError(f"{path}: line 1: expected header 'x,y'")
    points = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        try:
            if len(fields) != 2:
                raise ValueError
            x, y = float(fields[0]), float(fields[1])
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: expected 'x,y', got {line!r}") from None
        if not (np.isfinite(x) and np.isfinite(y)):
            raise ParseError(f"{path}: line {lineno}: non-finite coordinate")
        points.append((x, y))
    return np.array(points, dtype=np.float64).reshape(-1, 2)


def save_annotations(points, path: PathLike):
    rows = ["x,y"] + [f"{float(x)!r},{float(y)!r}" for x, y in np.asarray(points, dtype=np.float64).reshape(-1, 2)]
    Path(path).write_text("\n".join(rows) + "\n")


def parse_roi(path: PathLike) -> np.ndarray:
    """P5 mask; nonzero pixels are inside the region of interest."""
    raster = read_netpbm(path)
    if raster.ndim != 2:
        raise CorruptFileError(f"{path}: ROI must be a P5 grayscale image")
    return raster != 0


# --- density maps -------------------------------------------------------------
# "CSDM", u32 version, u32 height, u32 width, height*width f32 row-major

DENSITY_MAGIC = b"CSDM"
DENSITY_VERSION = 1


def save_density_map(density: np.ndarray, path: PathLike):
    density = np.asarray(density)
    if density.ndim != 2:
        raise ValueError(f"density map must be 2-D, got {density.shape}")
    h, w = density.shape
    header = DENSITY_MAGIC + struct.pack("<III", DENSITY_VERSION, h, w)
    Path(path).write_bytes(header + np.ascontiguousarray(density, dtype="<f4").tobytes())


def load_density_map(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise CorruptFileError(f"{path}: truncated density map header")
    if data[:4] != DENSITY_MAGIC:
        raise CorruptFileError(f"{path}: bad magic, not a CSDM density map")
    version, h, w = struct.unpack("<III", data[4:16])
    if version != DENSITY_VERSION:
        raise CorruptFileError(f"{path}: unsupported density map version {version}")
    if len(data) != 16 + 4 * h * w:
        raise CorruptFileError(f"{path}: expected {4 * h * w} payload bytes, found {len(data) - 16}")
    return np.frombuffer(data[16:], dtype="<f4").reshape(h, w).astype(np.float32)


def export_visual(density: np.ndarray, path: PathLike):
    """Grayscale P5 rendering with the map maximum at 255."""
    density = np.asarray(density, dtype=np.float64)
    peak = density.max()
    scaled = density / peak if peak > 0 else np.zeros_like(density)
    write_netpbm(to_bytes(scaled), path)


# --- manifests ----------------------------------------------------------------

@dataclass
class SceneRecord:
    image_path: Path
    annotation_path: Path
    roi_path: Optional[Path] = None

    @property
    def name(self) -> str:
        return self.image_path.stem


@dataclass
class DatasetManifest:
    policy: str
    scenes: list = field(default_factory=list)


def read_manifest(path: PathLike) -> DatasetManifest:
    """First line 'policy=<name>', then tab-separated image, annotations[, roi].

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("policy="):
        raise ParseError(f"{path}: line 1: expected 'policy=<name>'")
    manifest = DatasetManifest(lines[0][len("policy="):].strip())
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) not in (2, 3):
            raise ParseError(f"{path}: line {lineno}: expected 2 or 3 tab-separated paths")
        paths = [base / f for f in fields]
        manifest.scenes.append(SceneRecord(*paths))
    if not manifest.scenes:
        raise ParseError(f"{path}: manifest lists no scenes")
    return manifest


def write_manifest(manifest: DatasetManifest, path: PathLike):
    path = Path(path)
    rows = [f"policy={manifest.policy}"]
    for rec in manifest.scenes:
        parts = [rec.image_path, rec.annotation_path] + ([rec.roi_path] if rec.roi_path else [])
        rows.append("\t".join(_relative(p, path.parent) for p in parts))
    path.write_text("\n".join(rows) + "\n")


def _relative(p: Path, base: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(base.resolve()))
    except ValueError:
        return str(Path(p).resolve())
