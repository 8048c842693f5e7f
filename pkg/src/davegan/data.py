"""Synthetic structures, micrograph tiling and binary graymap (PGM) I/O."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MIN_AREA_FRACTION = 0.012
MAX_AREA_FRACTION = 0.19
MAX_ASPECT = 4.0


class PGMError(ValueError):
    """Malformed or unsupported graymap file."""


@dataclass(frozen=True)
class EllipseParams:
    a: float  # semi-major axis, pixels
    b: float  # semi-minor axis, pixels
    x1: float  # center, horizontal pixel coordinate
    x2: float  # center, vertical pixel coordinate
    phi: float  # angle between major axis and the horizontal axis

    def half_extents(self) -> tuple[float, float]:
        c, s = math.cos(self.phi), math.sin(self.phi)
        ex = math.sqrt((self.a * c) ** 2 + (self.b * s) ** 2)
        ey = math.sqrt((self.a * s) ** 2 + (self.b * c) ** 2)
        return ex, ey

    def area_fraction(self, size: int) -> float:
        return math.pi * self.a * self.b / (size * size)

    def violations(self, size: int) -> list[str]:
        out = []
        if self.b <= 0 or self.a < self.b:
            out.append("need a >= b > 0")
        elif self.a / self.b > MAX_ASPECT:
            out.append(f"aspect ratio {self.a / self.b:.3f} exceeds {MAX_ASPECT}")
        frac = self.area_fraction(size)
        if not MIN_AREA_FRACTION < frac < MAX_AREA_FRACTION:
            out.append(f"area fraction {frac:.4f} outside ({MIN_AREA_FRACTION}, {MAX_AREA_FRACTION})")
        ex, ey = self.half_extents()
        if self.x1 - ex < 0 or self.x1 + ex > size or self.x2 - ey < 0 or self.x2 + ey > size:
            out.append("ellipse is not entirely inside the image")
        return out


@dataclass
class DataSet:
    samples: list[np.ndarray]
    image_size: int
    phase_levels: tuple[float, ...] = (0.0, 1.0)
    params: list = field(default_factory=list)

    def __post_init__(self):
        for s in self.samples:
            if s.shape != (self.image_size, self.image_size):
                raise ValueError(f"sample of shape {s.shape} in a {self.image_size}x{self.image_size} set")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def as_array(self) -> np.ndarray:
        """(N, 1, H, W) float array."""
        return np.stack(self.samples)[:, None].astype(np.float64)


def rasterize_ellipse(p: EllipseParams, size: int) -> np.ndarray:
    """Binary image: a pixel is inside when its center lies within the ellipse."""
    bad = p.violations(size)
    if bad:
        raise ValueError("invalid ellipse: " + "; ".join(bad))
    centers = np.arange(size) + 0.5
    xx, yy = np.meshgrid(centers, centers)
    dx, dy = xx - p.x1, yy - p.x2
    c, s = math.cos(p.phi), math.sin(p.phi)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return ((u / p.a) ** 2 + (v / p.b) ** 2 <= 1.0).astype(np.float64)


def sample_ellipse_params(rng: np.random.Generator, size: int, max_attempts: int = 10_000) -> EllipseParams:
    for _ in range(max_attempts):
        a, b = rng.uniform(2.0, size / 2.0, 2)
        a, b = max(a, b), min(a, b)
        phi = rng.uniform(0.0, math.pi)
        if a / b > MAX_ASPECT:
            continue
        if not MIN_AREA_FRACTION < math.pi * a * b / size**2 < MAX_AREA_FRACTION:
            continue
        ex, ey = EllipseParams(a, b, 0.0, 0.0, phi).half_extents()
        if 2 * ex > size or 2 * ey > size:
            continue
        x1 = rng.uniform(ex, size - ex)
        x2 = rng.uniform(ey, size - ey)
        p = EllipseParams(a, b, x1, x2, phi)
        if not p.violations(size):
            return p
    raise RuntimeError(f"rejection sampling found no admissible ellipse for size {size} "
                       f"after {max_attempts} attempts")


def sample_ellipse_dataset(n: int, size: int, rng: np.random.Generator | int) -> DataSet:
    """``n`` independent single-ellipse structures."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    params = [sample_ellipse_params(rng, size) for _ in range(n)]
    return DataSet([rasterize_ellipse(p, size) for p in params], size, params=params)


def reference_ellipse(size: int = 32) -> np.ndarray:
    """Centered vertical ellipse with axes 6 (horizontal) and 14 (vertical) pixels long."""
    return rasterize_ellipse(EllipseParams(7.0, 3.0, size / 2, size / 2, math.pi / 2), size)


def make_checkerboard(size: int, cell: int) -> np.ndarray:
    """Alternating cells, the top-left cell set to 1."""
    if cell < 1 or size % cell:
        raise ValueError(f"cell size {cell} does not divide image size {size}")
    idx = np.arange(size) // cell
    return ((idx[:, None] + idx[None, :]) % 2 == 0).astype(np.float64)


def tile_micrograph(image: np.ndarray, tile: int = 64) -> list[np.ndarray]:
    """Cut into non-overlapping square tiles in row-major order."""
    image = np.asarray(image)
    h, w = image.shape
    if tile < 1 or h % tile or w % tile:
        raise ValueError(f"image of shape {image.shape} is not divisible into {tile}x{tile} tiles")
    return [image[r : r + tile, c : c + tile].copy()
            for r in range(0, h, tile) for c in range(0, w, tile)]


def untile(tiles: Sequence[np.ndarray], rows: int, cols: int) -> np.ndarray:
    if len(tiles) != rows * cols:
        raise ValueError(f"{len(tiles)} tiles do not form a {rows}x{cols} grid")
    return np.block([[tiles[r * cols + c] for c in range(cols)] for r in range(rows)])


# ---------------------------------------------------------------------------
# binary PGM ("P5") files

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_image(path) -> np.ndarray:
    """Read an 8-bit binary graymap, mapping levels linearly onto [0, 1]."""
    path = Path(path)
    blob = path.read_bytes()
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(blob, pos)
        if m is None:
            raise PGMError(f"{path}: malformed header near byte {pos}")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise PGMError(f"{path}: not a binary graymap (magic {fields[0][:8]!r} at byte 0)")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise PGMError(f"{path}: non-numeric header field before byte {pos}") from None
    if not 0 < maxval <= 255:
        raise PGMError(f"{path}: unsupported max value {maxval} (only 8-bit graymaps)")
    if width < 1 or height < 1:
        raise PGMError(f"{path}: empty image {width}x{height}")
    pos += 1  # single whitespace byte after maxval
    need = width * height
    have = len(blob) - pos
    if have < need:
        raise PGMError(f"{path}: truncated payload, expected {need} bytes from byte {pos} "
                       f"but file ends at byte {len(blob)}")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    return pixels.reshape(height, width).astype(np.float64) / maxval


def to_bytes(image: np.ndarray) -> np.ndarray:
    """Scale [0, 1] to 0..255 with round-half-up."""
    x = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def write_image(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        image = image.reshape(image.shape[-2:])
    h, w = image.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + to_bytes(image).tobytes())


def write_manifest(path, image_paths: Iterable) -> None:
    path = Path(path)
    lines = []
    for p in image_paths:
        p = Path(p)
        try:
            p = p.resolve().relative_to(path.parent.resolve())
        except ValueError:
            pass
        lines.append(p.as_posix())
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[Path]:
    """Paths listed one per line, relative entries resolved against the manifest's folder."""
    path = Path(path)
    out = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        p = Path(line)
        out.append(p if p.is_absolute() else path.parent / p)
    return out


def load_images(source) -> list[np.ndarray]:
    """Images from a manifest file or every ``*.pgm`` in a directory (sorted)."""
    source = Path(source)
    if source.is_dir():
        manifest = source / "manifest.txt"
        paths = read_manifest(manifest) if manifest.exists() else sorted(source.glob("*.pgm"))
    else:
        paths = read_manifest(source)
    return [read_image(p) for p in paths]


def save_dataset(ds: DataSet, out_dir, prefix: str = "sample") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(ds))))
    paths = []
    for i, img in enumerate(ds.samples):
        p = out_dir / f"{prefix}_{i:0{width}d}.pgm"
        write_image(p, img)
        paths.append(p)
    manifest = out_dir / "manifest.txt"
    write_manifest(manifest, paths)
    return manifest
