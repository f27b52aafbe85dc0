"""Rasterize normalized feature vectors into filled radar-chart bitmaps.

Ink is 0.0, background 1.0. A pixel is inked when its center lies inside the
polygon under the even-odd rule; the pixel holding the chart center is always
inked so that an all-zero day stays distinguishable from a padding frame.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import N_FEATURES


@dataclass(frozen=True)
class RadarGeometry:
    height: int = 32
    width: int = 32
    d: int = N_FEATURES
    center: tuple[float, float] | None = None
    max_radius: float | None = None
    axis_angles: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        if self.center is None:
            object.__setattr__(self, "center", (self.width / 2, self.height / 2))
        if self.max_radius is None:
            object.__setattr__(self, "max_radius", min(self.height, self.width) / 2 - 1)
        if self.d < 3:
            raise ValueError("a radar chart needs at least 3 axes")
        if self.max_radius > min(self.height, self.width) / 2 - 1:
            raise ValueError(f"max_radius {self.max_radius} leaves no margin in {self.height}x{self.width}")
        angles = tuple(math.pi / 2 - 2 * math.pi * k / self.d for k in range(self.d))
        object.__setattr__(self, "axis_angles", angles)

    @classmethod
    def square(cls, size: int) -> "RadarGeometry":
        return cls(height=size, width=size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def hub_pixel(self) -> tuple[int, int]:
        cx, cy = self.center
        return (min(int(math.floor(cy)), self.height - 1), min(int(math.floor(cx)), self.width - 1))

    def vertices(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vertex coordinates for a batch ``(..., d)``; y grows downward."""
        ang = np.asarray(self.axis_angles)
        cx, cy = self.center
        r = np.asarray(v, dtype=np.float64) * self.max_radius
        return cx + r * np.cos(ang), cy - r * np.sin(ang)


DEFAULT_GEOMETRY = RadarGeometry()


def _check_vectors(vs: np.ndarray, d: int):
    if vs.ndim != 2 or vs.shape[1] != d:
        raise ValueError(f"expected vectors of length {d}, got shape {vs.shape[1:]}")
    bad = ~np.all((vs >= 0.0) & (vs <= 1.0), axis=1)
    if bad.any():
        i = int(np.argmax(bad))
        raise ValueError(f"item {i}: components must lie in [0, 1] (normalize upstream)")


def _ink_masks(vs: np.ndarray, geometry: RadarGeometry) -> np.ndarray:
    """Boolean ink masks ``(N, H, W)`` by scanline crossing parity."""
    h, w = geometry.shape
    xs, ys = geometry.vertices(vs)                       # (N, d)
    x0, y0 = xs[:, :, None], ys[:, :, None]              # edge k runs vertex k -> k+1
    x1, y1 = np.roll(xs, -1, axis=1)[:, :, None], np.roll(ys, -1, axis=1)[:, :, None]
    py = np.arange(h) + 0.5                              # (H,)
    cross = (y0 > py) != (y1 > py)                       # (N, d, H)
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = (x1 - x0) * (py - y0) / (y1 - y0) + x0
    xi = np.where(cross, xi, np.inf)
    px = np.arange(w) + 0.5
    # number of crossings strictly left of each pixel center, per row
    left = (xi[..., None] < px).sum(axis=1)              # (N, H, W)
    ink = (left & 1).astype(bool)
    r, c = geometry.hub_pixel
    ink[:, r, c] = True
    return ink


def render_chart(v, geometry: RadarGeometry = DEFAULT_GEOMETRY) -> np.ndarray:
    vs = np.asarray(v, dtype=np.float64)[None, :]
    _check_vectors(vs, geometry.d)
    ink = _ink_masks(vs, geometry)[0]
    return np.where(ink, 0.0, 1.0).astype(np.float32)


def render_padding(geometry: RadarGeometry = DEFAULT_GEOMETRY) -> np.ndarray:
    return np.ones(geometry.shape, dtype=np.float32)


def _render_chunk(args) -> np.ndarray:
    vs, geometry = args
    return np.where(_ink_masks(vs, geometry), 0.0, 1.0).astype(np.float32)


def render_batch(vectors, geometry: RadarGeometry = DEFAULT_GEOMETRY, workers: int = 1,
                 chunk: int = 256) -> np.ndarray:
    """Render many vectors; returns an ``(N, H, W)`` float32 array.

    With ``workers > 1`` chunks are rendered in worker processes; the result is
    identical to a serial run because every chunk is a pure function of its rows.
    """
    vs = np.asarray(vectors, dtype=np.float64)
    if vs.size == 0:
        return np.empty((0,) + geometry.shape, dtype=np.float32)
    _check_vectors(vs, geometry.d)
    # keep the temporary (chunk, d, H, W) crossing tensor bounded at larger sizes
    chunk = max(1, min(chunk, 256 * 1024 // (geometry.height * geometry.width)))
    parts = [(vs[i:i + chunk], geometry) for i in range(0, len(vs), chunk)]
    if workers > 1 and len(parts) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_render_chunk, parts))
    else:
        out = [_render_chunk(p) for p in parts]
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------- analysis helpers

def ink_mask(image) -> np.ndarray:
    return np.asarray(image) < 0.5


def _nearest_axis(theta, d: int):
    # axis k sits at pi/2 - 2*pi*k/d; invert and round to the nearest axis
    k = np.round((math.pi / 2 - theta) * d / (2 * math.pi))
    return k.astype(int) % d


def sector_index(geometry: RadarGeometry = DEFAULT_GEOMETRY) -> np.ndarray:
    """Per-pixel index of the nearest axis by angle (pixel centers)."""
    h, w = geometry.shape
    cx, cy = geometry.center
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    return _nearest_axis(np.arctan2(cy - yy, xx - cx), geometry.d)


def sector_weights(geometry: RadarGeometry = DEFAULT_GEOMETRY, sub: int = 8) -> np.ndarray:
    """(H, W, d) share of each pixel's area falling in each axis sector (sub×sub supersampling)."""
    h, w = geometry.shape
    cx, cy = geometry.center
    off = (np.arange(sub) + 0.5) / sub
    ys = (np.arange(h)[:, None] + off).ravel()
    xs = (np.arange(w)[:, None] + off).ravel()
    k = _nearest_axis(np.arctan2(cy - ys[:, None], xs[None, :] - cx), geometry.d)
    k = k.reshape(h, sub, w, sub)
    onehot = np.eye(geometry.d)[k]                       # (h, sub, w, sub, d)
    return onehot.mean(axis=(1, 3))


def sector_mass(image, geometry: RadarGeometry = DEFAULT_GEOMETRY, fractional: bool = False) -> np.ndarray:
    """Ink per angular sector; ``fractional`` splits boundary pixels by area."""
    ink = ink_mask(image)
    if fractional:
        return sector_weights(geometry)[ink].sum(axis=0)
    return np.bincount(sector_index(geometry)[ink], minlength=geometry.d).astype(np.int64)


def decode_radii(image, geometry: RadarGeometry = DEFAULT_GEOMETRY) -> np.ndarray:
    """Per-axis extent: farthest ink pixel center in the axis's sector, projected on the axis."""
    ink = ink_mask(image)
    h, w = geometry.shape
    cx, cy = geometry.center
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dx, dy = xx - cx, cy - yy
    sec = sector_index(geometry)
    out = np.zeros(geometry.d)
    for k, a in enumerate(geometry.axis_angles):
        sel = ink & (sec == k)
        if sel.any():
            proj = dx[sel] * math.cos(a) + dy[sel] * math.sin(a)
            out[k] = min(max(proj.max(), 0.0) / geometry.max_radius, 1.0)
    return out


def dominant_axis(image, geometry: RadarGeometry = DEFAULT_GEOMETRY) -> int:
    return int(np.argmax(decode_radii(image, geometry)))


# ---------------------------------------------------------------- PGM

def encode_pgm(image) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM needs a 2-D image")
    px = np.floor(np.clip(img, 0.0, 1.0) * 255 + 0.5).astype(np.uint8)
    h, w = px.shape
    return b"P5\n%d %d\n255\n" % (w, h) + px.tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    # header tokens are separated by single whitespace bytes; pixel bytes may look like whitespace
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError("not an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    px = np.frombuffer(data[pos + 1: pos + 1 + w * h], dtype=np.uint8).reshape(h, w)
    return px.astype(np.float32) / 255


def pgm_name(courier_id: str, date) -> str:
    return f"{courier_id}_{np.datetime64(date, 'D')}.pgm"


def write_pgm(path, image) -> Path:
    path = Path(path)
    path.write_bytes(encode_pgm(image))
    return path


def write_chart_pgm(directory, courier_id: str, date, image) -> Path:
    return write_pgm(Path(directory) / pgm_name(courier_id, date), image)
