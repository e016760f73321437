"""Raw gray-level and label volume I/O with `.raw.info` sidecars, slice
window extraction for the 2.5D variant, and padded tiled whole-volume
inference.

`.raw` files store voxel (x, y, z) at linear offset x + width*(y + height*z)
little-endian, which maps to a C-ordered numpy array of shape
(depth, height, width).  The `.raw.info` sidecar is UTF-8 `key=value`
lines with keys width, height, depth, dtype (u8 or u16); `#` starts a
comment and unknown keys survive a rewrite.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .layers import Mode

log = logging.getLogger(__name__)

DTYPE_NAMES = {"u8": np.uint8, "u16": np.uint16}
REQUIRED_KEYS = ("width", "height", "depth", "dtype")


@dataclass
class RawVolumeMeta:
    width: int
    height: int
    depth: int
    dtype: str = "u8"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if min(self.width, self.height, self.depth) < 1:
            raise ValueError("volume extents must be positive")
        if self.dtype not in DTYPE_NAMES:
            raise ValueError(f"unknown dtype {self.dtype!r}; expected one of {sorted(DTYPE_NAMES)}")

    @property
    def numpy_dtype(self):
        return np.dtype(DTYPE_NAMES[self.dtype]).newbyteorder("<")

    @property
    def shape(self):
        """Numpy array shape, (z, y, x)."""
        return (self.depth, self.height, self.width)

    @property
    def nbytes(self):
        return self.width * self.height * self.depth * self.numpy_dtype.itemsize


def parse_info(text):
    fields = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"info line {lineno} is not key=value: {line!r}")
        k, _, v = line.partition("=")
        fields[k.strip()] = v.strip()
    missing = [k for k in REQUIRED_KEYS if k not in fields]
    if missing:
        raise ValueError(f"info file missing required keys: {', '.join(missing)}")
    extra = {k: v for k, v in fields.items() if k not in REQUIRED_KEYS}
    return RawVolumeMeta(int(fields["width"]), int(fields["height"]),
                         int(fields["depth"]), fields["dtype"], extra)


def write_info(meta):
    lines = [f"width={meta.width}", f"height={meta.height}",
             f"depth={meta.depth}", f"dtype={meta.dtype}"]
    lines += [f"{k}={v}" for k, v in meta.extra.items()]
    return "\n".join(lines) + "\n"


def read_info(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_info(fh.read())


def save_info(meta, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(write_info(meta))


def read_raw(path, meta, mmap=True):
    """The (z, y, x) array described by meta; memory-mapped by default so
    volumes larger than memory stream from disk."""
    import os

    actual = os.path.getsize(path)
    if actual != meta.nbytes:
        raise ValueError(
            f"{path}: file has {actual} bytes but metadata implies {meta.nbytes} "
            f"({meta.width}x{meta.height}x{meta.depth} {meta.dtype})"
        )
    if mmap:
        return np.memmap(path, dtype=meta.numpy_dtype, mode="r", shape=meta.shape)
    return np.fromfile(path, dtype=meta.numpy_dtype).reshape(meta.shape)


def write_raw(volume, path):
    volume = np.asarray(volume)
    if volume.dtype == np.uint8:
        out = volume
    elif volume.dtype == np.uint16:
        out = volume.astype("<u2", copy=False)
    else:
        raise ValueError(f"raw volumes must be u8 or u16, got {volume.dtype}")
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(out).tobytes())


def meta_for(volume, extra=None):
    d, h, w = volume.shape
    name = {np.dtype(np.uint8): "u8", np.dtype(np.uint16): "u16"}[np.dtype(volume.dtype)]
    return RawVolumeMeta(w, h, d, name, dict(extra or {}))


@dataclass
class GrayVolume:
    """Raw integer gray volume plus its normalized [0, 1] float view
    (value / dtype max, so 0 -> 0.0 and the dtype max -> exactly 1.0)."""

    raw: np.ndarray

    def __post_init__(self):
        if not np.issubdtype(self.raw.dtype, np.integer):
            raise ValueError("GrayVolume.raw must be an integer array")

    @property
    def max_value(self):
        return float(np.iinfo(self.raw.dtype).max)

    @property
    def shape(self):
        return self.raw.shape

    @property
    def normalized(self):
        return self.raw.astype(np.float32) / np.float32(self.max_value)

    def normalize_window(self, window):
        return np.asarray(window, dtype=np.float32) / np.float32(self.max_value)


def load_gray(path, meta, mmap=True):
    return GrayVolume(read_raw(path, meta, mmap=mmap))


def reflect_indices(start, stop, n):
    """Indices start..stop-1 folded into [0, n) by mirror reflection without
    edge repetition (…2 1 0 1 2… at the low border)."""
    idx = np.arange(start, stop)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    m = np.abs(idx) % period
    return np.where(m >= n, period - m, m)


def slices_2p5d(volume, z):
    """Five-slice window around z as a (y, x, 5) channel stack; out-of-range
    neighbors reflect at the volume borders (z=0 -> slices 2,1,0,1,2)."""
    volume = np.asarray(volume)
    if volume.size == 0:
        raise ValueError("empty volume")
    depth = volume.shape[0]
    if not 0 <= z < depth:
        raise ValueError(f"slice {z} outside [0, {depth})")
    zi = reflect_indices(z - 2, z + 3, depth)
    return np.moveaxis(volume[zi], 0, -1)


# ---------------------------------------------------------------------------
# tiled inference


def default_halo(spec):
    """Covers receptive-field growth across the U: 2^u_depth * kernel radius."""
    return (2 ** spec.u_depth) * (spec.kernel // 2)


def _tile_origins(extent, tile):
    return list(range(0, extent, tile))


def _fit_tile(extent, tile, div):
    # Shrink oversized default tiles to the volume extent rounded up to the
    # divisibility constraint.
    return min(tile, -(-extent // div) * div)


def estimate_tile_bytes(spec, padded_voxels):
    # Rough activation footprint of one tile pass (float32).
    return 4 * padded_voxels * (12 * spec.f0 + spec.in_channels)


def tiled_predict(model, gray, tile_shape=None, halo=None, memory_budget=None,
                  prob_sink=None):
    """Whole-volume label prediction from overlapping tiles.

    Each tile is extended by `halo` voxels per side (reflect-padded at the
    volume borders), predicted in INFER mode, and only the halo-stripped
    interior is written, so every output voxel is produced exactly once.
    2D and 2.5D models tile each z slice in the XY plane; 3D models tile all
    three axes.  Returns a (z, y, x) uint8 label volume.
    """
    from . import modunet as mu

    spec = model.spec
    depth, ny, nx = gray.shape
    div = 2 ** spec.u_depth
    three_d = spec.variant is mu.Variant.THREE_D

    if tile_shape is None:
        rec = spec.recommended_crop
        if three_d:
            tile_shape = tuple(_fit_tile(n, t, div) for n, t in zip((depth, ny, nx), rec))
        else:
            tile_shape = (_fit_tile(ny, rec[0], div), _fit_tile(nx, rec[1], div))
    tile_shape = tuple(int(t) for t in tile_shape)
    want_rank = 3 if three_d else 2
    if len(tile_shape) != want_rank:
        raise ValueError(
            f"{spec.variant.value} model tiles {want_rank} axes, got tile {tile_shape}"
        )
    halo = default_halo(spec) if halo is None else int(halo)
    if halo < 0:
        raise ValueError("halo must be >= 0")
    for t in tile_shape:
        if t < 1 or t % div:
            raise ValueError(f"tile extent {t} must be a positive multiple of {div}")
        if (t + 2 * halo) % div:
            raise ValueError(
                f"tile {t} plus halo {halo} per side is not a multiple of {div}; "
                "adjust --halo"
            )
    padded_voxels = int(np.prod([t + 2 * halo for t in tile_shape]))
    if not three_d:
        padded_voxels *= spec.in_channels
    if memory_budget is not None and estimate_tile_bytes(spec, padded_voxels) > memory_budget:
        raise ValueError(
            f"tile {tile_shape} with halo {halo} needs about "
            f"{estimate_tile_bytes(spec, padded_voxels)} bytes, over the budget {memory_budget}"
        )

    out = np.empty((depth, ny, nx), dtype=np.uint8)
    started = time.perf_counter()

    if three_d:
        tz, ty, tx = tile_shape
        for z0 in _tile_origins(depth, tz):
            zi = reflect_indices(z0 - halo, z0 + tz + halo, depth)
            for y0 in _tile_origins(ny, ty):
                yi = reflect_indices(y0 - halo, y0 + ty + halo, ny)
                for x0 in _tile_origins(nx, tx):
                    xi = reflect_indices(x0 - halo, x0 + tx + halo, nx)
                    window = gray.normalize_window(gray.raw[np.ix_(zi, yi, xi)])
                    probs = model.forward(window[None, ..., None], Mode.INFER)[0]
                    ez = min(tz, depth - z0)
                    ey = min(ty, ny - y0)
                    ex = min(tx, nx - x0)
                    interior = probs[halo:halo + ez, halo:halo + ey, halo:halo + ex]
                    sl = (slice(z0, z0 + ez), slice(y0, y0 + ey), slice(x0, x0 + ex))
                    out[sl] = mu.predict_labels(interior)
                    if prob_sink is not None:
                        prob_sink(sl, interior)
    else:
        ty, tx = tile_shape
        for z in range(depth):
            if spec.variant is mu.Variant.TWO_HALF_D:
                zi = reflect_indices(z - 2, z + 3, depth)
            else:
                zi = np.array([z])
            for y0 in _tile_origins(ny, ty):
                yi = reflect_indices(y0 - halo, y0 + ty + halo, ny)
                for x0 in _tile_origins(nx, tx):
                    xi = reflect_indices(x0 - halo, x0 + tx + halo, nx)
                    window = gray.normalize_window(gray.raw[np.ix_(zi, yi, xi)])
                    x_in = np.moveaxis(window, 0, -1)[None]
                    probs = model.forward(x_in, Mode.INFER)[0]
                    ey = min(ty, ny - y0)
                    ex = min(tx, nx - x0)
                    interior = probs[halo:halo + ey, halo:halo + ex]
                    sl = (z, slice(y0, y0 + ey), slice(x0, x0 + ex))
                    out[sl] = mu.predict_labels(interior)
                    if prob_sink is not None:
                        prob_sink(sl, interior)

    elapsed = time.perf_counter() - started
    voxels = depth * ny * nx
    log.info("tiled_predict: %d voxels in %.2fs (%.0f voxels/s), tile %s halo %d",
             voxels, elapsed, voxels / max(elapsed, 1e-9), tile_shape, halo)
    return out
