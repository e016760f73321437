"""Train/validation/test layer splitting, random crop sampling, and
geometric augmentation.

Volumes are (z, y, x) arrays; 2D crops are (y, x) single-slice cuts, 3D
crops are (z, y, x) blocks.  The split is contiguous and order-preserving
with a safety margin of unused layers between the sets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SplitSpec:
    train_layers: int
    val_layers: int
    test_layers: int
    margin: int = 0

    def __post_init__(self):
        if min(self.train_layers, self.val_layers, self.test_layers) < 0 or self.margin < 0:
            raise ValueError("split counts must be non-negative")


def split_layers(total, spec):
    """Three contiguous z ranges (train, val, test) separated by margins."""
    need = spec.train_layers + spec.margin + spec.val_layers + spec.margin + spec.test_layers
    if need > total:
        raise ValueError(f"split needs {need} layers but the volume has {total}")
    t0 = 0
    v0 = spec.train_layers + spec.margin
    s0 = v0 + spec.val_layers + spec.margin
    return (range(t0, spec.train_layers),
            range(v0, v0 + spec.val_layers),
            range(s0, s0 + spec.test_layers))


def sample_crop(volume, labels, crop_shape, z_range, rng):
    """Uniformly random axis-aligned crop, cut identically from volume and
    labels.

    A 2-entry crop_shape (cy, cx) samples one z slice from z_range and
    returns (cy, cx) arrays.  A 3-entry crop_shape (cz, cy, cx) returns a
    block whose z extent lies entirely inside z_range.
    """
    volume = np.asarray(volume)
    if volume.shape != np.asarray(labels).shape:
        raise ValueError("volume and labels must have identical shapes")
    _, ny, nx = volume.shape
    if len(crop_shape) == 2:
        cy, cx = crop_shape
        if cy > ny or cx > nx:
            raise ValueError(f"crop {crop_shape} larger than slice ({ny}, {nx})")
        z = int(rng.integers(z_range.start, z_range.stop))
        y0 = int(rng.integers(0, ny - cy + 1))
        x0 = int(rng.integers(0, nx - cx + 1))
        sl = (z, slice(y0, y0 + cy), slice(x0, x0 + cx))
        return volume[sl], labels[sl]
    if len(crop_shape) == 3:
        cz, cy, cx = crop_shape
        if cz > len(z_range) or cy > ny or cx > nx:
            raise ValueError(f"crop {crop_shape} does not fit in range/volume")
        z0 = int(rng.integers(z_range.start, z_range.stop - cz + 1))
        y0 = int(rng.integers(0, ny - cy + 1))
        x0 = int(rng.integers(0, nx - cx + 1))
        sl = (slice(z0, z0 + cz), slice(y0, y0 + cy), slice(x0, x0 + cx))
        return volume[sl], labels[sl]
    raise ValueError("crop_shape must have 2 or 3 entries")


# The dihedral group of the image plane: rotations by 0/90/180/270 degrees,
# optionally composed with a transposition.  8 elements, identity included.
PLANAR_TRANSFORMS = tuple((k, t) for t in (False, True) for k in range(4))


def apply_planar(arr, k, transpose, axes):
    if transpose:
        arr = np.swapaxes(arr, *axes)
    return np.rot90(arr, k, axes=axes)


def augment(data, labels, rng):
    """One random element of the planar dihedral group, applied identically
    to data and labels; 3D crops additionally get an optional z flip.

    Shapes accepted: 2D pair (y,x)/(y,x); 2.5D pair (y,x,c)/(y,x); 3D pair
    (z,y,x)/(z,y,x).  Non-square in-plane crops restrict the draw to the
    shape-preserving transforms (identity, 180-degree rotation, two flips).
    """
    data, labels = np.asarray(data), np.asarray(labels)
    if data.ndim == 2 and labels.ndim == 2:
        d_axes = l_axes = (0, 1)
        zflip = False
    elif data.ndim == 3 and labels.ndim == 2:   # 2.5D: slice window as channels
        d_axes, l_axes = (0, 1), (0, 1)
        zflip = False
    elif data.ndim == 3 and labels.ndim == 3:
        d_axes = l_axes = (1, 2)
        zflip = True
    else:
        raise ValueError(f"unsupported crop ranks: data {data.ndim}, labels {labels.ndim}")

    square = data.shape[d_axes[0]] == data.shape[d_axes[1]]
    if square:
        k, t = PLANAR_TRANSFORMS[int(rng.integers(len(PLANAR_TRANSFORMS)))]
        data = apply_planar(data, k, t, d_axes)
        labels = apply_planar(labels, k, t, l_axes)
    else:
        # shape-preserving subgroup only: identity, rot180, and the two flips
        choice = int(rng.integers(4))
        if choice == 1:
            data, labels = np.rot90(data, 2, d_axes), np.rot90(labels, 2, l_axes)
        elif choice >= 2:
            axis = d_axes[choice - 2]
            data, labels = np.flip(data, axis=axis), np.flip(labels, axis=axis)
    if zflip and rng.integers(2):
        data = np.flip(data, axis=0)
        labels = np.flip(labels, axis=0)
    return np.ascontiguousarray(data), np.ascontiguousarray(labels)
