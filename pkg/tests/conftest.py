import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lesionforge.volume import Geometry, LabelVolume, LesionMask, ScalarVolume


@pytest.fixture
def iso_geom():
    return Geometry.isotropic((16, 16, 16))


def make_random_mask(dims, rng, density=0.15):
    return LesionMask(Geometry.isotropic(dims),
                      rng.random(dims) < density)


def make_blob_mask(dims, centers, radius, spacing=1.0):
    """Mask with a sphere of the given voxel radius around each center."""
    geom = Geometry.isotropic(dims, spacing)
    data = np.zeros(dims, dtype=bool)
    grid = np.stack(np.meshgrid(*(np.arange(d) for d in dims), indexing="ij"), -1)
    for center in centers:
        dist2 = ((grid - np.asarray(center)) ** 2).sum(axis=-1)
        data |= dist2 <= radius ** 2
    return LesionMask(geom, data)


def make_phantom_parcellation(dims=(24, 24, 24), num_classes=6, spacing=1.0,
                              lesion_class=None, lesion_centers=(), lesion_radius=2):
    """Nested-box parcellation with optional spherical lesions painted on top."""
    geom = Geometry.isotropic(dims, spacing)
    data = np.zeros(dims, dtype=np.int32)
    # concentric boxes: class increases toward the center
    for c in range(1, num_classes):
        lo = c
        hi = [d - c for d in dims]
        if any(h <= l for l, h in zip((lo,) * 3, hi)):
            break
        data[lo:hi[0], lo:hi[1], lo:hi[2]] = c
    mask = np.zeros(dims, dtype=bool)
    if lesion_centers:
        grid = np.stack(np.meshgrid(*(np.arange(d) for d in dims), indexing="ij"), -1)
        for center in lesion_centers:
            dist2 = ((grid - np.asarray(center)) ** 2).sum(axis=-1)
            mask |= dist2 <= lesion_radius ** 2
        if lesion_class is not None:
            data[mask] = lesion_class
    return LabelVolume(geom, data), LesionMask(geom, mask)


def make_ramp_volume(dims, spacing, axis=0):
    geom = Geometry.isotropic(dims, spacing)
    ramp = np.broadcast_to(
        np.arange(dims[axis], dtype=np.float64).reshape(
            [-1 if a == axis else 1 for a in range(3)]),
        dims).copy()
    return ScalarVolume(geom, ramp)
