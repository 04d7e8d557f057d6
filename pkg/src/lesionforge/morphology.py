"""Binary 3D morphology: connected components, erosion, dilation, volumes.

Erosion and dilation use the 6-connected cross (one face-neighbor shell per
iteration) and operate in voxel space; the volume boundary counts as
background for erosion and clips dilation. Component extraction supports 6,
18 and 26 connectivity with ids assigned in ascending order of each
component's first x-fastest linear voxel index.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import Geometry, LesionMask

_STRUCTS = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: ndimage.generate_binary_structure(3, 3),
}
_CROSS = _STRUCTS[6]


@dataclass
class ComponentMap:
    """Labeled connected components: 0 = background, ids 1..count."""

    geom: Geometry
    labels: np.ndarray
    volumes_mm3: np.ndarray  # indexed by id-1
    first_voxel_indices: np.ndarray  # x-fastest linear index, indexed by id-1

    @property
    def count(self) -> int:
        return len(self.volumes_mm3)

    def component(self, component_id: int) -> np.ndarray:
        """Boolean voxel set of one component."""
        return self.labels == component_id


def _linear_index_x_fastest(dims) -> np.ndarray:
    nx, ny, nz = dims
    return np.arange(nx * ny * nz, dtype=np.int64).reshape(dims, order="F")


def connected_components(mask: LesionMask, connectivity: int = 26) -> ComponentMap:
    """Group foreground voxels into components under the given connectivity."""
    if connectivity not in _STRUCTS:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    fg = mask.foreground
    raw, n = ndimage.label(fg, structure=_STRUCTS[connectivity])
    if n == 0:
        return ComponentMap(mask.geom, np.zeros(mask.dims, dtype=np.int32),
                            np.zeros(0, dtype=np.float64), np.zeros(0, dtype=np.int64))
    lin = _linear_index_x_fastest(mask.dims)
    firsts = np.asarray(
        ndimage.minimum(lin, labels=raw, index=np.arange(1, n + 1)), dtype=np.int64
    )
    order = np.argsort(firsts, kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[1:][order] = np.arange(1, n + 1, dtype=np.int32)
    labels = remap[raw]
    counts = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    volumes = counts.astype(np.float64) * mask.geom.voxel_volume_mm3
    return ComponentMap(mask.geom, labels, volumes, firsts[order])


def erode(voxels: np.ndarray, iterations: int = 1) -> np.ndarray:
    """Strip the exposed face-neighbor shell ``iterations`` times.

    A voxel survives one pass only if all six face neighbors are inside the
    set; neighbors beyond the volume boundary count as outside.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    out = ndimage.binary_erosion(
        np.asarray(voxels, dtype=bool), structure=_CROSS,
        iterations=iterations, border_value=0,
    )
    return out


def dilate(voxels: np.ndarray, iterations: int = 1) -> np.ndarray:
    """Add every background face neighbor ``iterations`` times, clipped to bounds."""
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    return ndimage.binary_dilation(
        np.asarray(voxels, dtype=bool), structure=_CROSS,
        iterations=iterations, border_value=0,
    )


def component_volume_mm3(component: np.ndarray, geom: Geometry) -> float:
    """Physical volume of a boolean voxel set on the given grid."""
    return float(np.count_nonzero(component)) * geom.voxel_volume_mm3
