"""Patch geometry, enumeration, classification, and context extraction.

A patch is addressed by the corner of its output region on the volume grid.
The network input around it extends context_margin/2 voxels per side, filled by
mirror reflection where it leaves the volume. Targets are never padded.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .volume import LabelMap, Volume, require_same_grid

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PatchGeometry:
    """Cubic patch sizes: the supervised output region and the context the model consumes."""

    output_stride: int = 8
    context_margin: int = 8

    def __post_init__(self):
        if int(self.output_stride) < 1:
            raise ValueError(f"output_stride must be >= 1, got {self.output_stride}")
        if int(self.context_margin) < 0 or int(self.context_margin) % 2 != 0:
            raise ValueError(f"context_margin must be even and >= 0, got {self.context_margin}")
        object.__setattr__(self, "output_stride", int(self.output_stride))
        object.__setattr__(self, "context_margin", int(self.context_margin))

    @property
    def input_size(self) -> int:
        return self.output_stride + self.context_margin


@dataclass(frozen=True)
class PatchIndex:
    """Identity of one patch: owning volume and the corner voxel of its output region."""

    volume_id: str
    corner: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "corner", tuple(int(c) for c in self.corner))
        if len(self.corner) != 3:
            raise ValueError(f"corner must have 3 components, got {self.corner}")


def enumerate_patches(dims, geom: PatchGeometry, volume_id: str = "") -> list[PatchIndex]:
    """Non-overlapping tiling of the output grid: floor(dim/stride) tiles per axis.

    A trailing slab narrower than the stride is left uncovered (and logged);
    prediction-time tiling covers it with shifted boundary tiles instead.
    """
    s = geom.output_stride
    counts = [d // s for d in dims]
    if min(counts) < 1:
        raise ValueError(f"dims {tuple(dims)} too small for output_stride {s}")
    leftovers = tuple(d - c * s for d, c in zip(dims, counts))
    if any(leftovers):
        logger.info(
            "enumerate_patches: dims %s leave uncovered slabs %s at stride %d",
            tuple(dims), leftovers, s,
        )
    out = []
    for k in range(counts[2]):
        for j in range(counts[1]):
            for i in range(counts[0]):
                out.append(PatchIndex(volume_id, (i * s, j * s, k * s)))
    # x-fastest ordering to match the grid's linear index convention
    return out


def _region(p: PatchIndex, s: int):
    i, j, k = p.corner
    return (slice(i, i + s), slice(j, j + s), slice(k, k + s))


def _check_corner(p: PatchIndex, dims, s: int):
    for c, d in zip(p.corner, dims):
        if c < 0 or c + s > d:
            raise ValueError(f"patch output region {p.corner}+{s} exceeds volume dims {tuple(dims)}")


def classify_patch(p: PatchIndex, labels: LabelMap, geom: PatchGeometry) -> bool:
    """True when any voxel of the patch's output region is labeled. Context is ignored."""
    _check_corner(p, labels.dims, geom.output_stride)
    return bool(labels.values[_region(p, geom.output_stride)].any())


def reflect_indices(start: int, stop: int, n: int) -> np.ndarray:
    """Indices start..stop-1 folded into [0, n) by mirror reflection without edge repeat."""
    idx = np.arange(start, stop, dtype=np.int64)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    m = np.mod(idx, period)
    return np.where(m < n, m, period - m)


def extract_input(image: Volume, p: PatchIndex, geom: PatchGeometry) -> np.ndarray:
    """The image context block for a patch: input_size^3, mirror-padded at volume borders."""
    _check_corner(p, image.dims, geom.output_stride)
    half = geom.context_margin // 2
    axes = [
        reflect_indices(c - half, c + geom.output_stride + half, d)
        for c, d in zip(p.corner, image.dims)
    ]
    return image.values[np.ix_(*axes)].astype(np.float32)


def extract_target(labels: LabelMap, p: PatchIndex, geom: PatchGeometry) -> np.ndarray:
    """The label block over the patch's output region, exactly, never padded."""
    _check_corner(p, labels.dims, geom.output_stride)
    return labels.values[_region(p, geom.output_stride)].copy()


def extract_patch(image: Volume, labels: LabelMap, p: PatchIndex, geom: PatchGeometry):
    """Extract (input, target) for one patch. Image and labels must share a grid."""
    require_same_grid(image, labels, "image and labels")
    return extract_input(image, p, geom), extract_target(labels, p, geom)
