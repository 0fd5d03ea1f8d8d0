"""Volumetric data types, preprocessing, label construction, synthesis, and file IO.

Grid convention: arrays are indexed ``values[i, j, k]`` with dims ``(nx, ny, nz)``.
Voxel (i, j, k) has its center at ``origin_mm + (i*sx, j*sy, k*sz)`` in world
millimetres. Linear voxel indices, on-disk payload order, and scan order are all
x-fastest: ``index = i + nx*(j + ny*k)``.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FileFormatError

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = (-1000.0, 400.0)

_DTYPE_TAGS = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}


def _as_triple(x, kind=float) -> tuple:
    t = tuple(kind(v) for v in x)
    if len(t) != 3:
        raise ValueError(f"expected 3 components, got {len(t)}")
    return t


@dataclass(frozen=True)
class GridTransform:
    """Affine map between voxel indices and world millimetres for one axis-aligned grid."""

    origin_mm: tuple[float, float, float]
    spacing_mm: tuple[float, float, float]

    def voxel_to_world(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.float64)
        return np.asarray(self.origin_mm) + idx * np.asarray(self.spacing_mm)

    def world_to_voxel(self, mm) -> np.ndarray:
        mm = np.asarray(mm, dtype=np.float64)
        return (mm - np.asarray(self.origin_mm)) / np.asarray(self.spacing_mm)


@dataclass(frozen=True)
class ResampleTransform:
    """Invertible record of a resampling step: the source and target grids share a world frame."""

    source: GridTransform
    target: GridTransform

    def target_voxel_to_source_voxel(self, idx) -> np.ndarray:
        return self.source.world_to_voxel(self.target.voxel_to_world(idx))

    def source_voxel_to_target_voxel(self, idx) -> np.ndarray:
        return self.target.world_to_voxel(self.source.voxel_to_world(idx))


def _freeze_array(obj, name, values, dtype):
    arr = np.array(values, dtype=dtype)
    if arr.ndim != 3:
        raise ValueError(f"{name} values must be 3-D, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"{name} dims must all be >= 1, got {arr.shape}")
    arr.flags.writeable = False
    object.__setattr__(obj, "values", arr)


def _check_grid(spacing, origin):
    spacing = _as_triple(spacing)
    origin = _as_triple(origin)
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise ValueError(f"spacing_mm must be positive and finite, got {spacing}")
    if any(not np.isfinite(o) for o in origin):
        raise ValueError(f"origin_mm must be finite, got {origin}")
    return spacing, origin


@dataclass(frozen=True)
class Volume:
    """A scalar image on a regular grid. Values are float32 and immutable after construction."""

    values: np.ndarray
    spacing_mm: tuple[float, float, float]
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        spacing, origin = _check_grid(self.spacing_mm, self.origin_mm)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", origin)
        _freeze_array(self, "Volume", self.values, np.float32)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def transform(self) -> GridTransform:
        return GridTransform(self.origin_mm, self.spacing_mm)


@dataclass(frozen=True)
class LabelMap:
    """A binary voxel mask sharing the grid conventions of Volume. Values are uint8 in {0, 1}."""

    values: np.ndarray
    spacing_mm: tuple[float, float, float]
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        spacing, origin = _check_grid(self.spacing_mm, self.origin_mm)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", origin)
        _freeze_array(self, "LabelMap", self.values, np.uint8)
        if self.values.size and self.values.max() > 1:
            raise ValueError("LabelMap values must be 0 or 1")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def transform(self) -> GridTransform:
        return GridTransform(self.origin_mm, self.spacing_mm)


def same_grid(a, b) -> bool:
    return a.dims == b.dims and a.spacing_mm == b.spacing_mm and a.origin_mm == b.origin_mm


def require_same_grid(a, b, what="inputs"):
    if not same_grid(a, b):
        raise ValueError(
            f"{what} must share one grid: {a.dims}/{a.spacing_mm}/{a.origin_mm} "
            f"vs {b.dims}/{b.spacing_mm}/{b.origin_mm}"
        )


@dataclass(frozen=True)
class Annotation:
    """One annotated finding: a world-space center/radius plus optional per-rater voxel masks.

    rater_masks holds linear voxel indices (x-fastest) on the annotation's native grid.
    agreement_count is the number of raters who marked the finding.
    """

    id: str
    center_mm: tuple[float, float, float]
    radius_mm: float
    agreement_count: int = 1
    rater_masks: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "center_mm", _as_triple(self.center_mm))
        object.__setattr__(self, "radius_mm", float(self.radius_mm))
        if not np.isfinite(self.radius_mm) or self.radius_mm <= 0:
            raise ValueError(f"radius_mm must be positive, got {self.radius_mm}")
        if int(self.agreement_count) < 1:
            raise ValueError("agreement_count must be >= 1")
        object.__setattr__(self, "agreement_count", int(self.agreement_count))
        masks = tuple(np.asarray(m, dtype=np.int64) for m in self.rater_masks)
        object.__setattr__(self, "rater_masks", masks)


@dataclass(frozen=True)
class AnnotationSet:
    """All annotated findings for one scan."""

    nodules: tuple[Annotation, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "nodules", tuple(self.nodules))

    def __iter__(self):
        return iter(self.nodules)

    def __len__(self):
        return len(self.nodules)


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic case: textured background plus planted bright spheres.

    nodule_count is an inclusive (lo, hi) range; radii are drawn uniformly from
    radius_range_mm. texture_scale_mm is the Gaussian smoothing scale of the
    background noise, intensity_range its post-normalization value range, and
    fine_noise_sd an optional voxel-level noise floor. contrast is the peak
    intensity elevation at a sphere's center (tapering to contrast/2 at its rim).
    max_positive_fraction is the labeled-voxel budget the planted spheres must fit.

    Distractors are extra spheres carved with the same contrast profile but kept
    out of the labels and annotations; their smaller radii are the only cue that
    separates them from real findings.
    """

    dims: tuple[int, int, int] = (64, 64, 64)
    spacing_mm: tuple[float, float, float] = (1.25, 1.25, 1.25)
    nodule_count: tuple[int, int] = (2, 4)
    radius_range_mm: tuple[float, float] = (2.0, 4.0)
    texture_scale_mm: float = 4.0
    intensity_range: tuple[float, float] = (0.05, 0.55)
    fine_noise_sd: float = 0.02
    contrast: float = 0.35
    max_positive_fraction: float = 0.01
    min_separation_mm: float = 2.0
    distractor_count: tuple[int, int] = (0, 0)
    distractor_radius_mm: tuple[float, float] = (1.25, 1.75)

    def __post_init__(self):
        object.__setattr__(self, "dims", _as_triple(self.dims, int))
        object.__setattr__(self, "spacing_mm", _as_triple(self.spacing_mm))
        object.__setattr__(self, "nodule_count", tuple(int(c) for c in self.nodule_count))
        object.__setattr__(self, "radius_range_mm", tuple(float(r) for r in self.radius_range_mm))
        object.__setattr__(self, "intensity_range", tuple(float(v) for v in self.intensity_range))
        object.__setattr__(self, "distractor_count", tuple(int(c) for c in self.distractor_count))
        object.__setattr__(
            self, "distractor_radius_mm", tuple(float(r) for r in self.distractor_radius_mm)
        )
        lo, hi = self.nodule_count
        if lo < 0 or hi < lo:
            raise ValueError(f"nodule_count range invalid: {self.nodule_count}")
        dlo, dhi = self.distractor_count
        if dlo < 0 or dhi < dlo:
            raise ValueError(f"distractor_count range invalid: {self.distractor_count}")
        for name, (rlo, rhi) in (("radius_range_mm", self.radius_range_mm),
                                 ("distractor_radius_mm", self.distractor_radius_mm)):
            if rlo <= 0 or rhi < rlo:
                raise ValueError(f"{name} must be positive and ordered: got ({rlo}, {rhi})")
        if not 0 < self.max_positive_fraction <= 0.05:
            raise ValueError("max_positive_fraction must lie in (0, 0.05]")
        ilo, ihi = self.intensity_range
        if not 0 <= ilo < ihi <= 1:
            raise ValueError(f"intensity_range must be ordered within [0, 1]: {self.intensity_range}")


def rescale_intensity(v: Volume, window: tuple[float, float] = DEFAULT_WINDOW) -> Volume:
    """Clamp-rescale raw intensities to [0, 1] over the given window.

    Output value is clamp((x - lo) / (hi - lo), 0, 1).
    """
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ValueError(f"window must satisfy lo < hi, got ({lo}, {hi})")
    scaled = np.clip((v.values.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return Volume(scaled.astype(np.float32), v.spacing_mm, v.origin_mm)


def _output_dims(dims, spacing, target):
    out = []
    for n, s, t in zip(dims, spacing, target):
        # round-to-nearest with half away from zero, per axis
        m = int(np.floor(n * s / t + 0.5))
        out.append(m)
    if min(out) < 1:
        raise ValueError(f"resampling {dims} at {spacing} to {target} yields empty grid {tuple(out)}")
    return tuple(out)


def _axis_coords(n_out, t, s, n_in):
    c = np.arange(n_out, dtype=np.float64) * (t / s)
    return np.clip(c, 0.0, n_in - 1)


def _trilinear_sample(values, coords):
    x, y, z = coords
    nx, ny, nz = values.shape
    x0 = np.minimum(np.floor(x).astype(np.intp), max(nx - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(ny - 2, 0))
    z0 = np.minimum(np.floor(z).astype(np.intp), max(nz - 2, 0))
    fx, fy, fz = x - x0, y - y0, z - z0
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)
    v = values.astype(np.float64)
    wx0 = (1.0 - fx)[:, None, None]
    wx1 = fx[:, None, None]
    wy0 = (1.0 - fy)[None, :, None]
    wy1 = fy[None, :, None]
    wz0 = (1.0 - fz)[None, None, :]
    wz1 = fz[None, None, :]
    out = (
        v[np.ix_(x0, y0, z0)] * wx0 * wy0 * wz0
        + v[np.ix_(x1, y0, z0)] * wx1 * wy0 * wz0
        + v[np.ix_(x0, y1, z0)] * wx0 * wy1 * wz0
        + v[np.ix_(x0, y0, z1)] * wx0 * wy0 * wz1
        + v[np.ix_(x1, y1, z0)] * wx1 * wy1 * wz0
        + v[np.ix_(x1, y0, z1)] * wx1 * wy0 * wz1
        + v[np.ix_(x0, y1, z1)] * wx0 * wy1 * wz1
        + v[np.ix_(x1, y1, z1)] * wx1 * wy1 * wz1
    )
    return out


def resample_isotropic(v, target_spacing_mm: float, mode: str | None = None):
    """Resample a Volume or LabelMap to an isotropic grid.

    Output dims are round(dims * spacing / target) per axis; the world origin is
    preserved, so world coordinates are unchanged by resampling. Images use
    trilinear interpolation, label maps nearest-neighbor (coordinate ties round
    to even). Sample coordinates beyond the source grid clamp to the edge.

    Returns:
        (resampled, ResampleTransform) where the transform records both grids.
    """
    t = float(target_spacing_mm)
    if not np.isfinite(t) or t <= 0:
        raise ValueError(f"target spacing must be positive, got {target_spacing_mm}")
    is_labels = isinstance(v, LabelMap)
    if mode is None:
        mode = "nearest" if is_labels else "trilinear"
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if is_labels and mode == "trilinear":
        raise ValueError("label maps must be resampled with nearest-neighbor interpolation")

    out_dims = _output_dims(v.dims, v.spacing_mm, (t, t, t))
    coords = [
        _axis_coords(m, t, s, n) for m, s, n in zip(out_dims, v.spacing_mm, v.dims)
    ]
    if mode == "trilinear":
        out = _trilinear_sample(v.values, coords).astype(np.float32)
        result = Volume(out, (t, t, t), v.origin_mm)
    else:
        idx = [np.clip(np.rint(c), 0, n - 1).astype(np.intp) for c, n in zip(coords, v.dims)]
        out = v.values[np.ix_(*idx)]
        result = LabelMap(out, (t, t, t), v.origin_mm) if is_labels else Volume(out, (t, t, t), v.origin_mm)
    record = ResampleTransform(source=v.transform, target=result.transform)
    return result, record


def build_reference_labels(grid: Volume, annotations: AnnotationSet) -> LabelMap:
    """Build the reference mask: per nodule, intersect its rater masks; union across nodules.

    A single-rater mask is used unchanged. Nodules without any rater mask are a
    caller error here (rasterize_sphere is the weak-label path for those).
    """
    n_vox = int(np.prod(grid.dims))
    flat = np.zeros(n_vox, dtype=np.uint8)
    for ann in annotations:
        if not ann.rater_masks:
            raise ValueError(
                f"annotation {ann.id!r} has no rater masks; rasterize_sphere is the path for point labels"
            )
        common = None
        for mask in ann.rater_masks:
            if mask.size and (mask.min() < 0 or mask.max() >= n_vox):
                raise ValueError(f"annotation {ann.id!r} rater mask index out of range for grid {grid.dims}")
            uniq = np.unique(mask)
            common = uniq if common is None else np.intersect1d(common, uniq, assume_unique=True)
        flat[common] = 1
    values = flat.reshape(grid.dims, order="F")
    return LabelMap(values, grid.spacing_mm, grid.origin_mm)


def rasterize_sphere(grid, center_mm, radius_mm: float) -> LabelMap:
    """Label every voxel whose center lies within radius_mm of center_mm (<=, world distance)."""
    center = np.asarray(_as_triple(center_mm))
    r = float(radius_mm)
    if not np.isfinite(r) or r <= 0:
        raise ValueError(f"radius_mm must be positive, got {radius_mm}")
    values = np.zeros(grid.dims, dtype=np.uint8)
    origin = np.asarray(grid.origin_mm)
    spacing = np.asarray(grid.spacing_mm)
    extent_lo = origin
    extent_hi = origin + (np.asarray(grid.dims) - 1) * spacing
    if np.any(center + r < extent_lo) or np.any(center - r > extent_hi):
        warnings.warn(f"sphere at {tuple(center)} r={r} lies outside the grid", stacklevel=2)
        return LabelMap(values, grid.spacing_mm, grid.origin_mm)
    lo = np.maximum(np.ceil((center - r - origin) / spacing).astype(int), 0)
    hi = np.minimum(np.floor((center + r - origin) / spacing).astype(int), np.asarray(grid.dims) - 1)
    if np.any(hi < lo):
        return LabelMap(values, grid.spacing_mm, grid.origin_mm)
    ax = [origin[d] + spacing[d] * np.arange(lo[d], hi[d] + 1) for d in range(3)]
    d2 = (
        ((ax[0] - center[0]) ** 2)[:, None, None]
        + ((ax[1] - center[1]) ** 2)[None, :, None]
        + ((ax[2] - center[2]) ** 2)[None, None, :]
    )
    values[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1] = (d2 <= r * r).astype(np.uint8)
    return LabelMap(values, grid.spacing_mm, grid.origin_mm)


def synthesize_case(spec: SyntheticSpec, seed: int):
    """Generate one synthetic case: (Volume, LabelMap, AnnotationSet).

    Background is Gaussian-smoothed noise normalized to spec.intensity_range plus
    an optional fine-noise floor. Spheres are planted fully inside the grid,
    pairwise separated by min_separation_mm, with intensity elevation
    contrast * (1 - 0.5*(d/r)^2) inside each sphere. Distractor spheres get the
    same treatment but appear in neither the labels nor the annotations. Same
    seed, same spec: bit-identical outputs. Raises if placement fails or the
    labeled-voxel fraction exceeds max_positive_fraction.
    """
    rng = np.random.default_rng(seed)
    dims = spec.dims
    spacing = np.asarray(spec.spacing_mm)
    origin = np.zeros(3)

    base = rng.standard_normal(dims)
    sigma = [spec.texture_scale_mm / s for s in spec.spacing_mm]
    tex = ndimage.gaussian_filter(base, sigma=sigma, mode="reflect")
    tex -= tex.min()
    peak = tex.max()
    if peak > 0:
        tex /= peak
    ilo, ihi = spec.intensity_range
    values = ilo + tex * (ihi - ilo)
    if spec.fine_noise_sd > 0:
        values = values + rng.normal(0.0, spec.fine_noise_sd, dims)

    extent_hi = origin + (np.asarray(dims) - 1) * spacing
    placed: list[tuple[np.ndarray, float]] = []

    def place(n: int, radius_range: tuple[float, float], what: str) -> list[tuple[np.ndarray, float]]:
        out = []
        for _ in range(n):
            for attempt in range(200):
                r = float(rng.uniform(*radius_range))
                lo_c = origin + r
                hi_c = extent_hi - r
                if np.any(hi_c < lo_c):
                    raise ValueError(
                        f"grid {dims} at {spec.spacing_mm} cannot contain a sphere of radius {r}"
                    )
                c = rng.uniform(lo_c, hi_c)
                if all(np.linalg.norm(c - pc) > r + pr + spec.min_separation_mm for pc, pr in placed):
                    placed.append((c, r))
                    out.append((c, r))
                    break
            else:
                raise RuntimeError(f"failed to place {what} {len(out)} after 200 attempts")
        return out

    count = int(rng.integers(spec.nodule_count[0], spec.nodule_count[1] + 1))
    nodule_spheres = place(count, spec.radius_range_mm, "nodule")
    distractor_spheres = []
    if spec.distractor_count[1] > 0:
        d_count = int(rng.integers(spec.distractor_count[0], spec.distractor_count[1] + 1))
        distractor_spheres = place(d_count, spec.distractor_radius_mm, "distractor")

    grid_probe = Volume(np.zeros(dims, dtype=np.float32), spec.spacing_mm, tuple(origin))

    def carve(c: np.ndarray, r: float) -> np.ndarray:
        sphere = rasterize_sphere(grid_probe, c, r)
        ii, jj, kk = np.nonzero(sphere.values)
        centers = origin + np.stack([ii, jj, kk], axis=1) * spacing
        d = np.linalg.norm(centers - c, axis=1)
        values[ii, jj, kk] += spec.contrast * (1.0 - 0.5 * (d / r) ** 2)
        return sphere.values

    label_values = np.zeros(dims, dtype=np.uint8)
    nodules = []
    for i, (c, r) in enumerate(nodule_spheres):
        label_values |= carve(c, r)
        nodules.append(
            Annotation(id=f"n{i:03d}", center_mm=tuple(c), radius_mm=r, agreement_count=4)
        )
    for c, r in distractor_spheres:
        carve(c, r)

    positive_fraction = float(label_values.sum()) / label_values.size
    if positive_fraction > spec.max_positive_fraction:
        raise ValueError(
            f"planted spheres label {positive_fraction:.4%} of voxels, over the "
            f"{spec.max_positive_fraction:.4%} budget"
        )
    volume = Volume(np.clip(values, 0.0, 1.0).astype(np.float32), spec.spacing_mm, tuple(origin))
    labels = LabelMap(label_values, spec.spacing_mm, tuple(origin))
    return volume, labels, AnnotationSet(tuple(nodules))


# ---------------------------------------------------------------------------
# File IO. A volume on disk is <stem>.json (header) + <stem>.raw (payload,
# C-order with x fastest, little-endian). Annotations are a JSON array.


def _stem(path) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p


def _write_grid(stem: Path, values: np.ndarray, spacing, origin, tag: str):
    header = {
        "dims": list(values.shape),
        "spacing_mm": list(spacing),
        "origin_mm": list(origin),
        "dtype": tag,
    }
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".json").write_text(json.dumps(header, sort_keys=True) + "\n")
    payload = np.ascontiguousarray(values.ravel(order="F")).astype(_DTYPE_TAGS[tag]).tobytes()
    stem.with_suffix(".raw").write_bytes(payload)


def _read_grid(path):
    stem = _stem(path)
    header_path = stem.with_suffix(".json")
    raw_path = stem.with_suffix(".raw")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as e:
        raise FileFormatError(f"malformed volume header {header_path}: {e}") from e
    for key in ("dims", "spacing_mm", "origin_mm", "dtype"):
        if key not in header:
            raise FileFormatError(f"volume header {header_path} missing key {key!r}")
    tag = header["dtype"]
    if tag not in _DTYPE_TAGS:
        raise FileFormatError(f"unsupported dtype {tag!r} in {header_path}")
    dims = tuple(int(d) for d in header["dims"])
    if len(dims) != 3 or min(dims) < 1:
        raise FileFormatError(f"bad dims {header['dims']} in {header_path}")
    raw = raw_path.read_bytes()
    dtype = _DTYPE_TAGS[tag]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise FileFormatError(
            f"payload size mismatch for {raw_path}: got {len(raw)} bytes, header implies {expected}"
        )
    values = np.frombuffer(raw, dtype=dtype).reshape(dims, order="F")
    return header, tag, values


def save_volume(v: Volume, path) -> Path:
    stem = _stem(path)
    _write_grid(stem, v.values, v.spacing_mm, v.origin_mm, "f32le")
    return stem


def load_volume(path) -> Volume:
    header, tag, values = _read_grid(path)
    if tag != "f32le":
        raise FileFormatError(f"expected an f32le image volume, got dtype {tag!r}")
    return Volume(values, tuple(header["spacing_mm"]), tuple(header["origin_mm"]))


def save_labelmap(m: LabelMap, path) -> Path:
    stem = _stem(path)
    _write_grid(stem, m.values, m.spacing_mm, m.origin_mm, "u8")
    return stem


def load_labelmap(path) -> LabelMap:
    header, tag, values = _read_grid(path)
    if tag != "u8":
        raise FileFormatError(f"expected a u8 label map, got dtype {tag!r}")
    return LabelMap(values, tuple(header["spacing_mm"]), tuple(header["origin_mm"]))


def save_annotations(annotations: AnnotationSet, path) -> Path:
    rows = []
    for ann in annotations:
        rows.append(
            {
                "id": ann.id,
                "center_mm": [float(c) for c in ann.center_mm],
                "radius_mm": float(ann.radius_mm),
                "agreement_count": ann.agreement_count,
                "rater_masks": [[int(i) for i in mask] for mask in ann.rater_masks],
            }
        )
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(rows, sort_keys=True) + "\n")
    return p


def load_annotations(path) -> AnnotationSet:
    p = Path(path)
    try:
        rows = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise FileFormatError(f"malformed annotation file {p}: {e}") from e
    if not isinstance(rows, list):
        raise FileFormatError(f"annotation file {p} must hold a JSON array")
    nodules = []
    for row in rows:
        try:
            nodules.append(
                Annotation(
                    id=str(row["id"]),
                    center_mm=tuple(row["center_mm"]),
                    radius_mm=row["radius_mm"],
                    agreement_count=row.get("agreement_count", 1),
                    rater_masks=tuple(np.asarray(m, dtype=np.int64) for m in row.get("rater_masks", [])),
                )
            )
        except (KeyError, TypeError) as e:
            raise FileFormatError(f"annotation file {p} has a malformed entry: {e}") from e
    return AnnotationSet(tuple(nodules))
