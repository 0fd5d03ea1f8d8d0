"""Probability map to detection candidates: threshold, label components, localize.

Candidate positions are probability-weighted centers of mass of each component's
voxel centers, expressed in world millimetres (resampling preserves the world
frame, so these are native-space coordinates). Confidence is the component's
mean probability.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FileFormatError
from .volume import LabelMap, Volume, require_same_grid


@dataclass(frozen=True)
class Candidate:
    position_mm: tuple[float, float, float]
    confidence: float
    component_size: int


def threshold_map(prob: Volume, threshold: float = 0.5) -> LabelMap:
    """Binary map of voxels with probability strictly greater than threshold."""
    t = float(threshold)
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return LabelMap((prob.values > t).astype(np.uint8), prob.spacing_mm, prob.origin_mm)


def connected_components(binary: LabelMap, connectivity: int = 26) -> np.ndarray:
    """Label connected foreground components, 6- or 26-connected.

    Returns an int32 array, 0 for background, components numbered 1..K by the
    x-fastest scan position of each component's first voxel.
    """
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    structure = ndimage.generate_binary_structure(3, 1 if connectivity == 6 else 3)
    raw, count = ndimage.label(binary.values, structure=structure)
    if count == 0:
        return raw.astype(np.int32)
    flat = raw.ravel(order="F")
    labels, first = np.unique(flat, return_index=True)
    order = [(f, l) for l, f in zip(labels, first) if l != 0]
    order.sort()
    remap = np.zeros(count + 1, dtype=np.int32)
    for new, (_, old) in enumerate(order, start=1):
        remap[old] = new
    return remap[raw]


def components_to_candidates(prob: Volume, labeling: np.ndarray, weighted: bool = True) -> list[Candidate]:
    """Reduce labeled components to candidates, sorted by confidence descending.

    weighted=False switches the localizer to the unweighted voxel centroid.
    """
    if labeling.shape != prob.dims:
        raise ValueError(f"labeling shape {labeling.shape} != probability grid {prob.dims}")
    nx = prob.dims[0]
    nxy = nx * prob.dims[1]
    flat_labels = labeling.ravel(order="F")
    flat_prob = prob.values.ravel(order="F").astype(np.float64)
    fg = np.flatnonzero(flat_labels)
    if fg.size == 0:
        return []
    spacing = np.asarray(prob.spacing_mm)
    origin = np.asarray(prob.origin_mm)
    order = fg[np.argsort(flat_labels[fg], kind="stable")]
    _, starts = np.unique(flat_labels[order], return_index=True)
    stops = np.append(starts[1:], order.size)
    out = []
    for start, stop in zip(starts, stops):
        lin = order[start:stop]
        i = lin % nx
        j = (lin // nx) % prob.dims[1]
        k = lin // nxy
        coords = np.stack([i, j, k], axis=1).astype(np.float64)
        p = flat_prob[lin]
        if weighted and p.sum() > 0:
            com = (coords * p[:, None]).sum(axis=0) / p.sum()
        else:
            com = coords.mean(axis=0)
        pos = origin + com * spacing
        out.append(
            Candidate(
                position_mm=tuple(float(v) for v in pos),
                confidence=float(p.mean()),
                component_size=int(lin.size),
            )
        )
    out.sort(key=lambda c: (-c.confidence, c.position_mm))
    return out


def detect(prob: Volume, threshold: float = 0.5, connectivity: int = 26, weighted: bool = True):
    """threshold -> connected components -> candidates, in one call."""
    binary = threshold_map(prob, threshold)
    require_same_grid(prob, binary)
    labeling = connected_components(binary, connectivity)
    return components_to_candidates(prob, labeling, weighted)


CANDIDATE_HEADER = ["scan_id", "x_mm", "y_mm", "z_mm", "probability"]


def write_candidates_csv(path, rows) -> Path:
    """rows: iterable of (scan_id, Candidate). Probabilities print with 6 decimals."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CANDIDATE_HEADER)
        for scan_id, cand in rows:
            x, y, z = cand.position_mm
            writer.writerow([scan_id, repr(float(x)), repr(float(y)), repr(float(z)),
                             f"{cand.confidence:.6f}"])
    return p


def read_candidates_csv(path) -> list[tuple[str, tuple[float, float, float], float]]:
    p = Path(path)
    out = []
    with open(p, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CANDIDATE_HEADER:
            raise FileFormatError(f"candidate file {p} has header {header}, expected {CANDIDATE_HEADER}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise FileFormatError(f"candidate file {p} line {lineno}: expected 5 fields")
            try:
                out.append((row[0], (float(row[1]), float(row[2]), float(row[3])), float(row[4])))
            except ValueError as e:
                raise FileFormatError(f"candidate file {p} line {lineno}: {e}") from e
    return out
