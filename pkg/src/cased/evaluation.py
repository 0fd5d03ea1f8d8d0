"""Detection scoring: candidate-to-reference matching, FROC, CPM, and bootstrap bands.

A candidate hits a reference finding when their distance is at most the
finding's radius (or a fixed slop, by configuration). Each finding is credited
by its highest-confidence hitting candidate; further hits are ignored, as are
candidates whose only hits are findings excluded from the reference standard.
Candidates hitting nothing are false positives. Sensitivities are read off the
step curve at fixed false-positive-per-scan rates, and their mean is the single
summary score.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume import AnnotationSet

TARGET_FP_RATES = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
REFERENCE_MIN_AGREEMENT = 3


@dataclass(frozen=True)
class ReferenceNodule:
    center_mm: tuple[float, float, float]
    radius_mm: float
    included: bool = True
    id: str = ""


@dataclass(frozen=True)
class HitCriterion:
    """mode 'radius': hit iff distance <= radius + slop_mm (slop defaults to 0).
    mode 'fixed': hit iff distance <= slop_mm, ignoring the finding's radius."""

    mode: str = "radius"
    slop_mm: float = 0.0

    def __post_init__(self):
        if self.mode not in ("radius", "fixed"):
            raise ValueError(f"unknown hit criterion mode {self.mode!r}")
        if self.mode == "fixed" and self.slop_mm <= 0:
            raise ValueError("fixed-mode hit criterion needs slop_mm > 0")
        if self.slop_mm < 0:
            raise ValueError("slop_mm must be >= 0")

    def reach(self, nodule: ReferenceNodule) -> float:
        if self.mode == "radius":
            return nodule.radius_mm + self.slop_mm
        return self.slop_mm


@dataclass
class ScanResult:
    """One scan's reference findings and detection candidates (position, confidence)."""

    scan_id: str
    nodules: list[ReferenceNodule]
    candidates: list[tuple[tuple[float, float, float], float]]


@dataclass
class MatchResult:
    scan_id: str
    # per candidate, aligned with the input order: ("tp", ids) / ("fp", ()) / ("ignored", ())
    assignments: list[tuple[str, tuple[str, ...]]]
    # per included nodule: its detection confidence, or None when missed
    detection_confidence: dict[str, float | None]
    fp_confidences: list[float]

    @property
    def n_included(self) -> int:
        return len(self.detection_confidence)


def match_candidates(scan: ScanResult, rule: HitCriterion = HitCriterion()) -> MatchResult:
    """Assign candidates to findings under the hit rule. Order-independent:
    crediting ties break by confidence, then distance, then position."""
    n_cand = len(scan.candidates)
    positions = np.asarray([c[0] for c in scan.candidates], dtype=np.float64).reshape(n_cand, 3)
    confidences = np.asarray([c[1] for c in scan.candidates], dtype=np.float64)
    hit_any = np.zeros(n_cand, dtype=bool)
    credited: set[int] = set()
    tp_ids: dict[int, list[str]] = {}
    detection: dict[str, float | None] = {}

    for n_idx, nodule in enumerate(scan.nodules):
        nid = nodule.id or f"nodule{n_idx}"
        if n_cand:
            d = np.linalg.norm(positions - np.asarray(nodule.center_mm), axis=1)
            hits = np.flatnonzero(d <= rule.reach(nodule))
        else:
            hits = np.array([], dtype=int)
        if hits.size:
            hit_any[hits] = True
        if not nodule.included:
            continue
        if hits.size == 0:
            detection[nid] = None
            continue
        ranked = sorted(
            hits, key=lambda ci: (-confidences[ci], d[ci], tuple(positions[ci]))
        )
        best = ranked[0]
        credited.add(best)
        tp_ids.setdefault(best, []).append(nid)
        detection[nid] = float(confidences[best])

    assignments = []
    fp_confidences = []
    for ci in range(n_cand):
        if ci in credited:
            assignments.append(("tp", tuple(tp_ids[ci])))
        elif hit_any[ci]:
            assignments.append(("ignored", ()))
        else:
            assignments.append(("fp", ()))
            fp_confidences.append(float(confidences[ci]))
    return MatchResult(scan.scan_id, assignments, detection, fp_confidences)


def cpm_score(sensitivities) -> float:
    """Mean sensitivity over the seven operating points."""
    s = [float(v) for v in sensitivities]
    if len(s) != len(TARGET_FP_RATES):
        raise ValueError(f"expected {len(TARGET_FP_RATES)} sensitivities, got {len(s)}")
    if any(not 0.0 <= v <= 1.0 for v in s):
        raise ValueError("sensitivities must lie in [0, 1]")
    return float(np.mean(s))


@dataclass
class FrocResult:
    rates: tuple[float, ...]
    sensitivities: tuple[float, ...]
    cpm: float
    curve_fp_per_scan: np.ndarray
    curve_sensitivity: np.ndarray
    n_scans: int
    n_included: int
    boot_mean: tuple[float, ...] | None = None
    boot_var: tuple[float, ...] | None = None
    boot_samples: int = 0
    boot_seed: int | None = None


@dataclass
class _ScanStats:
    det_conf: np.ndarray  # detected included nodules' confidences
    n_included: int
    fp_conf: np.ndarray


def _scan_stats(results, rule) -> list[_ScanStats]:
    stats = []
    for scan in results:
        m = match_candidates(scan, rule)
        det = np.asarray([c for c in m.detection_confidence.values() if c is not None], dtype=np.float64)
        stats.append(_ScanStats(det, m.n_included, np.asarray(m.fp_confidences, dtype=np.float64)))
    return stats


def _operating_points(stats: list[_ScanStats], rates) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Step-curve samples and the best sensitivity at each fp/scan budget."""
    n_scans = len(stats)
    n_included = sum(s.n_included for s in stats)
    if n_scans == 0 or n_included == 0:
        raise ValueError("FROC needs at least one scan and one included reference finding")
    det = np.sort(np.concatenate([s.det_conf for s in stats]))
    fp = np.sort(np.concatenate([s.fp_conf for s in stats]))
    thresholds = np.unique(np.concatenate([det, fp]))[::-1]
    if thresholds.size == 0:
        curve_fps = np.zeros(1)
        curve_sens = np.zeros(1)
    else:
        # counts of values >= t via positions in the ascending sorted arrays
        n_det = det.size - np.searchsorted(det, thresholds, side="left")
        n_fp = fp.size - np.searchsorted(fp, thresholds, side="left")
        curve_sens = n_det / n_included
        curve_fps = n_fp / n_scans
    sens_at = np.empty(len(rates))
    for i, r in enumerate(rates):
        ok = curve_fps <= r
        sens_at[i] = curve_sens[ok].max() if ok.any() else 0.0
    return curve_fps, curve_sens, sens_at


def froc_curve(results: list[ScanResult], rates=TARGET_FP_RATES,
               rule: HitCriterion = HitCriterion()) -> FrocResult:
    """Plug-in FROC over a scan set; no bootstrap fields filled."""
    stats = _scan_stats(results, rule)
    curve_fps, curve_sens, sens_at = _operating_points(stats, rates)
    return FrocResult(
        rates=tuple(float(r) for r in rates),
        sensitivities=tuple(float(s) for s in sens_at),
        cpm=float(np.mean(sens_at)),
        curve_fp_per_scan=curve_fps,
        curve_sensitivity=curve_sens,
        n_scans=len(results),
        n_included=sum(s.n_included for s in stats),
    )


def bootstrap_froc(results: list[ScanResult], n_samples: int = 1000, seed: int = 0,
                   rates=TARGET_FP_RATES, rule: HitCriterion = HitCriterion()):
    """Scan-level bootstrap of the operating sensitivities.

    Resample index draws happen up front from one seeded generator, so results
    do not depend on evaluation scheduling. Returns (mean, var) per rate.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    stats = _scan_stats(results, rule)
    n = len(stats)
    if n == 0:
        raise ValueError("bootstrap needs at least one scan")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, n, size=(n_samples, n))
    sens = np.empty((n_samples, len(rates)))
    for row, pick in enumerate(picks):
        chosen = [stats[i] for i in pick]
        if sum(s.n_included for s in chosen) == 0:
            sens[row] = 0.0
            continue
        _, _, sens_at = _operating_points(chosen, rates)
        sens[row] = sens_at
    return sens.mean(axis=0), sens.var(axis=0)


def evaluate_detections(results: list[ScanResult], n_samples: int = 1000, seed: int = 0,
                        rates=TARGET_FP_RATES, rule: HitCriterion = HitCriterion()) -> FrocResult:
    """froc_curve plus bootstrap mean/variance at each rate."""
    out = froc_curve(results, rates, rule)
    mean, var = bootstrap_froc(results, n_samples, seed, rates, rule)
    out.boot_mean = tuple(float(v) for v in mean)
    out.boot_var = tuple(float(v) for v in var)
    out.boot_samples = int(n_samples)
    out.boot_seed = int(seed)
    return out


def fp_rate_at_sensitivity(result: FrocResult, level: float) -> float:
    """Smallest fp/scan at which the curve reaches the given sensitivity (inf if never)."""
    ok = result.curve_sensitivity >= level
    if not ok.any():
        return math.inf
    return float(result.curve_fp_per_scan[ok].min())


def reference_from_annotations(annotations: AnnotationSet,
                               min_agreement: int = REFERENCE_MIN_AGREEMENT) -> list[ReferenceNodule]:
    """Findings with rater agreement below min_agreement stay listed but excluded."""
    return [
        ReferenceNodule(
            center_mm=a.center_mm,
            radius_mm=a.radius_mm,
            included=a.agreement_count >= min_agreement,
            id=a.id,
        )
        for a in annotations
    ]


def build_scan_results(references: dict[str, list[ReferenceNodule]],
                       candidate_rows) -> list[ScanResult]:
    """Join per-scan references with (scan_id, position, confidence) rows.

    Scans without candidates stay in the result; candidates for unknown scans
    are an error.
    """
    by_scan: dict[str, list] = {scan_id: [] for scan_id in references}
    for scan_id, pos, conf in candidate_rows:
        if scan_id not in by_scan:
            raise ValueError(f"candidates reference unknown scan {scan_id!r}")
        by_scan[scan_id].append((tuple(pos), float(conf)))
    return [
        ScanResult(scan_id=s, nodules=list(references[s]), candidates=by_scan[s])
        for s in sorted(references)
    ]


def write_froc_csv(path, result: FrocResult) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    lines = ["fp_per_scan,sensitivity,boot_mean,boot_var"]
    for i, rate in enumerate(result.rates):
        bm = result.boot_mean[i] if result.boot_mean is not None else ""
        bv = result.boot_var[i] if result.boot_var is not None else ""
        lines.append(f"{rate:g},{result.sensitivities[i]:.6f},"
                     f"{'' if bm == '' else format(bm, '.6f')},"
                     f"{'' if bv == '' else format(bv, '.8f')}")
    p.write_text("\n".join(lines) + "\n")
    return p


def read_froc_csv(path):
    """Returns (rates, sensitivities, boot_mean | None, boot_var | None)."""
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != "fp_per_scan,sensitivity,boot_mean,boot_var":
        raise ValueError(f"unexpected FROC csv header in {path}")
    rates, sens, bm, bv = [], [], [], []
    for line in lines[1:]:
        parts = line.split(",")
        rates.append(float(parts[0]))
        sens.append(float(parts[1]))
        bm.append(float(parts[2]) if len(parts) > 2 and parts[2] else None)
        bv.append(float(parts[3]) if len(parts) > 3 and parts[3] else None)
    has_boot = all(v is not None for v in bm)
    return rates, sens, (bm if has_boot else None), (bv if has_boot else None)


def write_summary_json(path, result: FrocResult) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "fp_per_scan": list(result.rates),
        "sensitivity": [round(s, 4) for s in result.sensitivities],
        "cpm": round(result.cpm, 4),
        "n_scans": result.n_scans,
        "n_reference_findings": result.n_included,
        "bootstrap": None,
    }
    if result.boot_mean is not None:
        doc["bootstrap"] = {
            "n_samples": result.boot_samples,
            "seed": result.boot_seed,
            "mean": [round(v, 6) for v in result.boot_mean],
            "var": [round(v, 8) for v in result.boot_var],
        }
    p.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return p
