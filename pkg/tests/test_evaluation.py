"""Matching, FROC curves, CPM, and the scan-level bootstrap.

The matcher is checked against a quadratic brute-force re-derivation, and the
operating points against an exhaustive sweep over every confidence threshold.
"""

import math

import numpy as np
import pytest

from cased.evaluation import (
    TARGET_FP_RATES,
    FrocResult,
    HitCriterion,
    ReferenceNodule,
    ScanResult,
    bootstrap_froc,
    build_scan_results,
    cpm_score,
    evaluate_detections,
    fp_rate_at_sensitivity,
    froc_curve,
    match_candidates,
    read_froc_csv,
    reference_from_annotations,
    write_froc_csv,
    write_summary_json,
)
from cased.volume import Annotation, AnnotationSet


def nod(center, radius=4.0, included=True, id=""):
    return ReferenceNodule(center_mm=center, radius_mm=radius, included=included, id=id)


# ---------------------------------------------------------------------------
# Brute-force matching oracle.


def match_oracle(scan, rule):
    """Quadratic re-derivation of assignment categories and credited confidences."""
    reach = rule.reach
    hits_of = []  # per candidate: indices of nodules within reach
    for pos, _ in scan.candidates:
        h = []
        for i, n in enumerate(scan.nodules):
            d = math.dist(pos, n.center_mm)
            if d <= reach(n):
                h.append(i)
        hits_of.append(h)

    detection = {}
    credited = set()
    for i, n in enumerate(scan.nodules):
        if not n.included:
            continue
        nid = n.id or f"nodule{i}"
        hitting = [
            ci for ci, h in enumerate(hits_of) if i in h
        ]
        if not hitting:
            detection[nid] = None
            continue
        best = min(
            hitting,
            key=lambda ci: (
                -scan.candidates[ci][1],
                math.dist(scan.candidates[ci][0], n.center_mm),
                tuple(scan.candidates[ci][0]),
            ),
        )
        credited.add(best)
        detection[nid] = scan.candidates[best][1]

    kinds = []
    for ci, h in enumerate(hits_of):
        if ci in credited:
            kinds.append("tp")
        elif h:
            kinds.append("ignored")
        else:
            kinds.append("fp")
    return kinds, detection


def froc_oracle(scans, rates, rule):
    """Exhaustive sweep over every candidate confidence as the threshold."""
    det, fp, n_included = [], [], 0
    for scan in scans:
        kinds, detection = match_oracle(scan, rule)
        n_included += len(detection)
        det.extend(c for c in detection.values() if c is not None)
        fp.extend(scan.candidates[ci][1] for ci, k in enumerate(kinds) if k == "fp")
    thresholds = sorted(set(det) | set(fp))
    points = [(0.0, 0.0)]
    for t in thresholds:
        sens = sum(1 for c in det if c >= t) / n_included
        fps = sum(1 for c in fp if c >= t) / len(scans)
        points.append((fps, sens))
    out = []
    for r in rates:
        feasible = [s for f, s in points if f <= r]
        out.append(max(feasible) if feasible else 0.0)
    return tuple(out)


def random_scan(rng, scan_id, n_nodules=5, n_candidates=10):
    nodules = []
    for i in range(n_nodules):
        nodules.append(
            ReferenceNodule(
                center_mm=tuple(rng.uniform(0, 60, 3)),
                radius_mm=float(rng.uniform(2, 6)),
                included=bool(rng.random() > 0.25),
                id=f"{scan_id}n{i}",
            )
        )
    # distinct confidences so crediting has a unique answer
    confs = rng.permutation(np.linspace(0.05, 0.95, n_candidates))
    candidates = []
    for i in range(n_candidates):
        if rng.random() < 0.6 and nodules:
            base = np.asarray(nodules[rng.integers(len(nodules))].center_mm)
            pos = base + rng.uniform(-6, 6, 3)
        else:
            pos = rng.uniform(0, 60, 3)
        candidates.append((tuple(float(v) for v in pos), float(confs[i])))
    return ScanResult(scan_id=scan_id, nodules=nodules, candidates=candidates)


# ---------------------------------------------------------------------------


class TestHitCriterion:
    def test_radius_mode_reach(self):
        n = nod((0, 0, 0), radius=4.0)
        assert HitCriterion().reach(n) == 4.0
        assert HitCriterion(slop_mm=1.5).reach(n) == 5.5

    def test_fixed_mode_ignores_radius(self):
        assert HitCriterion(mode="fixed", slop_mm=3.0).reach(nod((0, 0, 0), radius=40.0)) == 3.0

    def test_validation(self):
        with pytest.raises(ValueError):
            HitCriterion(mode="iou")
        with pytest.raises(ValueError):
            HitCriterion(mode="fixed")  # fixed needs a positive slop
        with pytest.raises(ValueError):
            HitCriterion(slop_mm=-1.0)


class TestMatching:
    def test_hit_inside_radius(self):
        scan = ScanResult("s", [nod((0, 0, 0), 4.0, id="a")], [((3.0, 0.0, 0.0), 0.9)])
        m = match_candidates(scan)
        assert m.assignments == [("tp", ("a",))]
        assert m.detection_confidence == {"a": 0.9}
        assert m.fp_confidences == []

    def test_miss_just_outside_radius(self):
        scan = ScanResult("s", [nod((0, 0, 0), 4.0, id="a")], [((4.01, 0.0, 0.0), 0.9)])
        m = match_candidates(scan)
        assert m.assignments == [("fp", ())]
        assert m.detection_confidence == {"a": None}
        assert m.fp_confidences == [0.9]

    def test_boundary_distance_counts_as_hit(self):
        scan = ScanResult("s", [nod((0, 0, 0), 4.0, id="a")], [((4.0, 0.0, 0.0), 0.7)])
        assert match_candidates(scan).assignments[0][0] == "tp"

    def test_slop_extends_reach(self):
        scan = ScanResult("s", [nod((0, 0, 0), 4.0, id="a")], [((4.9, 0.0, 0.0), 0.7)])
        assert match_candidates(scan, HitCriterion(slop_mm=1.0)).assignments[0][0] == "tp"
        assert match_candidates(scan).assignments[0][0] == "fp"

    def test_highest_confidence_candidate_credited(self):
        scan = ScanResult(
            "s",
            [nod((0, 0, 0), 4.0, id="a")],
            [((1.0, 0.0, 0.0), 0.4), ((2.0, 0.0, 0.0), 0.8)],
        )
        m = match_candidates(scan)
        assert m.assignments == [("ignored", ()), ("tp", ("a",))]
        assert m.detection_confidence["a"] == 0.8
        assert m.fp_confidences == []

    def test_confidence_tie_breaks_by_distance(self):
        scan = ScanResult(
            "s",
            [nod((0, 0, 0), 4.0, id="a")],
            [((3.0, 0.0, 0.0), 0.5), ((1.0, 0.0, 0.0), 0.5)],
        )
        m = match_candidates(scan)
        assert m.assignments == [("ignored", ()), ("tp", ("a",))]

    def test_one_candidate_may_credit_two_nodules(self):
        scan = ScanResult(
            "s",
            [nod((0, 0, 0), 4.0, id="a"), nod((5.0, 0.0, 0.0), 4.0, id="b")],
            [((2.5, 0.0, 0.0), 0.9)],
        )
        m = match_candidates(scan)
        assert m.assignments == [("tp", ("a", "b"))]
        assert m.detection_confidence == {"a": 0.9, "b": 0.9}

    def test_excluded_nodule_absorbs_candidate(self):
        scan = ScanResult(
            "s",
            [nod((0, 0, 0), 4.0, included=False, id="x")],
            [((1.0, 0.0, 0.0), 0.9), ((50.0, 0.0, 0.0), 0.3)],
        )
        m = match_candidates(scan)
        assert m.assignments == [("ignored", ()), ("fp", ())]
        assert m.detection_confidence == {}  # excluded findings are not counted
        assert m.fp_confidences == [0.3]

    def test_no_candidates(self):
        m = match_candidates(ScanResult("s", [nod((0, 0, 0), id="a")], []))
        assert m.detection_confidence == {"a": None} and m.n_included == 1

    def test_anonymous_nodules_get_positional_ids(self):
        scan = ScanResult("s", [nod((0, 0, 0)), nod((50, 0, 0))], [])
        assert set(match_candidates(scan).detection_confidence) == {"nodule0", "nodule1"}

    @pytest.mark.parametrize("seed", range(6))
    def test_random_scans_match_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        scan = random_scan(rng, f"s{seed}")
        rule = HitCriterion(slop_mm=float(rng.uniform(0, 2)))
        m = match_candidates(scan, rule)
        kinds, detection = match_oracle(scan, rule)
        assert [k for k, _ in m.assignments] == kinds
        assert m.detection_confidence == detection

    def test_candidate_order_does_not_matter(self):
        rng = np.random.default_rng(42)
        scan = random_scan(rng, "s")
        m1 = match_candidates(scan)
        perm = rng.permutation(len(scan.candidates))
        shuffled = ScanResult(scan.scan_id, scan.nodules, [scan.candidates[i] for i in perm])
        m2 = match_candidates(shuffled)
        assert m1.detection_confidence == m2.detection_confidence
        assert sorted(m1.fp_confidences) == sorted(m2.fp_confidences)
        for new_pos, old_pos in enumerate(perm):
            assert m2.assignments[new_pos] == m1.assignments[old_pos]


class TestCpm:
    def test_mean_of_seven(self):
        assert cpm_score([1.0] * 7) == 1.0
        assert cpm_score([0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]) == pytest.approx(3 / 7)

    def test_validation(self):
        with pytest.raises(ValueError):
            cpm_score([0.5] * 6)
        with pytest.raises(ValueError):
            cpm_score([0.5] * 6 + [1.2])


class TestFrocCurve:
    def test_perfect_detector(self):
        scans = [
            ScanResult(
                f"s{i}",
                [nod((0, 0, 0), id=f"s{i}a"), nod((30, 0, 0), id=f"s{i}b")],
                [((0.0, 0.0, 0.0), 0.9), ((30.0, 0.0, 0.0), 0.8)],
            )
            for i in range(3)
        ]
        r = froc_curve(scans)
        assert r.sensitivities == (1.0,) * 7
        assert r.cpm == 1.0
        assert r.n_scans == 3 and r.n_included == 6
        assert r.boot_mean is None and r.boot_var is None

    def test_no_candidates_is_zero_curve(self):
        scans = [ScanResult("s", [nod((0, 0, 0), id="a")], [])]
        r = froc_curve(scans)
        assert r.sensitivities == (0.0,) * 7 and r.cpm == 0.0

    def test_needs_a_reference_finding(self):
        with pytest.raises(ValueError):
            froc_curve([ScanResult("s", [], [((0.0, 0.0, 0.0), 0.5)])])
        with pytest.raises(ValueError):
            froc_curve([])

    def test_three_scan_fixture_matches_exhaustive_sweep(self):
        rng = np.random.default_rng(11)
        scans = [random_scan(rng, f"s{i}", n_nodules=4, n_candidates=8) for i in range(3)]
        rule = HitCriterion(slop_mm=1.0)
        r = froc_curve(scans, rule=rule)
        assert r.sensitivities == pytest.approx(froc_oracle(scans, TARGET_FP_RATES, rule))

    @pytest.mark.parametrize("seed", range(4))
    def test_sensitivities_non_decreasing_in_rate(self, seed):
        rng = np.random.default_rng(seed + 100)
        scans = [random_scan(rng, f"s{i}") for i in range(4)]
        s = froc_curve(scans).sensitivities
        assert all(a <= b for a, b in zip(s, s[1:]))

    def test_low_confidence_fp_does_not_change_operating_points(self):
        rng = np.random.default_rng(12)
        scans = [random_scan(rng, f"s{i}") for i in range(3)]
        base = froc_curve(scans).sensitivities
        noisy = [
            ScanResult(s.scan_id, s.nodules, s.candidates + [((500.0, 500.0, 500.0), 0.001)])
            for s in scans
        ]
        assert froc_curve(noisy).sensitivities == base

    def test_fp_rate_at_sensitivity(self):
        scans = [
            ScanResult(
                "s",
                [nod((0, 0, 0), id="a"), nod((30, 0, 0), id="b")],
                [((0.0, 0.0, 0.0), 0.9), ((60.0, 0.0, 0.0), 0.8), ((30.0, 0.0, 0.0), 0.7)],
            )
        ]
        r = froc_curve(scans)
        assert fp_rate_at_sensitivity(r, 0.5) == 0.0
        assert fp_rate_at_sensitivity(r, 1.0) == 1.0  # needs the fp at 0.8 included
        assert fp_rate_at_sensitivity(r, 1.01) == math.inf


def ladder_fixture():
    """Eight scans, 125 findings each, and a 1024-candidate confidence ladder
    arranged so the seven operating sensitivities land on fixed values."""
    n_scans = 8
    per_scan = 125
    centers = {}
    for s in range(n_scans):
        grid = [
            (20.0 * i, 20.0 * j, 20.0 * k)
            for k in range(5)
            for j in range(5)
            for i in range(5)
        ]
        centers[f"scan{s}"] = grid
    runs = [(759, 2), (66, 1), (41, 2), (37, 4), (23, 8), (20, 16), (13, 32)]
    candidates = {f"scan{s}": [] for s in range(n_scans)}
    conf_iter = iter((2048 - k) / 2048 for k in range(1024))
    tp_cursor = 0
    fp_cursor = 0
    for tp_count, fp_count in runs:
        for _ in range(tp_count):
            scan = f"scan{tp_cursor // per_scan}"
            pos = centers[scan][tp_cursor % per_scan]
            candidates[scan].append((pos, next(conf_iter)))
            tp_cursor += 1
        for _ in range(fp_count):
            scan = f"scan{fp_cursor % n_scans}"
            candidates[scan].append(((500.0 + 30.0 * (fp_cursor // n_scans), 0.0, 0.0),
                                     next(conf_iter)))
            fp_cursor += 1
    scans = []
    for s in range(n_scans):
        sid = f"scan{s}"
        nodules = [nod(c, radius=4.0, id=f"{sid}n{i}") for i, c in enumerate(centers[sid])]
        scans.append(ScanResult(sid, nodules, candidates[sid]))
    return scans


class TestLadderFixture:
    def test_seven_point_row(self):
        r = froc_curve(ladder_fixture())
        assert r.n_scans == 8 and r.n_included == 1000
        assert r.sensitivities == pytest.approx(
            (0.759, 0.825, 0.866, 0.903, 0.926, 0.946, 0.959), abs=1e-9
        )
        assert r.cpm == pytest.approx(0.8834286, abs=1e-4)

    def test_matches_exhaustive_sweep(self):
        scans = ladder_fixture()
        assert froc_curve(scans).sensitivities == pytest.approx(
            froc_oracle(scans, TARGET_FP_RATES, HitCriterion())
        )


class TestBootstrap:
    def identical_scans(self, n=6):
        return [
            ScanResult(
                f"s{i}",
                [nod((0, 0, 0), id=f"s{i}a"), nod((30, 0, 0), id=f"s{i}b")],
                [((0.0, 0.0, 0.0), 0.9), ((100.0, 0.0, 0.0), 0.6)],
            )
            for i in range(n)
        ]

    def test_identical_scans_have_zero_variance(self):
        mean, var = bootstrap_froc(self.identical_scans(), n_samples=64, seed=0)
        plug = froc_curve(self.identical_scans()).sensitivities
        np.testing.assert_allclose(var, 0.0, atol=1e-15)
        np.testing.assert_allclose(mean, plug, atol=1e-15)

    def test_deterministic_in_seed(self):
        rng = np.random.default_rng(13)
        scans = [random_scan(rng, f"s{i}") for i in range(5)]
        a = bootstrap_froc(scans, n_samples=50, seed=7)
        b = bootstrap_froc(scans, n_samples=50, seed=7)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_single_sample_allowed(self):
        mean, var = bootstrap_froc(self.identical_scans(2), n_samples=1, seed=3)
        assert mean.shape == (7,) and not var.any()

    def test_sample_count_validated(self):
        with pytest.raises(ValueError):
            bootstrap_froc(self.identical_scans(2), n_samples=0)

    def test_mean_tracks_plug_in_estimate(self):
        rng = np.random.default_rng(14)
        scans = [random_scan(rng, f"s{i}", n_nodules=6, n_candidates=12) for i in range(8)]
        r = evaluate_detections(scans, n_samples=1000, seed=5)
        for plug, bm, bv in zip(r.sensitivities, r.boot_mean, r.boot_var):
            assert abs(bm - plug) <= 3.0 * math.sqrt(bv) + 1e-9

    def test_evaluate_fills_bootstrap_fields(self):
        r = evaluate_detections(self.identical_scans(3), n_samples=16, seed=2)
        assert r.boot_samples == 16 and r.boot_seed == 2
        assert len(r.boot_mean) == 7 and len(r.boot_var) == 7


class TestReferenceAssembly:
    def test_agreement_threshold(self):
        anns = AnnotationSet(
            (
                Annotation(id="a", center_mm=(0, 0, 0), radius_mm=3.0, agreement_count=4),
                Annotation(id="b", center_mm=(9, 0, 0), radius_mm=3.0, agreement_count=3),
                Annotation(id="c", center_mm=(18, 0, 0), radius_mm=3.0, agreement_count=2),
            )
        )
        refs = reference_from_annotations(anns)
        assert [(r.id, r.included) for r in refs] == [("a", True), ("b", True), ("c", False)]
        loose = reference_from_annotations(anns, min_agreement=1)
        assert all(r.included for r in loose)

    def test_build_scan_results_joins_and_sorts(self):
        refs = {"b": [nod((0, 0, 0), id="x")], "a": [nod((0, 0, 0), id="y")]}
        rows = [("b", (1.0, 0.0, 0.0), 0.5)]
        scans = build_scan_results(refs, rows)
        assert [s.scan_id for s in scans] == ["a", "b"]
        assert scans[0].candidates == [] and len(scans[1].candidates) == 1

    def test_unknown_scan_rejected(self):
        with pytest.raises(ValueError):
            build_scan_results({"a": []}, [("zzz", (0.0, 0.0, 0.0), 0.5)])


class TestFrocFiles:
    def result(self, boot):
        scans = [
            ScanResult(
                "s",
                [nod((0, 0, 0), id="a"), nod((30, 0, 0), id="b")],
                [((0.0, 0.0, 0.0), 0.9), ((80.0, 0.0, 0.0), 0.6)],
            )
        ]
        if boot:
            return evaluate_detections(scans, n_samples=32, seed=1)
        return froc_curve(scans)

    def test_csv_round_trip_with_bootstrap(self, tmp_path):
        r = self.result(boot=True)
        path = write_froc_csv(tmp_path / "froc.csv", r)
        rates, sens, bm, bv = read_froc_csv(path)
        assert tuple(rates) == r.rates
        assert sens == pytest.approx(r.sensitivities, abs=5e-7)
        assert bm == pytest.approx(r.boot_mean, abs=5e-7)
        assert bv == pytest.approx(r.boot_var, abs=5e-9)

    def test_csv_round_trip_plain(self, tmp_path):
        path = write_froc_csv(tmp_path / "froc.csv", self.result(boot=False))
        rates, sens, bm, bv = read_froc_csv(path)
        assert bm is None and bv is None and len(rates) == 7

    def test_csv_header_rejected(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("rate,sens\n0.125,0.5\n")
        with pytest.raises(ValueError):
            read_froc_csv(p)

    def test_summary_json(self, tmp_path):
        import json

        r = self.result(boot=True)
        path = write_summary_json(tmp_path / "summary.json", r)
        doc = json.loads(path.read_text())
        assert doc["cpm"] == round(r.cpm, 4)
        assert doc["n_scans"] == 1 and doc["n_reference_findings"] == 2
        assert doc["bootstrap"]["n_samples"] == 32
        assert len(doc["sensitivity"]) == 7
