"""End-to-end command-line runs, in process via main(argv).

Covers the synth -> train -> predict -> eval -> plot chain, the documented
exit codes, and byte-level reproducibility of artifacts.
"""

import json
from pathlib import Path

import pytest

import numpy as np

from cased.cli import main
from cased.pipeline import TrainConfig, train_config_to_dict
from cased.volume import (
    Annotation,
    AnnotationSet,
    SyntheticSpec,
    Volume,
    load_labelmap,
    load_volume,
    save_annotations,
    save_volume,
)


SYNTH_ARGS = ["--dims", "24", "24", "24", "--radius", "2", "3", "--count", "1", "2"]


def run(*argv):
    return main(list(argv))


def synth(out, n=2, seed=0, extra=()):
    code = run("synth", "--out", str(out), "--n", str(n), "--seed", str(seed),
               *SYNTH_ARGS, *extra)
    assert code == 0
    return out


class TestParsing:
    def test_help_exits_zero(self, capsys):
        assert run("--help") == 0
        assert "synth" in capsys.readouterr().out

    def test_subcommand_help(self, capsys):
        assert run("train", "--help") == 0

    def test_unknown_command(self, capsys):
        assert run("frobnicate") == 1

    def test_unknown_flag(self, capsys):
        assert run("synth", "--out", "/tmp/x", "--bogus") == 1

    def test_fast_and_deterministic_conflict(self, capsys):
        assert run("train", "--fast", "--deterministic") == 1


class TestSynth:
    def test_writes_case_triples(self, tmp_path, capsys):
        synth(tmp_path, n=2)
        for vid in ("case000", "case001"):
            for suffix in (".json", ".raw", "_labels.json", "_labels.raw", "_ann.json"):
                assert (tmp_path / f"{vid}{suffix}").exists()
        assert "wrote 2 cases" in capsys.readouterr().out

    def test_reproducible(self, tmp_path):
        a = synth(tmp_path / "a")
        b = synth(tmp_path / "b")
        for name in ("case000.raw", "case000_labels.raw", "case000_ann.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_nodules_flag_fixes_count(self, tmp_path):
        synth(tmp_path, n=1, extra=["--nodules", "0"])
        anns = json.loads((tmp_path / "case000_ann.json").read_text())
        assert anns == []


class TestTrain:
    def test_on_synth_data(self, tmp_path, capsys):
        data = synth(tmp_path / "data")
        code = run(
            "train", "--data", str(data), "--iterations", "8",
            "--out", str(tmp_path / "ck"), "--metrics", str(tmp_path / "m.ndjson"),
        )
        assert code == 0
        assert "trained 8 iterations" in capsys.readouterr().out
        assert (tmp_path / "ck.model.json").exists()
        assert (tmp_path / "ck.sampler.json").exists()
        assert len((tmp_path / "m.ndjson").read_text().splitlines()) == 8

    def test_metrics_reproducible(self, tmp_path):
        data = synth(tmp_path / "data")
        logs = []
        for name in ("a", "b"):
            path = tmp_path / f"{name}.ndjson"
            assert run("train", "--data", str(data), "--iterations", "6",
                       "--metrics", str(path)) == 0
            logs.append(path.read_bytes())
        assert logs[0] == logs[1]

    def test_no_positive_patches_is_validation_error(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert run("synth", "--out", str(data), "--n", "1", "--seed", "3",
                   *SYNTH_ARGS, "--nodules", "0") == 0
        code = run("train", "--data", str(data), "--iterations", "4")
        err = capsys.readouterr().err
        assert code == 1
        assert "cased: error kind=validation" in err
        assert "no positive patches" in err

    def test_malformed_config_is_io_error(self, tmp_path, capsys):
        bad = tmp_path / "cfg.json"
        bad.write_text("{not json")
        assert run("train", "--config", str(bad)) == 2
        assert "kind=io" in capsys.readouterr().err


class TestPredictEvalPlot:
    def test_full_chain(self, tmp_path, capsys):
        data = synth(tmp_path / "data", n=2)
        ck = tmp_path / "ck"
        assert run("train", "--data", str(data), "--iterations", "10",
                   "--out", str(ck), "--metrics", str(tmp_path / "m.ndjson")) == 0
        cands = tmp_path / "cands.csv"
        assert run("predict", "--volume", str(data / "case000.json"),
                   "--checkpoint", str(ck), "--out", str(cands),
                   "--prob-out", str(tmp_path / "prob.json")) == 0
        assert cands.read_text().startswith("scan_id,x_mm,y_mm,z_mm,probability")
        prob = load_volume(tmp_path / "prob.json")
        assert prob.dims == (24, 24, 24)

        out = tmp_path / "eval"
        assert run("eval", "--candidates", str(cands), "--data", str(data),
                   "--out", str(out), "--bootstrap", "8") == 0
        stdout = capsys.readouterr().out
        assert "CPM" in stdout and "sensitivity at 0.125 fp/scan" in stdout
        assert (out / "froc.csv").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert 0.0 <= summary["cpm"] <= 1.0

        fig = tmp_path / "fig.svg"
        assert run("plot", "--metrics", str(tmp_path / "m.ndjson"),
                   "--froc", str(out / "froc.csv"), "--out", str(fig)) == 0
        assert fig.read_text().lstrip().startswith("<?xml")

    def test_prob_oracle_scores_perfectly(self, tmp_path):
        # probabilities painted straight from the labels must hit every finding
        data = synth(tmp_path / "data", n=2, extra=["--nodules", "2"])
        rows = ["scan_id,x_mm,y_mm,z_mm,probability"]
        for vid in ("case000", "case001"):
            labels = load_labelmap(data / f"{vid}_labels.json")
            prob = Volume(labels.values.astype(np.float32) * 0.9 + 0.05,
                          labels.spacing_mm, labels.origin_mm)
            save_volume(prob, tmp_path / f"{vid}_prob.json")
            out_csv = tmp_path / f"{vid}.csv"
            assert run("predict", "--volume", str(data / f"{vid}.json"),
                       "--from-prob", str(tmp_path / f"{vid}_prob.json"),
                       "--out", str(out_csv)) == 0
            rows.extend(out_csv.read_text().splitlines()[1:])
        merged = tmp_path / "all.csv"
        merged.write_text("\n".join(rows) + "\n")
        out = tmp_path / "eval"
        assert run("eval", "--candidates", str(merged), "--data", str(data),
                   "--out", str(out), "--bootstrap", "0") == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["cpm"] == 1.0
        assert summary["n_reference_findings"] == 4

    def test_predict_needs_a_source(self, tmp_path, capsys):
        data = synth(tmp_path / "data", n=1)
        code = run("predict", "--volume", str(data / "case000.json"),
                   "--out", str(tmp_path / "c.csv"))
        assert code == 1
        assert "kind=validation" in capsys.readouterr().err

    def test_missing_volume_is_io_error(self, tmp_path, capsys):
        assert run("predict", "--volume", str(tmp_path / "nope.json"),
                   "--from-prob", str(tmp_path / "nope2.json"),
                   "--out", str(tmp_path / "c.csv")) == 2
        assert "kind=io" in capsys.readouterr().err

    def test_malformed_candidates_is_io_error(self, tmp_path, capsys):
        data = synth(tmp_path / "data", n=1)
        bad = tmp_path / "bad.csv"
        bad.write_text("who,what\n1,2\n")
        assert run("eval", "--candidates", str(bad), "--data", str(data),
                   "--out", str(tmp_path / "out")) == 2

    def test_plot_without_inputs(self, capsys):
        assert run("plot", "--out", "/tmp/x.svg") == 1

    def test_plot_reproducible(self, tmp_path):
        data = synth(tmp_path / "data")
        assert run("train", "--data", str(data), "--iterations", "5",
                   "--metrics", str(tmp_path / "m.ndjson")) == 0
        figs = []
        for name in ("a.svg", "b.svg"):
            path = tmp_path / name
            assert run("plot", "--metrics", str(tmp_path / "m.ndjson"),
                       "--out", str(path)) == 0
            figs.append(path.read_bytes())
        assert figs[0] == figs[1]


def ladder_files(tmp_path):
    """Eight scans of 125 findings and the 1024-candidate confidence ladder."""
    n_scans, per_scan = 8, 125
    centers = {}
    for s in range(n_scans):
        sid = f"scan{s}"
        grid = [
            (20.0 * i, 20.0 * j, 20.0 * k)
            for k in range(5)
            for j in range(5)
            for i in range(5)
        ]
        centers[sid] = grid
        anns = AnnotationSet(
            tuple(
                Annotation(id=f"{sid}n{n}", center_mm=c, radius_mm=4.0, agreement_count=4)
                for n, c in enumerate(grid)
            )
        )
        save_annotations(anns, tmp_path / f"{sid}_ann.json")

    runs = [(759, 2), (66, 1), (41, 2), (37, 4), (23, 8), (20, 16), (13, 32)]
    lines = ["scan_id,x_mm,y_mm,z_mm,probability"]
    conf = iter((2048 - k) / 2048 for k in range(1024))
    tp_cursor = fp_cursor = 0
    for tp_count, fp_count in runs:
        for _ in range(tp_count):
            sid = f"scan{tp_cursor // per_scan}"
            x, y, z = centers[sid][tp_cursor % per_scan]
            lines.append(f"{sid},{x},{y},{z},{next(conf):.6f}")
            tp_cursor += 1
        for _ in range(fp_count):
            sid = f"scan{fp_cursor % n_scans}"
            lines.append(f"{sid},{500.0 + 30.0 * (fp_cursor // n_scans)},0.0,0.0,{next(conf):.6f}")
            fp_cursor += 1
    cands = tmp_path / "ladder.csv"
    cands.write_text("\n".join(lines) + "\n")
    return cands


class TestEvalLadder:
    def test_seven_point_row_through_the_cli(self, tmp_path, capsys):
        cands = ladder_files(tmp_path)
        out = tmp_path / "eval"
        assert run("eval", "--candidates", str(cands), "--data", str(tmp_path),
                   "--out", str(out), "--bootstrap", "0") == 0
        stdout = capsys.readouterr().out
        assert "sensitivity at 0.125 fp/scan: 0.7590" in stdout
        assert "CPM 0.8834" in stdout
        summary = json.loads((out / "summary.json").read_text())
        assert summary["sensitivity"] == [0.759, 0.825, 0.866, 0.903, 0.926, 0.946, 0.959]
        assert summary["cpm"] == pytest.approx(0.8834, abs=5e-5)
        assert summary["n_reference_findings"] == 1000
        assert summary["bootstrap"] is None


class TestCompare:
    def test_config_driven_run(self, tmp_path, capsys):
        train_cfg = TrainConfig(
            iterations=10,
            batch_size=4,
            synthetic=SyntheticSpec(dims=(24, 24, 24), nodule_count=(1, 2),
                                    radius_range_mm=(2.0, 3.0), max_positive_fraction=0.05),
            n_volumes=2,
            data_seed=600,
        )
        doc = {
            "train": train_config_to_dict(train_cfg),
            "strategies": ["uniform"],
            "seeds": [0],
            "heldout_n": 1,
            "heldout_seed": 990000,
        }
        cfg_path = tmp_path / "compare.json"
        cfg_path.write_text(json.dumps(doc))
        out = tmp_path / "out"
        assert run("compare", "--config", str(cfg_path), "--out", str(out)) == 0
        stdout = capsys.readouterr().out
        assert "strategy=uniform median_cpm=" in stdout
        report = json.loads((out / "report.json").read_text())
        assert report["seeds"] == [0]
        assert (out / "froc_uniform_seed0.csv").exists()

    def test_needs_config_or_benchmark(self, capsys):
        assert run("compare") == 1
        assert "kind=validation" in capsys.readouterr().err
