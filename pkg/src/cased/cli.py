"""Command-line interface.

Exit codes: 0 success, 1 invalid input or failed run, 2 I/O trouble
(missing or malformed files). Errors print one machine-parseable line to
stderr: ``cased: error kind=<validation|io> <message>``.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .errors import FileFormatError
from .evaluation import (
    HitCriterion,
    build_scan_results,
    evaluate_detections,
    froc_curve,
    read_froc_csv,
    reference_from_annotations,
    write_froc_csv,
    write_summary_json,
)
from .model import load_checkpoint
from .pipeline import (
    STRATEGIES,
    TrainConfig,
    compare_samplers,
    load_compare_config,
    load_train_config,
    standard_benchmark_config,
    train,
)
from .pipeline import predict_volume as _predict_volume
from .postprocess import detect, read_candidates_csv, write_candidates_csv
from .volume import (
    SyntheticSpec,
    load_annotations,
    load_volume,
    save_annotations,
    save_labelmap,
    save_volume,
    synthesize_case,
)


def _error(kind: str, message) -> None:
    print(f"cased: error kind={kind} {message}", file=sys.stderr)


def _cmd_synth(args) -> int:
    count = (args.nodules, args.nodules) if args.nodules is not None else tuple(args.count)
    spec = SyntheticSpec(
        dims=tuple(args.dims),
        spacing_mm=(args.spacing,) * 3,
        nodule_count=count,
        radius_range_mm=tuple(args.radius),
        contrast=args.contrast,
        fine_noise_sd=args.noise,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.n):
        vid = f"case{i:03d}"
        vol, labels, anns = synthesize_case(spec, args.seed + i)
        save_volume(vol, out / f"{vid}.json")
        save_labelmap(labels, out / f"{vid}_labels.json")
        save_annotations(anns, out / f"{vid}_ann.json")
    print(f"wrote {args.n} cases to {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    updates = {}
    if args.data is not None:
        updates["data_dir"] = args.data
        updates["synthetic"] = None
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.iterations is not None:
        updates["iterations"] = args.iterations
    if args.out is not None:
        updates["checkpoint_stem"] = args.out
    if args.metrics is not None:
        updates["metrics_path"] = args.metrics
    if args.fast:
        updates["deterministic"] = False
    elif args.deterministic:
        updates["deterministic"] = True
    if updates:
        cfg = replace(cfg, **updates)
    result = train(cfg, resume_from=args.resume)
    last = result.metrics[-1]["loss"] if result.metrics else float("nan")
    where = f"; checkpoint {result.checkpoint_stem}" if result.checkpoint_stem else ""
    print(f"trained {result.iterations_run} iterations; final loss {last:.6f}{where}")
    return 0


def _cmd_predict(args) -> int:
    vol_path = Path(args.volume)
    scan_id = vol_path.name.removesuffix(".json")
    if args.from_prob:
        prob = load_volume(args.from_prob)
    else:
        if not args.checkpoint:
            raise ValueError("predict needs --checkpoint (or --from-prob)")
        weights, mcfg, hyper, _ = load_checkpoint(f"{args.checkpoint}.model")
        vol = load_volume(vol_path)
        prob = _predict_volume(weights, mcfg, vol, int(hyper.get("output_stride", 8)))
        if args.prob_out:
            save_volume(prob, args.prob_out)
    cands = detect(prob, args.threshold, args.connectivity)
    write_candidates_csv(args.out, [(scan_id, c) for c in cands])
    print(f"{len(cands)} candidates for {scan_id} -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    rows = read_candidates_csv(args.candidates)
    data = Path(args.data)
    ann_paths = sorted(data.glob("*_ann.json"))
    if not ann_paths:
        raise FileNotFoundError(f"no annotation files (*_ann.json) under {data}")
    refs = {}
    for p in ann_paths:
        scan_id = p.name.removesuffix("_ann.json")
        refs[scan_id] = reference_from_annotations(
            load_annotations(p), min_agreement=args.min_agreement
        )
    scans = build_scan_results(refs, rows)
    criterion = HitCriterion(mode="radius", slop_mm=args.slop)
    if args.bootstrap > 0:
        froc = evaluate_detections(
            scans, n_samples=args.bootstrap, seed=args.bootstrap_seed, rule=criterion
        )
    else:
        froc = froc_curve(scans, rule=criterion)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_froc_csv(out / "froc.csv", froc)
    write_summary_json(out / "summary.json", froc)
    for rate, sens in zip(froc.rates, froc.sensitivities):
        print(f"sensitivity at {rate:g} fp/scan: {sens:.4f}")
    print(f"CPM {froc.cpm:.4f}")
    return 0


def _cmd_compare(args) -> int:
    if args.benchmark:
        ccfg = standard_benchmark_config()
    elif args.config:
        ccfg = load_compare_config(args.config)
    else:
        raise ValueError("compare needs --config or --benchmark")
    if args.seeds:
        ccfg = replace(ccfg, seeds=tuple(int(s) for s in args.seeds.split(",")))
    strategies = tuple(args.strategies.split(",")) if args.strategies else None
    report = compare_samplers(ccfg, strategies, out_dir=args.out)
    if args.out:
        out = Path(args.out)
        (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    for name, block in report["strategies"].items():
        print(
            f"strategy={name} median_cpm={block['median_cpm']:.4f} "
            f"median_fp_per_scan={block['median_raw_fp_per_scan']:.2f}"
        )
    return 0


def _read_metrics_lines(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise FileFormatError(f"{path}:{n}: bad metrics line: {e}") from e
    if not records:
        raise FileFormatError(f"{path}: empty metrics log")
    return records


def _cmd_plot(args) -> int:
    if not args.metrics and not args.froc:
        raise ValueError("plot needs --metrics and/or --froc inputs")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "cased"
    n_axes = int(bool(args.metrics)) + int(bool(args.froc))
    fig, axes = plt.subplots(1, n_axes, figsize=(6 * n_axes, 4.5))
    axes = [axes] if n_axes == 1 else list(axes)
    labels = args.labels.split(",") if args.labels else None
    ax_i = 0
    if args.metrics:
        ax = axes[ax_i]
        ax_i += 1
        twin = ax.twinx()
        for idx, path in enumerate(args.metrics):
            recs = _read_metrics_lines(path)
            its = [r["iter"] for r in recs]
            name = labels[idx] if labels and idx < len(labels) else Path(path).stem
            ax.plot(its, [r["loss"] for r in recs], label=f"{name} loss")
            twin.plot(its, [r["f_n"] for r in recs], linestyle="--", alpha=0.6)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        twin.set_ylabel("nodule mixing coefficient")
        twin.set_ylim(-0.05, 1.05)
        ax.legend(loc="upper right")
        ax.set_title("training")
    if args.froc:
        ax = axes[ax_i]
        for idx, path in enumerate(args.froc):
            rates, sens, boot_mean, boot_var = read_froc_csv(path)
            name = labels[idx] if labels and idx < len(labels) else Path(path).stem
            line, = ax.plot(rates, sens, marker="o", label=name)
            if boot_mean is not None:
                sd = [v ** 0.5 for v in boot_var]
                lo = [m - s for m, s in zip(boot_mean, sd)]
                hi = [m + s for m, s in zip(boot_mean, sd)]
                ax.fill_between(rates, lo, hi, color=line.get_color(), alpha=0.15)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("false positives per scan")
        ax.set_ylabel("sensitivity")
        ax.set_ylim(0, 1.05)
        ax.legend(loc="lower right")
        ax.set_title("froc")
    fig.tight_layout()
    fig.savefig(args.out, format="svg", metadata={"Date": None})
    plt.close(fig)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cased",
        description="Curriculum-adaptive patch sampling for sparse 3d detection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic cases with labels and annotations")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=4, help="number of cases")
    p.add_argument("--seed", type=int, default=0, help="seed of the first case")
    p.add_argument("--dims", type=int, nargs=3, default=[64, 64, 64], metavar=("X", "Y", "Z"))
    p.add_argument("--spacing", type=float, default=1.25, help="isotropic voxel size, mm")
    p.add_argument("--count", type=int, nargs=2, default=[2, 4], metavar=("LO", "HI"),
                   help="inclusive range of findings per case")
    p.add_argument("--nodules", type=int, help="exact findings per case (overrides --count)")
    p.add_argument("--radius", type=float, nargs=2, default=[2.0, 4.0], metavar=("LO", "HI"))
    p.add_argument("--contrast", type=float, default=0.35)
    p.add_argument("--noise", type=float, default=0.02)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--data", help="case directory (overrides the config's data source)")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--out", help="checkpoint stem")
    p.add_argument("--metrics", help="metrics NDJSON path")
    p.add_argument("--resume", help="checkpoint stem to resume from")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--deterministic", action="store_true",
                   help="single-threaded, bit-reproducible run (the default)")
    g.add_argument("--fast", action="store_true",
                   help="overlap mining with training; timings become real, runs stop being bit-reproducible")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="write detection candidates for one volume")
    p.add_argument("--volume", required=True, help="volume header JSON")
    p.add_argument("--checkpoint", help="checkpoint stem from train --out")
    p.add_argument("--from-prob", dest="from_prob",
                   help="skip the model; read an existing probability volume")
    p.add_argument("--out", required=True, help="candidates CSV path")
    p.add_argument("--prob-out", dest="prob_out", help="also save the probability volume")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--connectivity", type=int, choices=(6, 26), default=26)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("eval", help="score candidates against reference annotations")
    p.add_argument("--candidates", required=True, help="candidates CSV (may span scans)")
    p.add_argument("--data", required=True, help="directory holding <scan>_ann.json files")
    p.add_argument("--out", required=True, help="output directory for froc.csv and summary.json")
    p.add_argument("--slop", type=float, default=0.0, help="extra hit margin, mm")
    p.add_argument("--min-agreement", type=int, default=3,
                   help="raters required for a finding to count as reference")
    p.add_argument("--bootstrap", type=int, default=1000, help="resamples; 0 disables")
    p.add_argument("--bootstrap-seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("compare", help="train per sampling strategy and score held-out volumes")
    p.add_argument("--config", help="comparison config JSON")
    p.add_argument("--benchmark", action="store_true", help="use the built-in synthetic benchmark")
    p.add_argument("--strategies", help=f"comma list from {','.join(STRATEGIES)}")
    p.add_argument("--seeds", help="comma list of training seeds")
    p.add_argument("--out", help="directory for report.json")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("plot", help="render training curves and froc curves to svg")
    p.add_argument("--metrics", nargs="+", help="metrics NDJSON files")
    p.add_argument("--froc", nargs="+", help="froc CSV files")
    p.add_argument("--labels", help="comma list of series labels")
    p.add_argument("--out", required=True, help="output SVG path")
    p.set_defaults(func=_cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return args.func(args)
    except FileFormatError as e:
        _error("io", e)
        return 2
    except OSError as e:
        _error("io", e)
        return 2
    except (ValueError, KeyError, RuntimeError) as e:
        _error("validation", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
