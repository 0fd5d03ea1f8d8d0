"""End-to-end orchestration: dataset assembly, the training loop with adaptive
mining, whole-volume prediction, checkpoint/resume, and sampling-strategy
comparison on held-out volumes.

Determinism contract: with deterministic=True and a fixed seed, training writes
bit-identical metrics logs and checkpoints across runs (wall_ms is recorded as
0.0 there; fast mode logs real timings and runs mining concurrently against a
weight snapshot).
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FileFormatError, NoPositivePatchesError, TrainingDivergedError
from .evaluation import (
    TARGET_FP_RATES,
    ScanResult,
    froc_curve,
    match_candidates,
    reference_from_annotations,
    write_froc_csv,
)
from .model import (
    FcnConfig,
    Weights,
    backward,
    bce_loss,
    forward,
    initialize_weights,
    load_checkpoint,
    require_geometry_match,
    save_checkpoint,
    sgd_nesterov_step,
    snapshot,
)
from .patching import (
    PatchGeometry,
    PatchIndex,
    classify_patch,
    enumerate_patches,
    extract_input,
    extract_target,
    reflect_indices,
)
from .postprocess import detect
from .sampler import (
    AdaptiveWeighting,
    CurriculumSchedule,
    PatchRecord,
    SamplerState,
    advance,
    load_sampler_state,
    mixing_coefficient,
    record_mining_results,
    sample_batch,
    save_sampler_state,
)
from .volume import (
    AnnotationSet,
    LabelMap,
    SyntheticSpec,
    Volume,
    load_annotations,
    load_labelmap,
    load_volume,
    rasterize_sphere,
    require_same_grid,
    synthesize_case,
)

logger = logging.getLogger(__name__)

STRATEGIES = ("cased", "uniform", "nodule_only", "curriculum_no_hnm")


@dataclass
class TrainConfig:
    """Everything one training run needs; round-trips through a single JSON document."""

    iterations: int = 1000
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    output_stride: int = 8
    seed: int = 0
    deterministic: bool = True
    model: FcnConfig = field(default_factory=FcnConfig)
    schedule: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    weighting: AdaptiveWeighting = field(default_factory=AdaptiveWeighting)
    mine_every: int = 200
    mine_coverage: float = 1.0
    mine_enabled: bool = True
    fp_threshold: float = 0.5
    data_dir: str | None = None
    synthetic: SyntheticSpec | None = None
    n_volumes: int = 0
    data_seed: int = 1000
    checkpoint_stem: str | None = None
    metrics_path: str | None = None
    checkpoint_every: int | None = None

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mine_every < 1:
            raise ValueError(f"mine_every must be >= 1, got {self.mine_every}")
        if not 0.0 < self.mine_coverage <= 1.0:
            raise ValueError(f"mine_coverage must lie in (0, 1], got {self.mine_coverage}")
        if not 0.0 < self.fp_threshold < 1.0:
            raise ValueError(f"fp_threshold must lie in (0, 1), got {self.fp_threshold}")
        if self.checkpoint_every is not None and self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1 when set")

    @property
    def geometry(self) -> PatchGeometry:
        return self.model.geometry(self.output_stride)


def train_config_to_dict(cfg: TrainConfig) -> dict:
    d = {
        k: getattr(cfg, k)
        for k in (
            "iterations", "batch_size", "lr", "momentum", "output_stride", "seed",
            "deterministic", "mine_every", "mine_coverage", "mine_enabled",
            "fp_threshold", "data_dir", "n_volumes", "data_seed",
            "checkpoint_stem", "metrics_path", "checkpoint_every",
        )
    }
    d["model"] = {
        "kind": cfg.model.kind,
        "channels": list(cfg.model.channels),
        "activation": cfg.model.activation,
        "pool": cfg.model.pool,
    }
    d["schedule"] = {
        "kind": cfg.schedule.kind,
        "rate": cfg.schedule.rate,
        "floor": cfg.schedule.floor,
        "value": cfg.schedule.value,
    }
    d["weighting"] = {
        "beta_half_life": cfg.weighting.beta_half_life,
        "beta_fixed": cfg.weighting.beta_fixed,
        "fp_share": cfg.weighting.fp_share,
    }
    if cfg.synthetic is None:
        d["synthetic"] = None
    else:
        s = cfg.synthetic
        d["synthetic"] = {
            "dims": list(s.dims),
            "spacing_mm": list(s.spacing_mm),
            "nodule_count": list(s.nodule_count),
            "radius_range_mm": list(s.radius_range_mm),
            "texture_scale_mm": s.texture_scale_mm,
            "intensity_range": list(s.intensity_range),
            "fine_noise_sd": s.fine_noise_sd,
            "contrast": s.contrast,
            "max_positive_fraction": s.max_positive_fraction,
            "min_separation_mm": s.min_separation_mm,
            "distractor_count": list(s.distractor_count),
            "distractor_radius_mm": list(s.distractor_radius_mm),
        }
    return d


def synthetic_spec_from_dict(d: dict) -> SyntheticSpec:
    return SyntheticSpec(
        dims=tuple(d.get("dims", (64, 64, 64))),
        spacing_mm=tuple(d.get("spacing_mm", (1.25, 1.25, 1.25))),
        nodule_count=tuple(d.get("nodule_count", (2, 4))),
        radius_range_mm=tuple(d.get("radius_range_mm", (2.0, 4.0))),
        texture_scale_mm=d.get("texture_scale_mm", 4.0),
        intensity_range=tuple(d.get("intensity_range", (0.05, 0.55))),
        fine_noise_sd=d.get("fine_noise_sd", 0.02),
        contrast=d.get("contrast", 0.35),
        max_positive_fraction=d.get("max_positive_fraction", 0.01),
        min_separation_mm=d.get("min_separation_mm", 2.0),
        distractor_count=tuple(d.get("distractor_count", (0, 0))),
        distractor_radius_mm=tuple(d.get("distractor_radius_mm", (1.25, 1.75))),
    )


def train_config_from_dict(d: dict) -> TrainConfig:
    kwargs = dict(d)
    if "model" in kwargs and kwargs["model"] is not None:
        m = kwargs["model"]
        kwargs["model"] = FcnConfig(
            kind=m.get("kind", "flat"),
            channels=tuple(m.get("channels", (8, 8, 8, 8))),
            activation=m.get("activation", "tanh"),
            pool=m.get("pool", "max"),
        )
    if "schedule" in kwargs and kwargs["schedule"] is not None:
        kwargs["schedule"] = CurriculumSchedule(**kwargs["schedule"])
    if "weighting" in kwargs and kwargs["weighting"] is not None:
        kwargs["weighting"] = AdaptiveWeighting(**kwargs["weighting"])
    if kwargs.get("synthetic") is not None:
        kwargs["synthetic"] = synthetic_spec_from_dict(kwargs["synthetic"])
    return TrainConfig(**kwargs)


def load_train_config(path) -> TrainConfig:
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise FileFormatError(f"malformed training config {p}: {e}") from e
    try:
        return train_config_from_dict(doc)
    except TypeError as e:
        raise ValueError(f"training config {p}: {e}") from e


def save_train_config(cfg: TrainConfig, path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(train_config_to_dict(cfg), sort_keys=True, indent=2) + "\n")
    return p


# ---------------------------------------------------------------------------
# Dataset assembly.


@dataclass
class Dataset:
    """Loaded cases plus the enumerated, classified patch records over them."""

    cases: dict[str, tuple[Volume, LabelMap, AnnotationSet]]
    geometry: PatchGeometry
    records: list[PatchRecord]

    @property
    def volume_ids(self) -> list[str]:
        return sorted(self.cases)

    def background_records(self, volume_id: str) -> list[PatchRecord]:
        return [r for r in self.records if not r.is_nodule and r.index.volume_id == volume_id]

    @property
    def n_positive(self) -> int:
        return sum(1 for r in self.records if r.is_nodule)


def dataset_from_cases(cases: dict, geometry: PatchGeometry) -> Dataset:
    records = []
    for vid in sorted(cases):
        vol, labels, _ = cases[vid]
        require_same_grid(vol, labels, f"case {vid!r} image and labels")
        for p in enumerate_patches(vol.dims, geometry, vid):
            records.append(PatchRecord(index=p, is_nodule=classify_patch(p, labels, geometry)))
    return Dataset(cases=dict(cases), geometry=geometry, records=records)


def synthetic_dataset(spec: SyntheticSpec, n_volumes: int, base_seed: int,
                      geometry: PatchGeometry, id_prefix: str = "case") -> Dataset:
    if n_volumes < 1:
        raise ValueError(f"n_volumes must be >= 1, got {n_volumes}")
    cases = {}
    for i in range(n_volumes):
        vid = f"{id_prefix}{i:03d}"
        cases[vid] = synthesize_case(spec, base_seed + i)
    return dataset_from_cases(cases, geometry)


def labels_for_case(volume: Volume, annotations: AnnotationSet) -> LabelMap:
    """Weak-label fallback: union of rasterized spheres from point+radius annotations."""
    values = np.zeros(volume.dims, dtype=np.uint8)
    for ann in annotations:
        values |= rasterize_sphere(volume, ann.center_mm, ann.radius_mm).values
    return LabelMap(values, volume.spacing_mm, volume.origin_mm)


def discover_cases(data_dir) -> list[str]:
    d = Path(data_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory {d} does not exist")
    return sorted(p.name[: -len("_ann.json")] for p in d.glob("*_ann.json"))


def load_dataset_dir(data_dir, geometry: PatchGeometry) -> Dataset:
    """Load every case under data_dir: <id>.json/.raw image, <id>_ann.json
    annotations, and <id>_labels.json/.raw when present (else spheres)."""
    d = Path(data_dir)
    ids = discover_cases(d)
    if not ids:
        raise FileNotFoundError(f"no cases (*_ann.json) found under {d}")
    cases = {}
    for vid in ids:
        vol = load_volume(d / f"{vid}.json")
        anns = load_annotations(d / f"{vid}_ann.json")
        label_path = d / f"{vid}_labels.json"
        if label_path.exists():
            labels = load_labelmap(label_path)
        else:
            labels = labels_for_case(vol, anns)
        cases[vid] = (vol, labels, anns)
    return dataset_from_cases(cases, geometry)


def build_dataset(cfg: TrainConfig) -> Dataset:
    geometry = cfg.geometry
    if cfg.data_dir is not None and cfg.synthetic is not None:
        raise ValueError("config sets both data_dir and synthetic; pick one")
    if cfg.data_dir is not None:
        return load_dataset_dir(cfg.data_dir, geometry)
    if cfg.synthetic is not None:
        return synthetic_dataset(cfg.synthetic, cfg.n_volumes, cfg.data_seed, geometry)
    raise ValueError("config provides no data: set data_dir or synthetic")


# ---------------------------------------------------------------------------
# Whole-volume prediction.


def _axis_tiles(dim: int, stride: int) -> list[tuple[int, int, int]]:
    """(corner, owned_lo, owned_hi) per tile; shifted final tiles own only the remainder."""
    tiles = [(c, c, c + stride) for c in range(0, dim - stride + 1, stride)]
    rem = dim % stride
    if rem:
        tiles.append((dim - stride, dim - rem, dim))
    return tiles


def predict_volume(weights: Weights, cfg: FcnConfig, volume: Volume,
                   output_stride: int = 8) -> Volume:
    """Voxel probabilities over a whole volume, on the volume's own grid.

    Output regions tile the grid; boundary remainders are covered by shifted
    final tiles that own only the remainder voxels, so every voxel is written
    exactly once whatever the traversal order. The flat architecture runs as a
    single pass over the mirror-padded volume, which equals the stitched tiles
    by translation covariance of valid convolutions.
    """
    geom = cfg.geometry(output_stride)
    if min(volume.dims) < output_stride:
        raise ValueError(f"volume dims {volume.dims} smaller than output_stride {output_stride}")
    if cfg.kind == "flat":
        half = cfg.context_margin // 2
        axes = [reflect_indices(-half, d + half, d) for d in volume.dims]
        padded = volume.values[np.ix_(*axes)]
        prob, _ = forward(weights, cfg, padded, need_cache=False)
        return Volume(prob.astype(np.float32), volume.spacing_mm, volume.origin_mm)
    out = np.empty(volume.dims, dtype=np.float32)
    tiles = [_axis_tiles(d, output_stride) for d in volume.dims]
    for cx, ox_lo, ox_hi in tiles[0]:
        for cy, oy_lo, oy_hi in tiles[1]:
            for cz, oz_lo, oz_hi in tiles[2]:
                p = PatchIndex("", (cx, cy, cz))
                block = extract_input(volume, p, geom)
                prob, _ = forward(weights, cfg, block, need_cache=False)
                out[ox_lo:ox_hi, oy_lo:oy_hi, oz_lo:oz_hi] = prob[
                    ox_lo - cx : ox_hi - cx, oy_lo - cy : oy_hi - cy, oz_lo - cz : oz_hi - cz
                ]
    return Volume(out, volume.spacing_mm, volume.origin_mm)


# ---------------------------------------------------------------------------
# Adaptive mining.


def mining_pass(weights: Weights, cfg: FcnConfig, dataset: Dataset, volume_ids,
                fp_threshold: float, output_stride: int):
    """Scan covered volumes with a weight snapshot; flag background patches whose
    output region holds any predicted-positive unlabeled voxel. Returns
    (patch, has_fp, loss) triples for every covered background patch."""
    results = []
    s = output_stride
    for vid in volume_ids:
        vol, labels, _ = dataset.cases[vid]
        prob = predict_volume(weights, cfg, vol, s)
        pv, lv = prob.values, labels.values
        for rec in dataset.background_records(vid):
            i, j, k = rec.index.corner
            region = (slice(i, i + s), slice(j, j + s), slice(k, k + s))
            p_region = pv[region]
            has_fp = bool(((p_region > fp_threshold) & (lv[region] == 0)).any())
            loss, _ = bce_loss(p_region, lv[region])
            results.append((rec.index, has_fp, loss))
    return results


def _covered_ids(ids: list[str], coverage: float, pass_number: int) -> list[str]:
    k = max(1, int(round(coverage * len(ids))))
    start = (pass_number * k) % len(ids)
    return [ids[(start + i) % len(ids)] for i in range(min(k, len(ids)))]


# ---------------------------------------------------------------------------
# Training.


@dataclass
class TrainResult:
    weights: Weights
    config: TrainConfig
    iterations_run: int
    metrics: list[dict]
    checkpoint_stem: str | None
    metrics_path: str | None
    final_fp_set_size: int


def _derived_seeds(seed: int) -> tuple[int, int]:
    ss = np.random.SeedSequence(seed)
    a, b = ss.generate_state(2)
    return int(a), int(b)


def save_training_checkpoint(stem, weights: Weights, cfg: TrainConfig,
                             state: SamplerState, iteration: int) -> str:
    stem = str(stem)
    hyper = {"lr": cfg.lr, "momentum": cfg.momentum, "batch_size": cfg.batch_size,
             "output_stride": cfg.output_stride}
    save_checkpoint(f"{stem}.model", weights, cfg.model, hyper, iteration)
    save_sampler_state(state, f"{stem}.sampler.json")
    return stem


def train(cfg: TrainConfig, dataset: Dataset | None = None,
          resume_from: str | None = None) -> TrainResult:
    """Run the training loop. Returns the final weights and per-iteration metrics.

    Metrics records are {iter, loss, f_n, fp_set_size, wall_ms}, one JSON line
    per iteration when cfg.metrics_path is set. resume_from names a checkpoint
    stem written by a previous run with the same config and dataset.
    """
    if dataset is None:
        dataset = build_dataset(cfg)
    require_geometry_match(cfg.model, dataset.geometry)
    if dataset.n_positive == 0:
        raise NoPositivePatchesError(
            "no positive patches in the dataset; training would never see a nodule"
        )
    init_seed, sampler_seed = _derived_seeds(cfg.seed)

    if resume_from is not None:
        weights, mcfg, _, start_iter = load_checkpoint(f"{resume_from}.model")
        if mcfg != cfg.model:
            raise ValueError(
                f"checkpoint architecture {mcfg} does not match the config's {cfg.model}"
            )
        fresh = [PatchRecord(index=r.index, is_nodule=r.is_nodule) for r in dataset.records]
        state = load_sampler_state(f"{resume_from}.sampler.json", fresh)
        if state.iteration != start_iter:
            raise FileFormatError(
                f"checkpoint iteration mismatch: model at {start_iter}, sampler at {state.iteration}"
            )
    else:
        weights = initialize_weights(cfg.model, init_seed)
        state = SamplerState(dataset.records, cfg.schedule, cfg.weighting, seed=sampler_seed)
        start_iter = 0

    metrics: list[dict] = []
    fh = None
    if cfg.metrics_path:
        path = Path(cfg.metrics_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fh = open(path, "w")
    executor = None
    pending = None
    if not cfg.deterministic and cfg.mine_enabled:
        executor = ThreadPoolExecutor(max_workers=1)

    try:
        for it in range(start_iter, cfg.iterations):
            if pending is not None and pending.done():
                record_mining_results(state, pending.result())
                pending = None
            if cfg.mine_enabled and it > 0 and it % cfg.mine_every == 0:
                snap = snapshot(weights)
                covered = _covered_ids(
                    dataset.volume_ids, cfg.mine_coverage, it // cfg.mine_every - 1
                )
                if executor is None:
                    record_mining_results(
                        state,
                        mining_pass(snap, cfg.model, dataset, covered,
                                    cfg.fp_threshold, cfg.output_stride),
                    )
                else:
                    if pending is not None:
                        record_mining_results(state, pending.result())
                    pending = executor.submit(
                        mining_pass, snap, cfg.model, dataset, covered,
                        cfg.fp_threshold, cfg.output_stride,
                    )
            t0 = time.perf_counter()
            f_n = mixing_coefficient(cfg.schedule, it)
            batch = sample_batch(state, cfg.batch_size)
            inputs = np.stack(
                [extract_input(dataset.cases[p.volume_id][0], p, dataset.geometry) for p in batch]
            )
            targets = np.stack(
                [extract_target(dataset.cases[p.volume_id][1], p, dataset.geometry) for p in batch]
            )
            pred, cache = forward(weights, cfg.model, inputs)
            loss, dpred = bce_loss(pred, targets)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"training loss is not finite at iteration {it}")
            grads = backward(cache, dpred)
            sgd_nesterov_step(weights, grads, cfg.lr, cfg.momentum)
            advance(state)
            wall = 0.0 if cfg.deterministic else (time.perf_counter() - t0) * 1000.0
            rec = {
                "iter": it,
                "loss": loss,
                "f_n": f_n,
                "fp_set_size": state.fp_set_size(),
                "wall_ms": wall,
            }
            metrics.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec) + "\n")
            if (
                cfg.checkpoint_stem
                and cfg.checkpoint_every
                and (it + 1) % cfg.checkpoint_every == 0
            ):
                save_training_checkpoint(cfg.checkpoint_stem, weights, cfg, state, it + 1)
    finally:
        if fh is not None:
            fh.close()
        if executor is not None:
            executor.shutdown(wait=False, cancel_futures=True)

    if cfg.checkpoint_stem:
        save_training_checkpoint(cfg.checkpoint_stem, weights, cfg, state, cfg.iterations)
    return TrainResult(
        weights=weights,
        config=cfg,
        iterations_run=cfg.iterations - start_iter,
        metrics=metrics,
        checkpoint_stem=cfg.checkpoint_stem,
        metrics_path=cfg.metrics_path,
        final_fp_set_size=state.fp_set_size(),
    )


# ---------------------------------------------------------------------------
# Strategy comparison.


@dataclass
class CompareConfig:
    """A strategy bake-off: identical data, budgets, and seeds per strategy."""

    train: TrainConfig
    strategies: tuple[str, ...] = ("cased", "uniform", "nodule_only")
    seeds: tuple[int, ...] = (0,)
    heldout_n: int = 10
    heldout_seed: int = 770000
    threshold: float = 0.5
    connectivity: int = 26

    def __post_init__(self):
        object.__setattr__(self, "strategies", tuple(self.strategies))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ValueError(f"unknown strategy {s!r}; choose from {STRATEGIES}")
        if self.heldout_n < 1:
            raise ValueError("heldout_n must be >= 1")


def compare_config_from_dict(d: dict) -> CompareConfig:
    kwargs = dict(d)
    kwargs["train"] = train_config_from_dict(kwargs["train"])
    return CompareConfig(**kwargs)


def load_compare_config(path) -> CompareConfig:
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise FileFormatError(f"malformed comparison config {p}: {e}") from e
    try:
        return compare_config_from_dict(doc)
    except (TypeError, KeyError) as e:
        raise ValueError(f"comparison config {p}: {e}") from e


def strategy_config(base: TrainConfig, strategy: str) -> TrainConfig:
    """Derive the per-strategy sampling configuration from the shared base.

    cased           : base curriculum + adaptive weighting, mining on.
    uniform         : every patch equally likely from the start, no mining.
    nodule_only     : positive patches only, no mining.
    curriculum_no_hnm: base curriculum, background always uniform, no mining.
    """
    if strategy == "cased":
        return base
    if strategy == "uniform":
        return replace(
            base,
            schedule=CurriculumSchedule(kind="constant", value=0.0),
            weighting=AdaptiveWeighting(beta_fixed=1.0),
            mine_enabled=False,
        )
    if strategy == "nodule_only":
        return replace(
            base,
            schedule=CurriculumSchedule(kind="constant", value=1.0),
            weighting=AdaptiveWeighting(beta_fixed=1.0),
            mine_enabled=False,
        )
    if strategy == "curriculum_no_hnm":
        return replace(base, weighting=AdaptiveWeighting(beta_fixed=1.0), mine_enabled=False)
    raise ValueError(f"unknown strategy {strategy!r}")


def evaluate_on_cases(weights: Weights, model_cfg: FcnConfig, cases: dict,
                      output_stride: int, threshold: float, connectivity: int):
    """Predict, detect, and score a case set. Returns (FrocResult, raw fp/scan)."""
    results = []
    raw_fp = 0
    for vid in sorted(cases):
        vol, _, anns = cases[vid]
        prob = predict_volume(weights, model_cfg, vol, output_stride)
        cands = detect(prob, threshold, connectivity)
        refs = reference_from_annotations(anns)
        scan = ScanResult(
            scan_id=vid,
            nodules=refs,
            candidates=[(c.position_mm, c.confidence) for c in cands],
        )
        results.append(scan)
    froc = froc_curve(results)
    for scan in results:
        m = match_candidates(scan)
        raw_fp += len(m.fp_confidences)
    return froc, raw_fp / max(len(results), 1)


def compare_samplers(ccfg: CompareConfig, strategies=None, out_dir=None) -> dict:
    """Train one model per (strategy, seed) on identical data and score held-out volumes.

    Returns a JSON-ready report with per-seed operating points, full curves,
    raw fp/scan at the detection threshold, and per-strategy medians. With
    out_dir set, each run's FROC curve lands in froc_<strategy>_seed<k>.csv.
    """
    strategies = tuple(strategies) if strategies else ccfg.strategies
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    base = ccfg.train
    if base.synthetic is None:
        raise ValueError("compare_samplers needs a synthetic data config for held-out volumes")
    heldout = {}
    for i in range(ccfg.heldout_n):
        vid = f"heldout{i:03d}"
        heldout[vid] = synthesize_case(base.synthetic, ccfg.heldout_seed + i)

    report = {
        "rates": list(TARGET_FP_RATES),
        "n_heldout": ccfg.heldout_n,
        "threshold": ccfg.threshold,
        "seeds": list(ccfg.seeds),
        "strategies": {},
    }
    for strategy in strategies:
        per_seed = []
        for seed in ccfg.seeds:
            cfg = replace(
                strategy_config(base, strategy),
                seed=seed,
                checkpoint_stem=None,
                metrics_path=None,
            )
            dataset = build_dataset(cfg)
            result = train(cfg, dataset=dataset)
            froc, raw_fp = evaluate_on_cases(
                result.weights, cfg.model, heldout, cfg.output_stride,
                ccfg.threshold, ccfg.connectivity,
            )
            if out_dir is not None:
                write_froc_csv(out_dir / f"froc_{strategy}_seed{seed}.csv", froc)
            logger.info(
                "compare: strategy=%s seed=%d cpm=%.4f raw_fp_per_scan=%.2f",
                strategy, seed, froc.cpm, raw_fp,
            )
            per_seed.append(
                {
                    "seed": seed,
                    "cpm": froc.cpm,
                    "sensitivities": list(froc.sensitivities),
                    "raw_fp_per_scan": raw_fp,
                    "curve_fp_per_scan": [float(v) for v in froc.curve_fp_per_scan],
                    "curve_sensitivity": [float(v) for v in froc.curve_sensitivity],
                }
            )
        cpms = [r["cpm"] for r in per_seed]
        fps = [r["raw_fp_per_scan"] for r in per_seed]
        report["strategies"][strategy] = {
            "per_seed": per_seed,
            "median_cpm": float(np.median(cpms)),
            "median_raw_fp_per_scan": float(np.median(fps)),
        }
    return report


def standard_benchmark_config(seeds=(0, 1, 2, 3, 4)) -> CompareConfig:
    """The synthetic desk-scale benchmark: 20 training volumes and 10 held-out
    volumes of 64^3 at 1.25 mm with under 1% positive voxels, 3000 iterations
    per run. Cases carry unlabeled distractor spheres, so specificity has to be
    learned from background exposure rather than falling out of the contrast.
    The small flat architecture and half-lives keep the full three-strategy
    sweep within a CPU-half-hour."""
    spec = SyntheticSpec(distractor_count=(3, 6))
    train_cfg = TrainConfig(
        iterations=3000,
        batch_size=16,
        lr=0.05,
        momentum=0.9,
        output_stride=8,
        model=FcnConfig(kind="flat", channels=(4, 4), activation="tanh"),
        schedule=CurriculumSchedule(kind="exponential", rate=500.0, floor=0.2),
        weighting=AdaptiveWeighting(beta_half_life=500.0),
        mine_every=200,
        mine_coverage=1.0,
        synthetic=spec,
        n_volumes=20,
        data_seed=41000,
    )
    return CompareConfig(
        train=train_cfg,
        strategies=("cased", "uniform", "nodule_only"),
        seeds=tuple(seeds),
        heldout_n=10,
        heldout_seed=77000,
    )
