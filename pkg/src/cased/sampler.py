"""Curriculum-adaptive patch sampling for extremely class-imbalanced volumes.

Each draw is two-stage: with probability equal to the curriculum's mixing
coefficient the patch comes uniformly from the positive set, otherwise from the
background distribution over all patches, which blends hard-negative emphasis
(uniform over FP-flagged patches) against uniform coverage. The marginal
distribution over patches is

    p(x_i) = f_r(x_i) * (1 - f_n) + [x_i positive] / n_pos * f_n

which sums to one by construction. The mixing coefficient starts at 1 (pure
positives) and decays toward 0; the background blend moves toward uniform, so
the sampler converges to uniform coverage of the volume set.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FileFormatError, NoPositivePatchesError
from .patching import PatchIndex

SCHEDULE_KINDS = ("exponential", "inverse", "constant")


@dataclass(frozen=True)
class CurriculumSchedule:
    """Mixing-coefficient schedule over mini-batch iterations.

    exponential: floor + (1-floor) * 2**(-iteration/rate)   (rate is the half-life)
    inverse:     floor + (1-floor) / (1 + iteration/rate)
    constant:    value  (ablation schedules; exempt from the start-at-1 rule)

    Both decaying kinds start at exactly 1.0 and tend to floor (default 0).
    """

    kind: str = "exponential"
    rate: float = 2000.0
    floor: float = 0.0
    value: float | None = None

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "constant":
            if self.value is None or not 0.0 <= float(self.value) <= 1.0:
                raise ValueError(f"constant schedule needs value in [0, 1], got {self.value}")
            return
        if not np.isfinite(self.rate) or self.rate <= 0:
            raise ValueError(f"schedule rate must be positive, got {self.rate}")
        if not 0.0 <= self.floor < 1.0:
            raise ValueError(f"schedule floor must lie in [0, 1), got {self.floor}")


def mixing_coefficient(schedule: CurriculumSchedule, iteration: int) -> float:
    """Probability that a draw comes from the positive set at this iteration."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    if schedule.kind == "constant":
        return float(schedule.value)
    if schedule.kind == "exponential":
        decay = 2.0 ** (-iteration / schedule.rate)
    else:
        decay = 1.0 / (1.0 + iteration / schedule.rate)
    return schedule.floor + (1.0 - schedule.floor) * decay


@dataclass(frozen=True)
class AdaptiveWeighting:
    """Background-distribution blend between hard-negative emphasis and uniform coverage.

    beta(iteration) = 1 - 2**(-iteration/beta_half_life), or beta_fixed when set.
    The hard component puts fp_share of its mass uniformly on FP-flagged patches
    (uniform over everything when the FP set is empty) and the remainder uniformly
    everywhere. Background weight of patch i is (1-beta)*hard_i + beta/M.
    """

    beta_half_life: float = 2000.0
    beta_fixed: float | None = None
    fp_share: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.beta_half_life) or self.beta_half_life <= 0:
            raise ValueError(f"beta_half_life must be positive, got {self.beta_half_life}")
        if self.beta_fixed is not None and not 0.0 <= float(self.beta_fixed) <= 1.0:
            raise ValueError(f"beta_fixed must lie in [0, 1], got {self.beta_fixed}")
        if not 0.0 <= self.fp_share <= 1.0:
            raise ValueError(f"fp_share must lie in [0, 1], got {self.fp_share}")

    def beta(self, iteration: int) -> float:
        if iteration < 0:
            raise ValueError(f"iteration must be >= 0, got {iteration}")
        if self.beta_fixed is not None:
            return float(self.beta_fixed)
        return 1.0 - 2.0 ** (-iteration / self.beta_half_life)


@dataclass
class PatchRecord:
    """Sampler-side bookkeeping for one patch."""

    index: PatchIndex
    is_nodule: bool
    fp_flag: bool = False
    last_loss: float | None = None
    last_eval_iteration: int | None = None


class SamplerState:
    """All mutable sampling state: records, iteration counter, and the RNG.

    Batch draws and mining updates are serialized by an internal lock, so a
    concurrent mining producer never leaves a batch observing a half-applied
    update. Single-threaded use pays only an uncontended lock.
    """

    def __init__(
        self,
        records: list[PatchRecord],
        schedule: CurriculumSchedule,
        weighting: AdaptiveWeighting,
        seed: int = 0,
    ):
        if not records:
            raise ValueError("sampler needs at least one patch record")
        self.records = list(records)
        self.schedule = schedule
        self.weighting = weighting
        self.seed = int(seed)
        self.iteration = 0
        self.rng = np.random.default_rng(self.seed)
        self._lock = threading.Lock()
        self._position = {}
        for pos, rec in enumerate(self.records):
            if rec.index in self._position:
                raise ValueError(f"duplicate patch index {rec.index}")
            self._position[rec.index] = pos
        self._nodule_positions = np.array(
            [pos for pos, rec in enumerate(self.records) if rec.is_nodule], dtype=np.intp
        )

    def __len__(self):
        return len(self.records)

    @property
    def nodule_count(self) -> int:
        return int(self._nodule_positions.size)

    def fp_set_size(self) -> int:
        with self._lock:
            return sum(1 for rec in self.records if rec.fp_flag)


def _background_weights_locked(state: SamplerState) -> np.ndarray:
    m = len(state.records)
    beta = state.weighting.beta(state.iteration)
    fp = np.fromiter((rec.fp_flag for rec in state.records), dtype=bool, count=m)
    n_fp = int(fp.sum())
    hard = np.full(m, 1.0 / m)
    if n_fp:
        share = state.weighting.fp_share
        hard = np.full(m, (1.0 - share) / m)
        hard[fp] += share / n_fp
    return (1.0 - beta) * hard + beta / m


def background_weights(state: SamplerState) -> np.ndarray:
    """The background distribution over all patches at the current iteration. Sums to 1."""
    with state._lock:
        return _background_weights_locked(state)


def patch_distribution(state: SamplerState) -> np.ndarray:
    """Marginal draw distribution over all patches at the current iteration.

    Raises NoPositivePatchesError when the mixing coefficient is positive but
    the dataset has no positive patches.
    """
    with state._lock:
        f_n = mixing_coefficient(state.schedule, state.iteration)
        if f_n > 0 and state.nodule_count == 0:
            raise NoPositivePatchesError(
                "dataset contains no positive patches but the curriculum requests them"
            )
        p = _background_weights_locked(state) * (1.0 - f_n)
        if f_n > 0:
            p[state._nodule_positions] += f_n / state.nodule_count
        return p


def sample_batch(state: SamplerState, batch_size: int) -> list[PatchIndex]:
    """Draw batch_size patches i.i.d. from the current distribution.

    Two-stage per draw: Bernoulli(mixing coefficient) picks the positive set
    (uniform) versus the background distribution. Does not advance the
    iteration counter; fixed seed and state give an identical batch sequence.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    with state._lock:
        f_n = mixing_coefficient(state.schedule, state.iteration)
        if f_n > 0 and state.nodule_count == 0:
            raise NoPositivePatchesError(
                "dataset contains no positive patches but the curriculum requests them"
            )
        cum = np.cumsum(_background_weights_locked(state))
        nodules = state._nodule_positions
        out = []
        for _ in range(batch_size):
            if state.rng.random() < f_n:
                pos = int(nodules[state.rng.integers(nodules.size)])
            else:
                pos = int(np.searchsorted(cum, state.rng.random(), side="right"))
                pos = min(pos, len(state.records) - 1)
            out.append(state.records[pos].index)
        return out


def record_mining_results(
    state: SamplerState, results: list[tuple[PatchIndex, bool, float]]
) -> None:
    """Apply one mining pass atomically: (patch, has_false_positive, loss) triples.

    Unknown indices reject the whole batch. FP flags only ever land on
    background patches; a positive patch in the results keeps its flag clear
    but still records the loss. Unreported patches are untouched.
    """
    with state._lock:
        positions = []
        for idx, has_fp, loss in results:
            pos = state._position.get(idx)
            if pos is None:
                raise KeyError(f"unknown patch index {idx}")
            positions.append((pos, bool(has_fp), float(loss)))
        for pos, has_fp, loss in positions:
            rec = state.records[pos]
            rec.fp_flag = has_fp and not rec.is_nodule
            rec.last_loss = loss
            rec.last_eval_iteration = state.iteration


def advance(state: SamplerState) -> int:
    """Advance the curriculum by one mini-batch. Returns the new iteration."""
    with state._lock:
        state.iteration += 1
        return state.iteration


def save_sampler_state(state: SamplerState, path) -> Path:
    """Checkpoint to JSON: iteration, schedule/weighting parameters, seed, RNG state, FP set."""
    with state._lock:
        doc = {
            "iteration": state.iteration,
            "seed": state.seed,
            "schedule": {
                "kind": state.schedule.kind,
                "rate": state.schedule.rate,
                "floor": state.schedule.floor,
                "value": state.schedule.value,
            },
            "weighting": {
                "beta_half_life": state.weighting.beta_half_life,
                "beta_fixed": state.weighting.beta_fixed,
                "fp_share": state.weighting.fp_share,
            },
            "rng_state": state.rng.bit_generator.state,
            "fp_flags": [
                {"volume_id": rec.index.volume_id, "corner": list(rec.index.corner)}
                for rec in state.records
                if rec.fp_flag
            ],
        }
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(doc, sort_keys=True) + "\n")
    return p


def load_sampler_state(path, records: list[PatchRecord]) -> SamplerState:
    """Rebuild a SamplerState over freshly enumerated records from a checkpoint."""
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise FileFormatError(f"malformed sampler checkpoint {p}: {e}") from e
    try:
        schedule = CurriculumSchedule(**doc["schedule"])
        weighting = AdaptiveWeighting(**doc["weighting"])
        state = SamplerState(records, schedule, weighting, seed=doc["seed"])
        state.iteration = int(doc["iteration"])
        state.rng.bit_generator.state = doc["rng_state"]
        flagged = [
            PatchIndex(f["volume_id"], tuple(f["corner"])) for f in doc["fp_flags"]
        ]
    except (KeyError, TypeError) as e:
        raise FileFormatError(f"sampler checkpoint {p} missing fields: {e}") from e
    for idx in flagged:
        pos = state._position.get(idx)
        if pos is None:
            raise FileFormatError(f"sampler checkpoint {p} flags unknown patch {idx}")
        if not state.records[pos].is_nodule:
            state.records[pos].fp_flag = True
    return state
