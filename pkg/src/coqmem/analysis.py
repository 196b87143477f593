"""Training diagnostics: feature drift, codeword-diversity degeneration, ablations.

Drift between two parameter snapshots is the mean squared L2 change of a
probe set's representation. Three representations are tracked: the raw
embedding, the soft reconstruction, and the hard (argmax) reconstruction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .dataio import FeatureDataset
from .errors import DataError
from .quantizer import Codebooks, QuantizerConfig, omega_c, quantize_hard, quantize_soft, reconstruct_hard
from .retrieval import evaluate
from .trainer import EmbeddingLayer, TrainConfig, Trainer, embed

DRIFT_MODES = ("original", "soft_quantized", "hard_quantized")


@dataclass
class DriftProbe:
    probe_set: np.ndarray
    interval: int = 100
    modes: Sequence[str] = DRIFT_MODES

    def __post_init__(self):
        self.probe_set = np.atleast_2d(np.asarray(self.probe_set, dtype=np.float64))
        if self.probe_set.shape[0] == 0:
            raise DataError("empty probe set")
        if self.interval < 1:
            raise DataError("interval must be >= 1")
        bad = set(self.modes) - set(DRIFT_MODES)
        if bad:
            raise DataError(f"unknown drift modes {sorted(bad)}")


def representation(x, layer: EmbeddingLayer, books: Codebooks, mode: str, alpha: float = 10.0):
    z = embed(layer, x)
    if mode == "original":
        return z
    if mode == "soft_quantized":
        return quantize_soft(z, books, QuantizerConfig(alpha))[1]
    if mode == "hard_quantized":
        return reconstruct_hard(quantize_hard(z, books), books)
    raise DataError(f"unknown drift mode {mode!r}")


def measure_drift(probe: DriftProbe, params_t, params_prev, mode: str = "original",
                  alpha: float = 10.0) -> float:
    """Mean squared distance between representations under two snapshots.

    ``params_t`` and ``params_prev`` are ``(layer, books)`` pairs.
    """
    a = representation(probe.probe_set, *params_t, mode, alpha)
    b = representation(probe.probe_set, *params_prev, mode, alpha)
    return float(((a - b) ** 2).sum(axis=1).mean())


class SnapshotRecorder:
    """Trainer callback that copies the parameters every ``interval`` iterations."""

    def __init__(self, interval: int):
        self.interval = interval
        self.snapshots: list[tuple[int, EmbeddingLayer, Codebooks]] = []

    def capture(self, trainer: Trainer) -> None:
        self.snapshots.append((trainer.iteration, trainer.layer.copy(), trainer.books.copy()))

    def on_step(self, trainer: Trainer, record: dict) -> None:
        if trainer.iteration % self.interval == 0:
            self.capture(trainer)


@dataclass
class DriftResult:
    rows: list  # (iteration, mode, drift)
    warmup_iteration: int
    soft_below_original: float
    hard_above_soft: float
    intervals: int

    def trajectory(self, mode: str) -> tuple[np.ndarray, np.ndarray]:
        its = np.array([r[0] for r in self.rows if r[1] == mode])
        vals = np.array([r[2] for r in self.rows if r[1] == mode])
        return its, vals

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "mode", "drift"])
            for it, mode, drift in self.rows:
                w.writerow([it, mode, repr(drift)])


def drift_from_snapshots(snapshots, probe: DriftProbe, alpha: float,
                         warmup_iteration: int = 0) -> DriftResult:
    if len(snapshots) < 2:
        raise DataError("need at least two snapshots to measure drift")
    rows = []
    per_mode = {m: [] for m in DRIFT_MODES}
    starts = []
    for (_, l0, b0), (t1, l1, b1) in zip(snapshots, snapshots[1:]):
        starts.append(t1 - probe.interval)
        for mode in DRIFT_MODES:
            v = measure_drift(probe, (l1, b1), (l0, b0), mode, alpha)
            per_mode[mode].append(v)
            rows.append((t1, mode, v))
    post = np.array(starts) >= warmup_iteration
    orig = np.array(per_mode["original"])[post]
    soft = np.array(per_mode["soft_quantized"])[post]
    hard = np.array(per_mode["hard_quantized"])[post]
    n = int(post.sum())
    frac = (lambda mask: float(mask.mean()) if n else float("nan"))
    return DriftResult(rows, warmup_iteration, frac(soft < orig), frac(hard > soft), n)


def drift_comparison(dataset: FeatureDataset, cfg: TrainConfig, probe: DriftProbe,
                     sinks=()) -> DriftResult:
    """Train with ``cfg`` while recording drift of all three representations.

    Intervals that start before the memory warm-up epoch are excluded from
    the summary fractions (but kept in ``rows``).
    """
    trainer = Trainer(cfg, dataset.dim)
    rec = SnapshotRecorder(probe.interval)
    rec.capture(trainer)
    trainer.fit(dataset, sinks=sinks, callbacks=[rec])
    warmup = cfg.memory_start_epoch * trainer.iterations_per_epoch(dataset.count)
    return drift_from_snapshots(rec.snapshots, probe, cfg.alpha, warmup)


# ---------------------------------------------------------------- degeneration / ablations


class EpochEvaluator:
    """Callback recording omega_c and validation MAP after every epoch."""

    def __init__(self, query: FeatureDataset, database: FeatureDataset, n: int,
                 convention: str = "standard"):
        self.query, self.database, self.n, self.convention = query, database, n, convention
        self.rows: list[dict] = []

    def record(self, trainer: Trainer) -> None:
        self.rows.append({
            "epoch": trainer.epoch,
            "omega_c": omega_c(trainer.books),
            "map": evaluate(trainer.layer, trainer.books, self.query, self.database,
                            self.n, self.convention),
        })

    def on_epoch_end(self, trainer: Trainer) -> None:
        self.record(trainer)


@dataclass
class RunSummary:
    name: str
    cfg: TrainConfig
    trajectory: list = field(default_factory=list)

    @property
    def initial_omega(self) -> float:
        return self.trajectory[0]["omega_c"]

    @property
    def final_omega(self) -> float:
        return self.trajectory[-1]["omega_c"]

    @property
    def final_map(self) -> float:
        return self.trajectory[-1]["map"]


def run_with_trajectory(name: str, train: FeatureDataset, query: FeatureDataset,
                        database: FeatureDataset, cfg: TrainConfig, n: int = 100,
                        convention: str = "standard", sinks=()) -> RunSummary:
    trainer = Trainer(cfg, train.dim)
    ev = EpochEvaluator(query, database, n, convention)
    ev.record(trainer)
    trainer.fit(train, sinks=sinks, callbacks=[ev])
    return RunSummary(name, cfg, ev.rows)


@dataclass
class DegenerationResult:
    baseline: RunSummary
    sweep: list
    best: RunSummary

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["gamma", "epoch", "omega_c", "map"])
            for run in [self.baseline, *self.sweep]:
                for row in run.trajectory:
                    w.writerow([run.cfg.gamma, row["epoch"], repr(row["omega_c"]), repr(row["map"])])


def pick_best(runs: Sequence[RunSummary]) -> RunSummary:
    """Highest final MAP; ties go to the lower final omega_c."""
    return max(runs, key=lambda r: (r.final_map, -r.final_omega))


def degeneration_experiment(train: FeatureDataset, query: FeatureDataset,
                            database: FeatureDataset, cfg: TrainConfig,
                            gammas: Iterable[float] = (1e-3, 1e-2, 1e-1), n: int = 100,
                            convention: str = "standard") -> DegenerationResult:
    """Compare gamma = 0 against a sweep of positive gammas, all else equal."""
    base = run_with_trajectory("gamma=0", train, query, database, cfg.replace(gamma=0.0),
                               n, convention)
    sweep = [run_with_trajectory(f"gamma={g:g}", train, query, database, cfg.replace(gamma=g),
                                 n, convention) for g in gammas]
    return DegenerationResult(base, sweep, pick_best(sweep))


def ablation_variants(cfg: TrainConfig) -> dict:
    """Component-analysis variants of a full memory-mode configuration."""
    full = cfg.replace(loss_mode="memory", feature_memory=False, hard_code_memory=False)
    return {
        "full": full,
        "wo_debiasing": full.replace(rho_pos=0.0),
        "wo_omega": full.replace(gamma=0.0),
        "wo_memory": full.replace(loss_mode="debiased"),
        "feature_memory": full.replace(feature_memory=True),
        "hard_code_memory": full.replace(hard_code_memory=True),
        "wo_delay": full.replace(memory_start_epoch=0),
    }


def run_ablation(train: FeatureDataset, query: FeatureDataset, database: FeatureDataset,
                 variants: dict, n: int = 100, convention: str = "standard",
                 names: Optional[Sequence[str]] = None) -> dict:
    names = list(variants) if names is None else list(names)
    return {name: run_with_trajectory(name, train, query, database, variants[name], n, convention)
            for name in names}
