"""Training loop for the embedding layer and codebooks.

The objective per step is::

    mean contrastive loss over the 2N augmented rows
      + beta * (||W||^2 + ||b||^2)
      + gamma * omega_c(codebooks)

where the contrastive term is vanilla, debiased, or debiased with code
memory negatives depending on ``TrainConfig.loss_mode`` and on whether the
memory has passed its warm-up epoch. Gradients are computed analytically
and applied with Adam under a cosine learning-rate decay.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import dataio
from .contrastive import ContrastiveBatch, LossReport, debiased_cl_loss, memory_cl_loss, vanilla_cl_loss
from .dataio import AugmentationConfig, FeatureDataset, make_views
from .errors import ConfigError, DataError, DivergenceError
from .memory import CodeMemory
from .quantizer import (
    Codebooks,
    QuantizerConfig,
    omega_c,
    one_hot,
    quantize_soft,
    quantizer_backward,
    reconstruct_soft,
    reconstruct_soft_backward,
)

log = logging.getLogger(__name__)

LOSS_MODES = ("vanilla", "debiased", "memory")
LR_SCHEDULES = ("cosine", "constant")


@dataclass
class EmbeddingLayer:
    """Affine map ``z = W x + bias`` from input space to the D-dim embedding."""

    W: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.W = np.array(self.W, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64)
        if self.W.ndim != 2 or self.bias.shape != (self.W.shape[0],):
            raise ConfigError(f"bad layer shapes W{self.W.shape} bias{self.bias.shape}")

    @classmethod
    def random(cls, dim_in: int, dim_out: int, rng: np.random.Generator) -> "EmbeddingLayer":
        W = rng.standard_normal((dim_out, dim_in)) / np.sqrt(dim_in)
        return cls(W, np.zeros(dim_out))

    @property
    def dim_in(self) -> int:
        return self.W.shape[1]

    @property
    def dim_out(self) -> int:
        return self.W.shape[0]

    def copy(self) -> "EmbeddingLayer":
        return EmbeddingLayer(self.W.copy(), self.bias.copy())


def embed(layer: EmbeddingLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.dim_in:
        raise DataError(f"input width {x.shape[-1]} != layer input width {layer.dim_in}")
    return x @ layer.W.T + layer.bias


@dataclass
class TrainConfig:
    """Hyper-parameters for one training run.

    ``codebooks`` (M) may be left as ``None`` and is then derived from
    ``bits`` and ``codewords`` (K) via bits = M * log2(K).
    """

    bits: int = 16
    codebooks: Optional[int] = None
    codewords: int = 256
    embed_dim: int = 64
    alpha: float = 10.0
    tau: float = 0.4
    rho_pos: float = 0.1
    beta: float = 1e-5
    gamma: float = 0.1
    batch_size: int = 128
    memory_capacity: int = 384
    memory_start_epoch: int = 5
    epochs: int = 20
    learning_rate: float = 3e-3
    lr_schedule: str = "cosine"
    seed: int = 0
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    loss_mode: str = "memory"
    feature_memory: bool = False
    hard_code_memory: bool = False
    deterministic: bool = True

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig(**self.augmentation)
        K = self.codewords
        if K < 2 or K & (K - 1):
            raise ConfigError(f"codewords must be a power of two >= 2, got {K}")
        per_book = int(round(math.log2(K)))
        if self.codebooks is None:
            if self.bits % per_book:
                raise ConfigError(f"bits={self.bits} is not a multiple of log2(K)={per_book}")
            self.codebooks = self.bits // per_book
        if self.codebooks < 1 or self.codebooks * per_book != self.bits:
            raise ConfigError(
                f"bits={self.bits} inconsistent with M={self.codebooks}, K={K} (bits = M*log2 K)"
            )
        if self.embed_dim % self.codebooks:
            raise ConfigError(f"embed_dim={self.embed_dim} not divisible by M={self.codebooks}")
        for name in ("alpha", "tau", "batch_size"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 so that negatives exist")
        for name in ("beta", "gamma", "epochs", "memory_start_epoch", "memory_capacity",
                     "learning_rate"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0 <= self.rho_pos < 1:
            raise ConfigError(f"rho_pos must be in [0, 1), got {self.rho_pos}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.feature_memory and self.hard_code_memory:
            raise ConfigError("feature_memory and hard_code_memory are mutually exclusive")
        if self.loss_mode == "memory" and self.memory_capacity % self.batch_size:
            raise ConfigError(
                f"memory_capacity={self.memory_capacity} must be a multiple of "
                f"batch_size={self.batch_size}"
            )

    @property
    def sub_dim(self) -> int:
        return self.embed_dim // self.codebooks

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def optimizer_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DataError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def learning_rate_at(cfg: TrainConfig, iteration: int, total: int) -> float:
    if cfg.lr_schedule == "constant" or total <= 1:
        return cfg.learning_rate
    frac = min(iteration / (total - 1), 1.0)
    return cfg.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * frac)))


# ---------------------------------------------------------------- objective


@dataclass
class ObjectiveResult:
    loss: float
    contrastive: float
    grads: dict
    report: LossReport
    soft_codes: np.ndarray
    reconstructions: np.ndarray
    omega: float


def interleave(views_q, views_k) -> np.ndarray:
    """Stack two views so that rows 2i and 2i+1 belong to item i."""
    out = np.empty((2 * views_q.shape[0], views_q.shape[1]))
    out[0::2] = views_q
    out[1::2] = views_k
    return out


def objective(views_q, views_k, layer: EmbeddingLayer, books: Codebooks, cfg: TrainConfig,
              memory_codes=None, memory_features=None) -> ObjectiveResult:
    """Total loss and gradients for one batch of view pairs.

    ``memory_codes`` are cached soft codes, reconstructed through the current
    codebooks (so codebooks receive gradient from them, the codes do not).
    ``memory_features`` are cached reconstructions used as fixed negatives.
    Pass neither to run without memory.
    """
    x = interleave(np.asarray(views_q, float), np.asarray(views_k, float))
    z = embed(layer, x)
    qcfg = QuantizerConfig(cfg.alpha)
    p, z_hat = quantize_soft(z, books, qcfg)

    batch = ContrastiveBatch(z_hat, tau=cfg.tau, rho_pos=cfg.rho_pos)
    mem = None
    if cfg.loss_mode == "vanilla":
        report = vanilla_cl_loss(batch, reduction="mean")
    elif cfg.loss_mode == "debiased" or (memory_codes is None and memory_features is None):
        report = debiased_cl_loss(batch, reduction="mean")
    else:
        if memory_codes is not None:
            mem = reconstruct_soft(memory_codes, books)
        else:
            mem = np.asarray(memory_features, dtype=np.float64)
        report = memory_cl_loss(batch, mem, reduction="mean")

    omega = omega_c(books)
    decay = float((layer.W**2).sum() + (layer.bias**2).sum())
    total = report.loss + cfg.beta * decay + cfg.gamma * omega

    grad_z, grad_books = quantizer_backward(z, books, qcfg, report.grad_embeddings, cfg.gamma)
    if memory_codes is not None and mem is not None:
        grad_books = grad_books + reconstruct_soft_backward(memory_codes, books, report.grad_memory)
    grads = {
        "W": grad_z.T @ x + 2.0 * cfg.beta * layer.W,
        "bias": grad_z.sum(axis=0) + 2.0 * cfg.beta * layer.bias,
        "codebooks": grad_books,
    }
    return ObjectiveResult(total, report.loss, grads, report, p, z_hat, omega)


# ---------------------------------------------------------------- training


class Trainer:
    """Holds the mutable state of one run so it can be checkpointed and resumed."""

    def __init__(self, cfg: TrainConfig, dim_in: int):
        self.cfg = cfg
        self.dim_in = dim_in
        rng = np.random.default_rng(cfg.seed)
        self.layer = EmbeddingLayer.random(dim_in, cfg.embed_dim, rng)
        self.books = Codebooks.random(cfg.codebooks, cfg.codewords, cfg.sub_dim, rng)
        self.rng = rng
        self.aug_rng = np.random.default_rng([cfg.augmentation.seed, cfg.seed])
        self.adam = AdamState.zeros_like(self.params())
        self.epoch = 0
        self.iteration = 0
        self.memory = self._make_memory()
        self.log: list[dict] = []

    def _make_memory(self) -> Optional[CodeMemory]:
        cfg = self.cfg
        if cfg.loss_mode != "memory" or cfg.memory_capacity == 0:
            return None
        width = cfg.embed_dim if cfg.feature_memory else cfg.codebooks * cfg.codewords
        return CodeMemory(cfg.memory_capacity, width, cfg.batch_size, cfg.memory_start_epoch)

    def params(self) -> dict:
        return {"W": self.layer.W, "bias": self.layer.bias, "codebooks": self.books.weights}

    def iterations_per_epoch(self, count: int) -> int:
        return math.ceil(count / self.cfg.batch_size)

    def _batches(self, count: int):
        n = self.cfg.batch_size
        perm = self.rng.permutation(count)
        for start in range(0, count, n):
            idx = perm[start : start + n]
            if len(idx) < n:
                # top up the final batch from the front so every step has N items
                idx = np.concatenate([idx, perm[: n - len(idx)]])
            yield idx

    def fit(self, dataset: FeatureDataset, sinks=(), callbacks=(),
            until_epoch: Optional[int] = None) -> list[dict]:
        """Train until ``cfg.epochs``; resumes from ``self.epoch`` if > 0.

        ``until_epoch`` stops early (for checkpointing) without changing the
        learning-rate schedule, which always spans ``cfg.epochs``.
        """
        cfg = self.cfg
        if dataset.dim != self.dim_in:
            raise DataError(f"dataset dim {dataset.dim} != configured input dim {self.dim_in}")
        if dataset.count < cfg.batch_size:
            raise DataError(f"dataset has {dataset.count} rows, fewer than batch_size={cfg.batch_size}")
        x_all = dataset.vectors.astype(np.float64)
        total = cfg.epochs * self.iterations_per_epoch(dataset.count)
        limit = threadpool_limits(1) if cfg.deterministic else _thread_cap()
        with limit:
            stop = cfg.epochs if until_epoch is None else min(until_epoch, cfg.epochs)
            while self.epoch < stop:
                for it, idx in enumerate(self._batches(dataset.count)):
                    record = self.step(x_all[idx], total, it)
                    for sink in sinks:
                        sink(record)
                    for cb in callbacks:
                        if hasattr(cb, "on_step"):
                            cb.on_step(self, record)
                self.epoch += 1
                for cb in callbacks:
                    if hasattr(cb, "on_epoch_end"):
                        cb.on_epoch_end(self)
        return self.log

    def step(self, x_batch, total_iterations: int, iter_in_epoch: int = 0) -> dict:
        cfg = self.cfg
        views_q, views_k = make_views(x_batch, cfg.augmentation, self.aug_rng)
        mem_codes = mem_feats = None
        active = self.memory is not None and self.memory.is_active(self.epoch)
        if active:
            if cfg.feature_memory:
                mem_feats = self.memory.codes()
            else:
                mem_codes = self.memory.codes()
        res = objective(views_q, views_k, self.layer, self.books, cfg, mem_codes, mem_feats)
        if not np.isfinite(res.loss):
            raise DivergenceError(f"non-finite loss at iteration {self.iteration}", self.iteration)
        lr = learning_rate_at(cfg, self.iteration, total_iterations)
        optimizer_step(self.params(), res.grads, self.adam, lr)

        if self.memory is not None:
            if cfg.feature_memory:
                rows = res.reconstructions
            elif cfg.hard_code_memory:
                p = res.soft_codes.reshape(-1, cfg.codebooks, cfg.codewords)
                rows = one_hot(p.argmax(axis=-1), cfg.codewords)
            else:
                rows = res.soft_codes
            self.memory.enqueue_batch(rows[0::2])
            self.memory.enqueue_batch(rows[1::2])

        record = {
            "epoch": self.epoch,
            "iter": self.iteration,
            "iter_in_epoch": iter_in_epoch,
            "loss": res.loss,
            "contrastive": res.contrastive,
            "omega_c": res.omega,
            "memory_active": bool(active),
            "floor_engaged": int(res.report.floor_engaged.sum()),
            "lr": lr,
        }
        self.log.append(record)
        self.iteration += 1
        return record


def _thread_cap():
    n = os.environ.get("COQMEM_THREADS")
    if n:
        return threadpool_limits(int(n))
    return nullcontext()


@dataclass
class TrainResult:
    layer: EmbeddingLayer
    books: Codebooks
    log: list
    trainer: Trainer


def train(dataset: FeatureDataset, cfg: TrainConfig, sinks=(), callbacks=()) -> TrainResult:
    """Initialize from ``cfg.seed`` and train for ``cfg.epochs`` epochs."""
    trainer = Trainer(cfg, dataset.dim)
    trainer.fit(dataset, sinks=sinks, callbacks=callbacks)
    return TrainResult(trainer.layer, trainer.books, trainer.log, trainer)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(trainer: Trainer, directory) -> Path:
    """Write a checkpoint directory.

    Float32 exports (``codebooks.mcqc``, ``embedding.mcqv``,
    ``embedding_bias.mcqv``) are for interchange; ``state/*.npy`` hold the
    exact float64 training state used for resuming.
    """
    d = Path(directory)
    (d / "state").mkdir(parents=True, exist_ok=True)
    trainer.books.save(d / "codebooks.mcqc")
    dataio.write_vectors(FeatureDataset(trainer.layer.W.astype(np.float32)), d / "embedding.mcqv")
    dataio.write_vectors(FeatureDataset(trainer.layer.bias[None, :].astype(np.float32)),
                         d / "embedding_bias.mcqv")
    arrays = {
        "W": trainer.layer.W,
        "bias": trainer.layer.bias,
        "codebooks": trainer.books.weights,
        **{f"adam_m_{k}": v for k, v in trainer.adam.m.items()},
        **{f"adam_v_{k}": v for k, v in trainer.adam.v.items()},
    }
    if trainer.memory is not None:
        arrays["memory"] = trainer.memory.codes()
    for name, arr in arrays.items():
        np.save(d / "state" / f"{name}.npy", arr)
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": trainer.cfg.to_dict(),
        "config_hash": trainer.cfg.config_hash(),
        "dim_in": trainer.dim_in,
        "epoch": trainer.epoch,
        "iteration": trainer.iteration,
        "adam_step": trainer.adam.step,
        "rng": trainer.rng.bit_generator.state,
        "aug_rng": trainer.aug_rng.bit_generator.state,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def load_checkpoint(directory) -> Trainer:
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text())
    except FileNotFoundError:
        raise DataError(f"{d} is not a checkpoint directory (missing meta.json)") from None
    cfg = TrainConfig.from_dict(meta["config"])
    if cfg.config_hash() != meta["config_hash"]:
        raise DataError(f"{d}: config hash mismatch")
    trainer = Trainer(cfg, meta["dim_in"])
    state = {p.stem: np.load(p) for p in (d / "state").glob("*.npy")}
    trainer.layer = EmbeddingLayer(state["W"], state["bias"])
    trainer.books = Codebooks(state["codebooks"])
    names = ("W", "bias", "codebooks")
    trainer.adam = AdamState({k: state[f"adam_m_{k}"] for k in names},
                             {k: state[f"adam_v_{k}"] for k in names}, meta["adam_step"])
    trainer.epoch = meta["epoch"]
    trainer.iteration = meta["iteration"]
    trainer.rng.bit_generator.state = meta["rng"]
    trainer.aug_rng.bit_generator.state = meta["aug_rng"]
    if trainer.memory is not None and "memory" in state:
        g = trainer.memory.granularity
        rows = state["memory"]
        for start in range(0, len(rows), g):
            trainer.memory.enqueue_batch(rows[start : start + g])
    return trainer
