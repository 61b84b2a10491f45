"""Pretraining (joint embedding) and supervised baselines."""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import GeneAugmentConfig, ImageAugmentConfig, augment_batch, make_rng
from .data import PairedArrays
from .losses import BranchSet, ContractError, LossConfig, loss_gradient, multibranch_loss, pair_terms
from .models import (
    BranchAugment,
    BranchTopology,
    EncoderSpec,
    HeadModel,
    JointEmbeddingModel,
    ProjectorSpec,
    make_branch_inputs,
    to_tensor,
)

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
TRACE_FIELDS = ["step", "lr", "loss", "loss_pair_12", "loss_pair_1p", "loss_pair_2p", "mean_std"]


class TrainMode(str, Enum):
    SSL_PRETRAIN = "ssl_pretrain"
    SUPERVISED = "supervised"
    GENE_REGRESSION = "gene_regression"


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, trace: "TrainTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class TrainRunConfig:
    topology: BranchTopology = field(default_factory=BranchTopology)
    loss: LossConfig = field(default_factory=LossConfig)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    priv_encoder: EncoderSpec | None = None
    projector: ProjectorSpec = field(default_factory=ProjectorSpec.desk)
    primary_aug: ImageAugmentConfig | None = field(default_factory=ImageAugmentConfig)
    privileged_aug: ImageAugmentConfig | GeneAugmentConfig | None = None
    epochs: int = 100
    batch_size: int = 64
    max_lr: float = 1e-3
    warmup_fraction: float = 0.1
    seed: int = 0
    mode: TrainMode = TrainMode.SSL_PRETRAIN
    label: str = "a"
    class_weighting: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", TrainMode(self.mode))
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ContractError("warmup_fraction must lie in (0, 1)")
        if self.max_lr <= 0:
            raise ContractError("max_lr must be positive")

    def augment(self) -> BranchAugment:
        return BranchAugment(self.primary_aug, self.privileged_aug)


@dataclass
class TrainTrace:
    steps: list[dict] = field(default_factory=list)
    epoch_mean_std: list[float] = field(default_factory=list)
    step_seconds: list[float] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([s["loss"] for s in self.steps])

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
            writer.writeheader()
            for s in self.steps:
                row = {k: s.get(k, "") for k in TRACE_FIELDS}
                for k in ("loss_pair_12", "loss_pair_1p", "loss_pair_2p"):
                    row[k] = s.get("pairs", {}).get(k.removeprefix("loss_pair_"), "")
                writer.writerow(row)
        return path

    @classmethod
    def read_csv(cls, path: str | Path) -> "TrainTrace":
        trace = cls()
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                step = {"step": int(row["step"]), "lr": float(row["lr"]), "loss": float(row["loss"])}
                step["pairs"] = {k.removeprefix("loss_pair_"): float(row[k]) for k in TRACE_FIELDS[3:6] if row[k] != ""}
                if row["mean_std"] != "":
                    step["mean_std"] = float(row["mean_std"])
                    trace.epoch_mean_std.append(step["mean_std"])
                trace.steps.append(step)
        return trace


def warmup_steps(total_steps: int, warmup_fraction: float) -> int:
    return max(1, int(round(warmup_fraction * total_steps)))


def lr_schedule(step: int, total_steps: int, max_lr: float, warmup_fraction: float = 0.1) -> float:
    """Linear warmup from 0 to ``max_lr``, then half-cosine decay towards 0."""
    if not 0 <= step < total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps})")
    w = warmup_steps(total_steps, warmup_fraction)
    if step < w:
        return max_lr * step / w
    progress = (step - w) / max(1, total_steps - w)
    return max_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def class_weights(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Proportional weights ``n / (K * n_c)``; absent classes get weight 0."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        warnings.warn(f"classes {missing.tolist()} absent from training data; weight set to 0", stacklevel=2)
    with np.errstate(divide="ignore"):
        w = np.where(counts > 0, len(labels) / (n_classes * counts), 0.0)
    return w


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for k in range(n // batch_size):
        yield order[k * batch_size : (k + 1) * batch_size]


def _make_optimizer(model: nn.Module) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=0.0, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=0.0)


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def _check_steps(n: int, cfg: TrainRunConfig) -> int:
    per_epoch = n // cfg.batch_size
    if per_epoch < 1:
        raise ContractError(f"dataset of {n} samples is smaller than one batch of {cfg.batch_size}")
    return per_epoch


def build_joint_model(cfg: TrainRunConfig, data: PairedArrays | None = None) -> JointEmbeddingModel:
    priv_spec = cfg.priv_encoder
    if priv_spec is None and data is not None and data.privileged_kind == "counts":
        priv_spec = EncoderSpec.counts_mlp(data.privileged.shape[1], widths=(512, 512, cfg.encoder.repr_dim), seed=cfg.encoder.seed)
    return JointEmbeddingModel(cfg.topology, cfg.encoder, cfg.projector, priv_spec)


@dataclass
class PretrainResult:
    model: JointEmbeddingModel
    trace: TrainTrace

    @property
    def encoder(self) -> nn.Module:
        return self.model.encoder


def pretrain(data: PairedArrays, cfg: TrainRunConfig, progress: bool = False) -> PretrainResult:
    """Minimise the multi-branch loss over projector outputs with Adam.

    Runs ``epochs * floor(n / batch_size)`` steps; the final partial batch of
    every epoch is dropped.
    """
    topo = cfg.topology
    if topo.n_privileged and topo.privileged_input == "privileged" and data.privileged is None:
        raise ContractError("topology has a privileged branch but the dataset has no privileged inputs")
    torch.manual_seed(cfg.seed)
    rng = make_rng(cfg.seed)
    model = build_joint_model(cfg, data)
    model.train()
    opt = _make_optimizer(model)
    aug = cfg.augment()
    per_epoch = _check_steps(len(data), cfg)
    total = cfg.epochs * per_epoch
    trace = TrainTrace()
    step = 0
    for epoch in range(cfg.epochs):
        stds = []
        for idx in _batches(len(data), cfg.batch_size, rng):
            t0 = time.perf_counter()
            lr = lr_schedule(step, total, cfg.max_lr, cfg.warmup_fraction)
            _set_lr(opt, lr)
            priv = None if data.privileged is None else data.privileged[idx]
            views = make_branch_inputs(data.primary[idx], priv, topo, aug, rng)
            out = model([to_tensor(v) for v in views])
            arrays = [e.detach().double().numpy() for e in out.embeddings]
            if not all(np.all(np.isfinite(a)) for a in arrays):
                raise TrainingDiverged(f"non-finite embeddings at step {step}", trace)
            branches = BranchSet(arrays[: topo.n_primary], arrays[topo.n_primary :])
            terms = pair_terms(branches, cfg.loss)
            loss = multibranch_loss(branches, cfg.loss)
            grads = loss_gradient(branches, cfg.loss)
            opt.zero_grad(set_to_none=True)
            torch.autograd.backward(out.embeddings, [torch.from_numpy(g).float() for g in grads])
            opt.step()
            stds.append(float(np.mean([a.std(axis=0, ddof=1).mean() for a in arrays])))
            trace.steps.append({"step": step, "lr": lr, "loss": loss, "pairs": terms})
            trace.step_seconds.append(time.perf_counter() - t0)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at step {step}", trace)
            step += 1
        trace.epoch_mean_std.append(float(np.mean(stds)))
        trace.steps[-1]["mean_std"] = trace.epoch_mean_std[-1]
        if progress:
            log.info("epoch %d/%d loss %.4f mean std %.4f", epoch + 1, cfg.epochs, trace.steps[-1]["loss"], trace.epoch_mean_std[-1])
    model.eval()
    return PretrainResult(model, trace)


@dataclass
class HeadTrainResult:
    model: HeadModel
    trace: TrainTrace
    train_accuracy: float | None = None

    @property
    def encoder(self) -> nn.Module:
        return self.model.encoder


def _fit_head_model(model: HeadModel, data: PairedArrays, targets: np.ndarray, cfg: TrainRunConfig, loss_fn) -> TrainTrace:
    rng = make_rng(cfg.seed)
    opt = _make_optimizer(model)
    per_epoch = _check_steps(len(data), cfg)
    total = cfg.epochs * per_epoch
    trace = TrainTrace()
    model.train()
    step = 0
    for _ in range(cfg.epochs):
        for idx in _batches(len(data), cfg.batch_size, rng):
            lr = lr_schedule(step, total, cfg.max_lr, cfg.warmup_fraction)
            _set_lr(opt, lr)
            x = augment_batch(data.primary[idx], cfg.primary_aug, rng)
            loss = loss_fn(model(to_tensor(x)), targets[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss.item()} at step {step}", trace)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            trace.steps.append({"step": step, "lr": lr, "loss": float(loss.item())})
            step += 1
    model.eval()
    return trace


def train_supervised(data: PairedArrays, cfg: TrainRunConfig, n_classes: int | None = None) -> HeadTrainResult:
    """Cross-entropy training of encoder plus batch-norm/dense head on ``cfg.label``."""
    if cfg.label not in data.labels:
        raise ContractError(f"dataset has no label {cfg.label!r}")
    labels = np.asarray(data.labels[cfg.label])
    k = n_classes or int(labels.max()) + 1
    torch.manual_seed(cfg.seed)
    model = HeadModel(cfg.encoder, k, "supervised")
    weight = torch.as_tensor(class_weights(labels, k), dtype=torch.float32) if cfg.class_weighting else None
    targets = torch.as_tensor(labels, dtype=torch.long)

    def loss_fn(logits, y):
        return F.cross_entropy(logits, y, weight=weight)

    trace = _fit_head_model(model, data, targets, cfg, loss_fn)
    with torch.no_grad():
        pred = model(to_tensor(data.primary)).argmax(1).numpy()
    return HeadTrainResult(model, trace, float(np.mean(pred == labels)))


def train_gene_regressor(data: PairedArrays, cfg: TrainRunConfig) -> HeadTrainResult:
    """MSE regression from the primary input to the privileged count vector."""
    if data.privileged_kind != "counts":
        raise ContractError("gene regression needs count-vector privileged data")
    torch.manual_seed(cfg.seed)
    model = HeadModel(cfg.encoder, data.privileged.shape[1], "gene_regression")
    targets = torch.as_tensor(data.privileged, dtype=torch.float32)
    trace = _fit_head_model(model, data, targets, cfg, F.mse_loss)
    return HeadTrainResult(model, trace)


def regression_mse(model: HeadModel, data: PairedArrays) -> float:
    model.eval()
    with torch.no_grad():
        pred = model(to_tensor(data.primary)).numpy()
    return float(np.mean((pred - data.privileged) ** 2))
