"""Joint-embedding losses with analytic gradients.

Everything here works on plain ``numpy`` arrays of shape ``(n, D)`` and is
accumulated in float64 regardless of the input dtype. The torch bridge at the
bottom lets the training loop use these gradients directly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
import torch


class ContractError(ValueError):
    """A precondition of a public operation was violated."""


class LossFamily(str, Enum):
    VICREG = "vicreg"
    INFONCE = "infonce"


@dataclass(frozen=True)
class LossConfig:
    family: LossFamily = LossFamily.VICREG
    lam: float = 25.0
    mu: float = 25.0
    nu: float = 1.0
    gamma: float = 1.0
    epsilon: float = 1e-4
    tau: float = 0.5
    # Sum over ordered pairs (i != j) instead of unordered pairs; doubles the loss.
    ordered_pairs: bool = False
    # Divide the invariance term by D as well as n (mean squared error per entry).
    invariance_per_dim: bool = False

    def __post_init__(self):
        object.__setattr__(self, "family", LossFamily(self.family))
        if min(self.lam, self.mu, self.nu) < 0:
            raise ContractError("lam, mu and nu must be nonnegative")
        if self.gamma <= 0 or self.epsilon <= 0 or self.tau <= 0:
            raise ContractError("gamma, epsilon and tau must be positive")


@dataclass
class BranchSet:
    """Embedding batches of the N primary and M privileged branches."""

    primary: list[np.ndarray]
    privileged: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if len(self.primary) < 1:
            raise ContractError("at least one primary branch is required")
        if len(self.primary) + len(self.privileged) < 2:
            raise ContractError("at least two branches are required")
        shapes = {np.shape(z) for z in self.all()}
        if len(shapes) != 1:
            raise ContractError(f"branch shapes differ: {sorted(shapes)}")

    def all(self) -> list[np.ndarray]:
        return list(self.primary) + list(self.privileged)

    def names(self) -> list[str]:
        n = len(self.primary)
        prim = [str(i + 1) for i in range(n)]
        priv = ["p"] if len(self.privileged) == 1 else [f"p{j + 1}" for j in range(len(self.privileged))]
        return prim + priv


def as_batch(z, min_rows: int = 2) -> np.ndarray:
    """Validate an embedding batch and return it as float64."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ContractError(f"embedding batch must be 2-D, got shape {z.shape}")
    if z.shape[0] < min_rows:
        raise ContractError(f"need at least {min_rows} rows, got {z.shape[0]}")
    if not np.all(np.isfinite(z)):
        raise ContractError("embedding batch has non-finite entries")
    return z


def _same_shape(za: np.ndarray, zb: np.ndarray) -> None:
    if za.shape != zb.shape:
        raise ContractError(f"shape mismatch: {za.shape} vs {zb.shape}")


# ---------------------------------------------------------------------------
# VICReg terms


def vicreg_invariance(za, zb, per_dim: bool = False) -> float:
    za, zb = as_batch(za), as_batch(zb)
    _same_shape(za, zb)
    scale = za.shape[0] * (za.shape[1] if per_dim else 1)
    return float(np.sum((za - zb) ** 2) / scale)


def _std(z: np.ndarray, epsilon: float) -> np.ndarray:
    return np.sqrt(z.var(axis=0, ddof=1) + epsilon)


def vicreg_variance(z, gamma: float = 1.0, epsilon: float = 1e-4) -> float:
    z = as_batch(z)
    return float(np.mean(np.maximum(0.0, gamma - _std(z, epsilon))))


def _offdiag_cov(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    zc = z - z.mean(axis=0)
    cov = zc.T @ zc / (z.shape[0] - 1)
    np.fill_diagonal(cov, 0.0)
    return zc, cov


def vicreg_covariance(z) -> float:
    z = as_batch(z)
    _, off = _offdiag_cov(z)
    return float(np.sum(off**2) / z.shape[1])


def vicreg_pair_loss(za, zb, cfg: LossConfig) -> float:
    za, zb = as_batch(za), as_batch(zb)
    _same_shape(za, zb)
    return (
        cfg.lam * vicreg_invariance(za, zb, cfg.invariance_per_dim)
        + cfg.mu * (vicreg_variance(za, cfg.gamma, cfg.epsilon) + vicreg_variance(zb, cfg.gamma, cfg.epsilon))
        + cfg.nu * (vicreg_covariance(za) + vicreg_covariance(zb))
    )


def _variance_grad(z: np.ndarray, gamma: float, epsilon: float) -> np.ndarray:
    n, dim = z.shape
    std = _std(z, epsilon)
    active = (gamma - std) > 0
    coef = np.where(active, -1.0 / (dim * (n - 1) * std), 0.0)
    return (z - z.mean(axis=0)) * coef


def _covariance_grad(z: np.ndarray) -> np.ndarray:
    n, dim = z.shape
    zc, off = _offdiag_cov(z)
    return 4.0 * zc @ off / (dim * (n - 1))


def vicreg_pair_grad(za, zb, cfg: LossConfig) -> tuple[np.ndarray, np.ndarray]:
    za, zb = as_batch(za), as_batch(zb)
    _same_shape(za, zb)
    inv = 2.0 * (za - zb) / (za.shape[0] * (za.shape[1] if cfg.invariance_per_dim else 1))
    ga = cfg.lam * inv + cfg.mu * _variance_grad(za, cfg.gamma, cfg.epsilon) + cfg.nu * _covariance_grad(za)
    gb = -cfg.lam * inv + cfg.mu * _variance_grad(zb, cfg.gamma, cfg.epsilon) + cfg.nu * _covariance_grad(zb)
    return ga, gb


# ---------------------------------------------------------------------------
# InfoNCE


def _unit_rows(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ContractError("cosine similarity undefined for zero-norm rows")
    return z / norms, norms


def _logsumexp(s: np.ndarray, axis: int) -> np.ndarray:
    m = s.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(s - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _softmax(s: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _similarity(za: np.ndarray, zb: np.ndarray, tau: float):
    ua, na = _unit_rows(za)
    ub, nb = _unit_rows(zb)
    return ua @ ub.T / tau, ua, na, ub, nb


def infonce_pair_loss(za, zb, cfg: LossConfig) -> float:
    """Symmetric InfoNCE where each anchor's negatives come from the other view only."""
    za, zb = as_batch(za), as_batch(zb)
    _same_shape(za, zb)
    s, *_ = _similarity(za, zb, cfg.tau)
    n = s.shape[0]
    # sim is symmetric, so l(b_i, a) uses the columns of the same matrix.
    total = -2.0 * np.trace(s) + _logsumexp(s, 1).sum() + _logsumexp(s, 0).sum()
    return float(total / (2 * n))


def infonce_pair_grad(za, zb, cfg: LossConfig) -> tuple[np.ndarray, np.ndarray]:
    za, zb = as_batch(za), as_batch(zb)
    _same_shape(za, zb)
    s, ua, na, ub, nb = _similarity(za, zb, cfg.tau)
    n = s.shape[0]
    ds = (_softmax(s, 1) + _softmax(s, 0) - 2.0 * np.eye(n)) / (2 * n)
    gua = ds @ ub / cfg.tau
    gub = ds.T @ ua / cfg.tau
    # back through row normalisation
    ga = (gua - ua * np.sum(ua * gua, axis=1, keepdims=True)) / na
    gb = (gub - ub * np.sum(ub * gub, axis=1, keepdims=True)) / nb
    return ga, gb


# ---------------------------------------------------------------------------
# N + M branches


def pair_loss(za, zb, cfg: LossConfig) -> float:
    if cfg.family is LossFamily.VICREG:
        return vicreg_pair_loss(za, zb, cfg)
    return infonce_pair_loss(za, zb, cfg)


def pair_grad(za, zb, cfg: LossConfig) -> tuple[np.ndarray, np.ndarray]:
    if cfg.family is LossFamily.VICREG:
        return vicreg_pair_grad(za, zb, cfg)
    return infonce_pair_grad(za, zb, cfg)


def _as_branchset(branches) -> BranchSet:
    if isinstance(branches, BranchSet):
        return branches
    return BranchSet(list(branches))


def branch_pairs(n_branches: int) -> list[tuple[int, int]]:
    return list(itertools.combinations(range(n_branches), 2))


def pair_terms(branches: BranchSet | Sequence[np.ndarray], cfg: LossConfig) -> dict[str, float]:
    """Loss of every unordered branch pair, keyed like ``"12"`` or ``"1p"``."""
    bs = _as_branchset(branches)
    zs = [as_batch(z) for z in bs.all()]
    names = bs.names()
    return {names[i] + names[j]: pair_loss(zs[i], zs[j], cfg) for i, j in branch_pairs(len(zs))}


def multibranch_loss(branches: BranchSet | Sequence[np.ndarray], cfg: LossConfig) -> float:
    """Sum of the pair loss over all branch pairs.

    With ``cfg.ordered_pairs`` every pair is counted in both orders.
    """
    total = sum(pair_terms(branches, cfg).values())
    return 2.0 * total if cfg.ordered_pairs else total


def loss_gradient(branches: BranchSet | Sequence[np.ndarray], cfg: LossConfig) -> list[np.ndarray]:
    """Gradient of :func:`multibranch_loss` w.r.t. every branch, in branch order."""
    bs = _as_branchset(branches)
    zs = [as_batch(z) for z in bs.all()]
    grads = [np.zeros_like(z) for z in zs]
    for i, j in branch_pairs(len(zs)):
        gi, gj = pair_grad(zs[i], zs[j], cfg)
        grads[i] += gi
        grads[j] += gj
    if cfg.ordered_pairs:
        grads = [2.0 * g for g in grads]
    return grads


class _MultiBranchLoss(torch.autograd.Function):
    @staticmethod
    def forward(ctx, cfg, *embeddings):
        arrays = [e.detach().cpu().double().numpy() for e in embeddings]
        value = multibranch_loss(arrays, cfg)
        grads = loss_gradient(arrays, cfg)
        ctx.grads = [torch.from_numpy(g).to(dtype=e.dtype, device=e.device) for g, e in zip(grads, embeddings)]
        return embeddings[0].new_tensor(value)

    @staticmethod
    def backward(ctx, grad_out):
        return (None, *[grad_out * g for g in ctx.grads])


def torch_multibranch_loss(embeddings: Sequence[torch.Tensor], cfg: LossConfig) -> torch.Tensor:
    """Differentiable wrapper that backpropagates the analytic gradients."""
    return _MultiBranchLoss.apply(cfg, *embeddings)
