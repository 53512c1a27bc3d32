"""Training objectives and the smoothness-weighting chain."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F

from .autodiff import vjp_with_output

Tensor = torch.Tensor

BACK_EPS = 1e-6
BASE_WEIGHT_MODES = ("occupancy", "transmittance")


@dataclass(frozen=True)
class LossWeights:
    back: float = 0.001
    hard: float = 1.0
    coarse: float = 1000.0
    fine: float = 30.0
    u: float = 10.0
    f: float = 0.005
    s_t: float = 0.001
    base_weight: str = "occupancy"

    def __post_init__(self):
        for name in ("back", "hard", "coarse", "fine", "u", "f", "s_t"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        if self.base_weight not in BASE_WEIGHT_MODES:
            raise ValueError(f"unknown base weight mode {self.base_weight!r}")

    def pool_radius(self, S: int) -> int:
        return int(math.floor(self.f * S))


def loss_rec(pred: Tensor, gt: Tensor) -> Tensor:
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} vs target {tuple(gt.shape)}")
    return (pred - gt).abs().sum(-1).mean()


def loss_back(weight_sums: Tensor, eps: float = BACK_EPS) -> Tensor:
    s = weight_sums.clamp(eps, 1.0 - eps)
    return (torch.log(s) + torch.log1p(-s)).mean()


def loss_hard(weights: Tensor) -> Tensor:
    """-(1/RS) sum log(exp(-w) + exp(-(1-w))) over every sample weight."""
    pair = torch.stack([-weights, weights - 1.0], dim=0)
    return -torch.logsumexp(pair, dim=0).mean()


def loss_canon(pred: Tensor, gt: Tensor, weights: Tensor, lw: LossWeights) -> dict[str, Tensor]:
    rec = loss_rec(pred, gt)
    back = loss_back(weights.sum(-1))
    hard = loss_hard(weights)
    return {"total": rec + lw.back * back + lw.hard * hard, "rec": rec, "back": back, "hard": hard}


def loss_rigid(J: Tensor) -> Tensor:
    """Mean absolute entry of J^T J - I over all points and the 9 entries."""
    eye = torch.eye(3, dtype=J.dtype)
    return (J.transpose(-1, -2) @ J - eye).abs().mean()


def random_unit_vectors(n: int, rng: torch.Generator | None = None, dtype=None) -> Tensor:
    e = torch.randn((n, 3), generator=rng, dtype=dtype or torch.get_default_dtype())
    return e / e.norm(dim=-1, keepdim=True).clamp(min=1e-12)


def norm_residual(fn: Callable[[Tensor], Tensor], x: Tensor, e: Tensor, create_graph: bool = True):
    """(fn(x), |‖J^T e‖ - 1|) per point from a single reverse sweep."""
    out, jte = vjp_with_output(fn, x, e, create_graph=create_graph)
    return out, (jte.norm(dim=-1) - 1.0).abs()


def loss_norm(fn: Callable[[Tensor], Tensor], x: Tensor, rng: torch.Generator | None = None,
              e: Tensor | None = None) -> Tensor:
    if e is None:
        e = random_unit_vectors(x.shape[0], rng, x.dtype)
    return norm_residual(fn, x, e)[1].mean()


def max_pool_rays(w: Tensor, k: int) -> Tensor:
    """Max over the window [i-k, i+k] along the last axis (edges truncated)."""
    if k <= 0:
        return w
    return F.max_pool1d(w.unsqueeze(1), kernel_size=2 * k + 1, stride=1, padding=k).squeeze(1)


def smoothness_weights(sigma: Tensor, deltas: Tensor, offsets: Tensor, lw: LossWeights) -> Tensor:
    """Per-sample regularizer weights [R, S]; nothing flows back into sigma or the offsets."""
    sigma, offsets = sigma.detach(), offsets.detach()
    tau = sigma * deltas
    base = -torch.expm1(-tau) if lw.base_weight == "occupancy" else torch.exp(-tau)
    pooled = max_pool_rays(base, lw.pool_radius(sigma.shape[-1]))
    pooled = torch.where(pooled > lw.u * base, pooled / lw.u, pooled)
    gate = torch.sigmoid(4.0 * offsets.norm(dim=-1) / lw.s_t - 2.0)
    return pooled * gate


def loss_norm_weighted(residual: Tensor, weights: Tensor) -> Tensor:
    """(1/RS) sum weights * residual; both [R, S] (pruned samples carry zero weight)."""
    return (weights * residual).sum() / weights.numel()


def loss_time(rec: Tensor, norm_coarse: Tensor | None, norm_fine: Tensor | None, lw: LossWeights) -> Tensor:
    total = rec
    if norm_coarse is not None:
        total = total + lw.coarse * norm_coarse
    if norm_fine is not None:
        total = total + lw.fine * norm_fine
    return total
