"""Hash-grid encodings, shallow MLPs, the canonical model and deformation fields.

All fields take points in the normalized scene cube [0, 1]^3.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import _hashkernels as _hk

Tensor = torch.Tensor

HASH_PRIMES = (1, 2654435761, 805459861)
FEATURE_INIT_RANGE = 1e-4
LEAKY_SLOPE = 0.01

_CORNERS = [(i, j, k) for k in (0, 1) for j in (0, 1) for i in (0, 1)]


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 16
    features_per_level: int = 2
    base_resolution: int = 32
    per_level_scale: float = 1.3819
    table_size: int = 2**20

    def __post_init__(self):
        if self.levels < 1 or self.features_per_level < 1 or self.base_resolution < 1:
            raise ValueError(f"degenerate hash grid config {self}")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ValueError(f"table_size must be a power of two, got {self.table_size}")
        if self.per_level_scale < 1.0:
            raise ValueError("per_level_scale must be >= 1")

    def resolution(self, level: int) -> int:
        return int(math.floor(self.base_resolution * self.per_level_scale**level))

    @property
    def resolutions(self) -> list[int]:
        return [self.resolution(lvl) for lvl in range(self.levels)]

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    def is_dense(self, level: int) -> bool:
        return (self.resolution(level) + 1) ** 3 <= self.table_size


def hash_index(level: int, cell, config: HashGridConfig):
    """Table row of integer vertex ``cell`` at ``level``.

    ``cell`` is a 3-sequence of ints or an int64 tensor [..., 3]. Coarse levels
    whose vertices fit in the table are indexed densely (row-major, x fastest).
    """
    res = config.resolution(level)
    if isinstance(cell, Tensor):
        if cell.numel() and (cell.min() < 0 or cell.max() > res):
            raise IndexError(f"cell outside [0, {res}] at level {level}")
        c = cell.long()
        if config.is_dense(level):
            return c[..., 0] + c[..., 1] * (res + 1) + c[..., 2] * (res + 1) ** 2
        h = (c[..., 0] * HASH_PRIMES[0]) ^ (c[..., 1] * HASH_PRIMES[1]) ^ (c[..., 2] * HASH_PRIMES[2])
        return h & (config.table_size - 1)
    x, y, z = (int(v) for v in cell)
    if min(x, y, z) < 0 or max(x, y, z) > res:
        raise IndexError(f"cell {cell} outside [0, {res}] at level {level}")
    if config.is_dense(level):
        return x + y * (res + 1) + z * (res + 1) ** 2
    return ((x * HASH_PRIMES[0]) ^ (y * HASH_PRIMES[1]) ^ (z * HASH_PRIMES[2])) % config.table_size


def _hash_rows(level: int, corners: Tensor, config: HashGridConfig) -> Tensor:
    # unchecked variant of hash_index for the hot path
    res = config.resolution(level)
    if config.is_dense(level):
        return corners[..., 0] + corners[..., 1] * (res + 1) + corners[..., 2] * (res + 1) ** 2
    h = corners[..., 0] ^ (corners[..., 1] * HASH_PRIMES[1]) ^ (corners[..., 2] * HASH_PRIMES[2])
    return h & (config.table_size - 1)


class _GatherRows(torch.autograd.Function):
    """table[rows] with a scatter-add backward (much faster than index_put on CPU)."""

    @staticmethod
    def forward(ctx, table: Tensor, rows: Tensor) -> Tensor:
        ctx.save_for_backward(rows)
        ctx.n_rows = table.shape[0]
        return table.index_select(0, rows)

    @staticmethod
    def backward(ctx, grad: Tensor):
        (rows,) = ctx.saved_tensors
        out = grad.new_zeros(ctx.n_rows, grad.shape[-1]).index_add(0, rows, grad)
        return out, None


def gather_rows(table: Tensor, rows: Tensor) -> Tensor:
    return _GatherRows.apply(table, rows.reshape(-1)).view(*rows.shape, table.shape[-1])


def torch_encode(x: Tensor, table: Tensor, config: HashGridConfig) -> Tensor:
    """Pure-torch hash-grid interpolation; ``table`` is [L*T, F]. Reference path."""
    L, T, Fd = config.levels, config.table_size, config.features_per_level
    x = x.clamp(0.0, 1.0)
    res = torch.tensor(config.resolutions, dtype=x.dtype)
    offsets = torch.tensor(_CORNERS, dtype=torch.long)
    pos = x.unsqueeze(-2) * res.unsqueeze(-1)  # [N, L, 3]
    with torch.no_grad():
        cell = torch.minimum(pos.floor(), (res - 1).unsqueeze(-1))
        corners = cell.long().unsqueeze(-2) + offsets  # [N, L, 8, 3]
        rows = torch.stack([_hash_rows(lvl, corners[:, lvl], config) + lvl * T for lvl in range(L)], dim=1)
    frac = (pos - cell).unsqueeze(-2)  # [N, L, 1, 3]
    o = offsets.to(x.dtype)
    w = (o * frac + (1 - o) * (1 - frac)).prod(-1)  # [N, L, 8]
    feat = gather_rows(table, rows)  # [N, L, 8, F]
    return (w.unsqueeze(-1) * feat).sum(-2).reshape(x.shape[0], L * Fd)


class _KernelMeta:
    def __init__(self, config: HashGridConfig):
        self.config = config
        self.res = np.array(config.resolutions, dtype=np.int64)
        self.dense = np.array([config.is_dense(l) for l in range(config.levels)], dtype=np.bool_)
        self.T = config.table_size
        self.F = config.features_per_level


def _np(t: Tensor) -> np.ndarray:
    return t.detach().contiguous().numpy()


class _HashEncode(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x: Tensor, table: Tensor, meta: _KernelMeta) -> Tensor:
        out = np.zeros((x.shape[0], meta.config.output_dim), dtype=_np(table).dtype)
        _hk.encode_forward(_np(x), _np(table), meta.res, meta.dense, meta.T, meta.F, out)
        ctx.save_for_backward(x, table)
        ctx.meta = meta
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, g: Tensor):
        x, table = ctx.saved_tensors
        need_x, need_table = ctx.needs_input_grad[0], ctx.needs_input_grad[1]
        if not (need_x or need_table):
            return None, None, None
        gx, gt = _HashEncodeBackward.apply(g, x, table, ctx.meta, need_x, need_table)
        return (gx if need_x else None), (gt if need_table else None), None


class _HashEncodeBackward(torch.autograd.Function):
    @staticmethod
    def forward(ctx, g: Tensor, x: Tensor, table: Tensor, meta: _KernelMeta, need_x: bool, need_table: bool):
        dt = _np(table).dtype
        grad_x = np.zeros((x.shape[0], 3), dtype=dt)
        grad_table = np.zeros(tuple(table.shape) if need_table else (1, 1), dtype=dt)
        _hk.encode_backward(_np(g), _np(x), _np(table), meta.res, meta.dense, meta.T, meta.F,
                            need_x, need_table, grad_x, grad_table)
        ctx.save_for_backward(g, x, table)
        ctx.meta = meta
        ctx.set_materialize_grads(False)
        gx = torch.from_numpy(grad_x)
        gt = torch.from_numpy(grad_table) if need_table else table.new_zeros(()).expand_as(table)
        return gx, gt

    @staticmethod
    def backward(ctx, gg_x: Tensor | None, gg_table: Tensor | None):
        g, x, table = ctx.saved_tensors
        meta = ctx.meta
        need_g, need_x, need_table = ctx.needs_input_grad[0], ctx.needs_input_grad[1], ctx.needs_input_grad[2]
        dt = _np(table).dtype
        grad_g = grad_table = grad_xx = None
        if gg_x is None and gg_table is None:
            return None, None, None, None, None, None
        out_g = np.zeros(tuple(g.shape) if need_g else (1, 1), dtype=dt)
        out_t = np.zeros(tuple(table.shape) if need_table else (1, 1), dtype=dt)
        out_x = np.zeros(tuple(x.shape) if need_x else (1, 1), dtype=dt)
        dummy = np.zeros((1, 1), dtype=dt)
        _hk.encode_double_backward(
            _np(gg_x) if gg_x is not None else dummy,
            _np(gg_table) if gg_table is not None else dummy,
            _np(g), _np(x), _np(table), meta.res, meta.dense, meta.T, meta.F,
            gg_x is not None, gg_table is not None, need_g, need_table, need_x, out_g, out_t, out_x)
        grad_g = torch.from_numpy(out_g) if need_g else None
        grad_table = torch.from_numpy(out_t) if need_table else None
        grad_xx = torch.from_numpy(out_x) if need_x else None
        return grad_g, grad_xx, grad_table, None, None, None


class HashGrid(nn.Module):
    """Multi-resolution hash grid; ``backend`` selects the fused kernels or the torch reference."""

    def __init__(self, config: HashGridConfig, backend: str = "numba"):
        super().__init__()
        if backend not in ("numba", "torch"):
            raise ValueError(f"unknown backend {backend!r}")
        self.config = config
        self.backend = backend
        L, T, Fd = config.levels, config.table_size, config.features_per_level
        self.tables = nn.Parameter(torch.empty(L, T, Fd).uniform_(-FEATURE_INIT_RANGE, FEATURE_INIT_RANGE))
        self._meta = _KernelMeta(config)

    @property
    def output_dim(self) -> int:
        return self.config.output_dim

    def forward(self, x: Tensor) -> Tensor:
        """Trilinearly interpolated features [N, L*F], levels concatenated coarse-to-fine."""
        L, T, Fd = self.config.levels, self.config.table_size, self.config.features_per_level
        flat = self.tables.view(L * T, Fd)
        x = x.reshape(-1, 3)
        if self.backend == "torch":
            return torch_encode(x, flat, self.config)
        return _HashEncode.apply(x.to(flat.dtype), flat, self._meta)


def grid_encode(grid: HashGrid, x: Tensor) -> Tensor:
    return grid(x)


def relu(x: Tensor) -> Tensor:
    # clamp passes the gradient at the boundary, i.e. right derivative 1 at the kink
    return x.clamp(min=0.0)


def leaky_relu(x: Tensor) -> Tensor:
    return LEAKY_SLOPE * x + (1.0 - LEAKY_SLOPE) * x.clamp(min=0.0)


_ACTIVATIONS = {"relu": relu, "leaky_relu": leaky_relu}


class Mlp(nn.Module):
    """Fully connected net; hidden layers activated, last layer linear. Biases start at zero."""

    def __init__(self, widths: Sequence[int], activation: str = "relu", zero_last_layer: bool = False):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = list(widths)
        self.activation = activation
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        for layer in self.layers:
            nn.init.zeros_(layer.bias)
        if zero_last_layer:
            nn.init.zeros_(self.layers[-1].weight)

    def forward(self, h: Tensor) -> Tensor:
        act = _ACTIVATIONS[self.activation]
        for layer in self.layers[:-1]:
            h = act(layer(h))
        return self.layers[-1](h)


CANONICAL_GRID = HashGridConfig(levels=13, features_per_level=2, base_resolution=128,
                                per_level_scale=1.3819, table_size=2**20)
DEFORMATION_GRID = HashGridConfig(levels=16, features_per_level=2, base_resolution=32,
                                  per_level_scale=1.3819, table_size=2**20)


class CanonicalModel(nn.Module):
    """Time-invariant opacity and color: (sigma, rgb) = m(x)."""

    def __init__(self, grid: HashGridConfig = CANONICAL_GRID, hidden: int = 64, feature_dim: int = 15):
        super().__init__()
        self.grid = HashGrid(grid)
        self.density_mlp = Mlp([grid.output_dim, hidden, 1 + feature_dim], "relu")
        self.appearance_mlp = Mlp([feature_dim, hidden, hidden, 3], "relu")

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = self.density_mlp(self.grid(x))
        sigma = F.softplus(h[..., 0])
        rgb = torch.sigmoid(self.appearance_mlp(h[..., 1:]))
        return sigma, rgb


def canonical_query(model: CanonicalModel, x: Tensor) -> tuple[Tensor, Tensor]:
    return model(x)


class DeformationField(nn.Module):
    """Backward warp x -> x + offset(x); the offset starts identically zero."""

    def __init__(self, grid: HashGridConfig = DEFORMATION_GRID, hidden: int = 64, role: str = "coarse"):
        super().__init__()
        if role not in ("coarse", "fine"):
            raise ValueError(f"unknown deformation role {role!r}")
        self.role = role
        self.grid = HashGrid(grid)
        self.mlp = Mlp([grid.output_dim, hidden, 3], "leaky_relu", zero_last_layer=True)

    def offset(self, x: Tensor) -> Tensor:
        return self.mlp(self.grid(x))

    def forward(self, x: Tensor) -> Tensor:
        return x + self.offset(x)


def deform(field: DeformationField | None, x: Tensor) -> Tensor:
    return x if field is None else field(x)


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over the raw bytes of every parameter, in name order."""
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
