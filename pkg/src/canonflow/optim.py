"""AdamW with per-scalar lazy state, and the learning-rate schedules.

Only scalars whose gradient is present and non-zero take a step; each keeps
its own step count so bias correction follows its own update history. This
is what keeps sparsely-touched hash-table rows from having their momentum
decayed on iterations they did not take part in.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numba
import numpy as np
import torch

Tensor = torch.Tensor


@numba.njit(cache=True)
def _lazy_adamw_kernel(p, g, m, v, n, bc1, bc2, lr, wd, b1, omb1, b2, omb2, eps):
    touched = False
    for i in range(p.shape[0]):
        gi = g[i]
        if gi != 0:
            touched = True
            k = n[i] + 1
            n[i] = k
            mi = b1 * m[i] + omb1 * gi
            vi = b2 * v[i] + omb2 * (gi * gi)
            m[i] = mi
            v[i] = vi
            upd = (mi / bc1[k]) / (np.sqrt(vi / bc2[k]) + eps) + wd * p[i]
            p[i] = p[i] - lr * upd
    return touched


@dataclass
class ParamGroup:
    lr: float
    weight_decay: float = 0.01


class LazyAdamW:
    def __init__(self, params: Mapping[str, Tensor], groups: Mapping[str, ParamGroup] | None = None,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 default_group: ParamGroup | None = None):
        self.params = dict(params)
        self.groups = dict(groups or {})
        self.default_group = default_group or ParamGroup(lr=1e-3)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state: dict[str, dict] = {}
        self._bc: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def group_of(self, name: str) -> ParamGroup:
        return self.groups.get(name, self.default_group)

    def _state(self, name: str, p: Tensor) -> dict[str, Tensor]:
        st = self.state.get(name)
        if st is None:
            st = {"m": torch.zeros_like(p).detach(), "v": torch.zeros_like(p).detach(),
                  "n": torch.zeros(p.shape, dtype=torch.int64), "max_n": 0}
            self.state[name] = st
        return st

    def _tables(self, max_n: int, dtype: np.dtype) -> tuple[np.ndarray, np.ndarray]:
        # 1 - beta^n as python floats rounded to the parameter dtype, exactly what a
        # scalar-step reference divides by
        key = np.dtype(dtype).str
        cached = self._bc.get(key)
        if cached is None or len(cached[0]) <= max_n:
            size = max(2 * max_n + 2, 1024)
            bc1 = np.array([1.0 - self.beta1 ** k for k in range(size)], dtype=dtype)
            bc2 = np.array([1.0 - self.beta2 ** k for k in range(size)], dtype=dtype)
            cached = self._bc[key] = (bc1, bc2)
        return cached

    @torch.no_grad()
    def step(self, grads: Mapping[str, Tensor | None], lr_scale: Mapping[str, float] | float = 1.0) -> None:
        """Apply one update. ``grads[name] is None`` marks an absent gradient."""
        for name, g in grads.items():
            if g is None:
                continue
            p = self.params[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
            group = self.group_of(name)
            scale = lr_scale if isinstance(lr_scale, (int, float)) else lr_scale.get(name, 1.0)
            st = self._state(name, p)
            if not p.is_contiguous():
                raise ValueError(f"parameter {name} must be contiguous")
            pa = p.detach().numpy().reshape(-1)
            dt = pa.dtype.type
            ga = g.detach().contiguous().numpy().reshape(-1).astype(pa.dtype, copy=False)
            bc1, bc2 = self._tables(int(st["max_n"]) + 1, pa.dtype)
            touched = _lazy_adamw_kernel(pa, ga, st["m"].numpy().reshape(-1), st["v"].numpy().reshape(-1),
                                         st["n"].numpy().reshape(-1), bc1, bc2, dt(group.lr * scale),
                                         dt(group.weight_decay), dt(self.beta1), dt(1.0 - self.beta1),
                                         dt(self.beta2), dt(1.0 - self.beta2), dt(self.eps))
            if touched:
                st["max_n"] += 1

    def state_tensors(self) -> dict[str, Tensor]:
        out = {}
        for name, st in self.state.items():
            for key in ("m", "v", "n"):
                out[f"{name}.{key}"] = st[key]
        return out

    def load_state_tensors(self, tensors: Mapping[str, Tensor]) -> None:
        self.state = {}
        for key, value in tensors.items():
            name, _, field = key.rpartition(".")
            self.state.setdefault(name, {})[field] = value.clone()
        for st in self.state.values():
            st["max_n"] = int(st["n"].max()) if st["n"].numel() else 0


class DenseAdamW:
    """Textbook AdamW with one global step counter, in vectorized numpy.

    Reference for LazyAdamW. numpy's elementwise sqrt and division are
    correctly rounded, so the two agree bit-for-bit when every gradient is
    dense.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float, weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr, self.weight_decay, self.eps = lr, weight_decay, eps
        self.beta1, self.beta2 = betas
        self.t = 0
        self.m = {k: np.zeros(p.shape, dtype=p.detach().numpy().dtype) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape, dtype=p.detach().numpy().dtype) for k, p in self.params.items()}

    @torch.no_grad()
    def step(self, grads: Mapping[str, Tensor]) -> None:
        self.t += 1
        for name, g in grads.items():
            p = self.params[name].detach().numpy()
            dt = p.dtype.type
            g = g.detach().numpy().astype(p.dtype, copy=False)
            bc1, bc2 = dt(1.0 - self.beta1 ** self.t), dt(1.0 - self.beta2 ** self.t)
            self.m[name] = dt(self.beta1) * self.m[name] + dt(1.0 - self.beta1) * g
            self.v[name] = dt(self.beta2) * self.v[name] + dt(1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            update = m_hat / (np.sqrt(v_hat) + dt(self.eps)) + dt(self.weight_decay) * p
            p[...] = p - dt(self.lr) * update


@dataclass(frozen=True)
class LrSchedule:
    """Exponential decay over a phase, with optional exponential warmup."""

    base: float
    decay: float
    phase_length: int
    warmup_iters: int = 0
    warmup_start: float = 0.01

    def __post_init__(self):
        if self.base <= 0 or self.decay <= 0 or self.phase_length <= 0:
            raise ValueError(f"invalid schedule {self}")

    def warmup(self, it: int) -> float:
        if self.warmup_iters <= 0 or it >= self.warmup_iters:
            return 1.0
        return self.warmup_start ** (1.0 - it / self.warmup_iters)

    def __call__(self, it: int) -> float:
        return self.base * self.warmup(it) * self.decay ** (it / self.phase_length)


def lr_at(schedule: LrSchedule, iteration: int) -> float:
    if iteration < 0 or iteration > schedule.phase_length:
        raise ValueError(f"iteration {iteration} outside phase of length {schedule.phase_length}")
    return schedule(iteration)
