"""Reverse-mode differentiation helpers.

Thin layer over ``torch.autograd`` that fixes the few contracts the rest of the
package relies on: explicit "absent" gradients, single-sweep input
vector-Jacobian products that stay differentiable w.r.t. field parameters, and
instrumentation that counts reverse sweeps.
"""
from __future__ import annotations

import contextlib
import inspect
from typing import Callable, Iterator, Mapping

import torch

Tensor = torch.Tensor

_PRECISIONS = {"float32": torch.float32, "float64": torch.float64}


class ShapeError(ValueError):
    pass


class UnboundInputError(KeyError):
    pass


class TapeError(RuntimeError):
    """Raised when a value that should be on the tape is not."""


def set_precision(name: str) -> torch.dtype:
    """Set the default floating dtype ("float32" or "float64")."""
    try:
        dtype = _PRECISIONS[name]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}") from None
    torch.set_default_dtype(dtype)
    return dtype


@contextlib.contextmanager
def precision(name: str) -> Iterator[torch.dtype]:
    previous = torch.get_default_dtype()
    try:
        yield set_precision(name)
    finally:
        torch.set_default_dtype(previous)


class SweepCounter:
    def __init__(self) -> None:
        self.sweeps = 0


_counters: list[SweepCounter] = []


@contextlib.contextmanager
def count_sweeps() -> Iterator[SweepCounter]:
    """Count reverse sweeps issued through this module inside the block."""
    counter = SweepCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _sweep(outputs, inputs, grad_outputs=None, **kwargs):
    for counter in _counters:
        counter.sweeps += 1
    return torch.autograd.grad(outputs, inputs, grad_outputs=grad_outputs, **kwargs)


def evaluate(graph: Callable[..., object], inputs: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Run ``graph`` on named inputs and return named outputs.

    ``graph`` is any callable taking the inputs as keyword arguments. A bare
    tensor result is returned under the key ``"out"``.
    """
    params = inspect.signature(graph).parameters
    for name, p in params.items():
        if p.kind in (p.VAR_KEYWORD, p.VAR_POSITIONAL):
            continue
        if name not in inputs and p.default is p.empty:
            raise UnboundInputError(name)
    try:
        result = graph(**inputs)
    except RuntimeError as exc:
        msg = str(exc)
        if "size" in msg or "shape" in msg:
            raise ShapeError(msg) from exc
        raise
    if isinstance(result, Mapping):
        return dict(result)
    return {"out": result}


def gradient(scalar: Tensor, params: Mapping[str, Tensor], retain_graph: bool = False) -> dict[str, Tensor | None]:
    """d scalar / d p for every named parameter; ``None`` marks unreachable ones."""
    if scalar.dim() != 0:
        raise ValueError(f"gradient needs a scalar, got shape {tuple(scalar.shape)}")
    names = [n for n, p in params.items() if p.requires_grad]
    out: dict[str, Tensor | None] = {n: None for n in params}
    if not names or not scalar.requires_grad:
        return out
    grads = _sweep(scalar, [params[n] for n in names], allow_unused=True, retain_graph=retain_graph)
    out.update(zip(names, grads))
    return out


def vjp_with_output(fn: Callable[[Tensor], Tensor], x: Tensor, e: Tensor,
                    create_graph: bool = True) -> tuple[Tensor, Tensor]:
    """Evaluate ``fn`` at points ``x`` [..., 3] and return (fn(x), J^T e).

    ``fn`` must act pointwise so one reverse sweep yields J^T e for every
    point at once. With ``create_graph`` the product remains differentiable
    w.r.t. the parameters of ``fn``.
    """
    if not x.requires_grad:
        x = x.detach().requires_grad_(True)
    out = fn(x)
    if not out.requires_grad:
        raise TapeError("field output is not on the active tape")
    if out.shape != e.shape:
        raise ShapeError(f"cotangent shape {tuple(e.shape)} != output shape {tuple(out.shape)}")
    (jte,) = _sweep(out, x, grad_outputs=e, create_graph=create_graph, retain_graph=True)
    return out, jte


def input_vjp(fn: Callable[[Tensor], Tensor], x: Tensor, e: Tensor, create_graph: bool = True) -> Tensor:
    return vjp_with_output(fn, x, e, create_graph=create_graph)[1]


def full_jacobian(fn: Callable[[Tensor], Tensor], x: Tensor, create_graph: bool = True) -> Tensor:
    """Jacobian [..., 3, 3] with rows J[..., i, :] = d fn_i / d x, via three sweeps."""
    if not x.requires_grad:
        x = x.detach().requires_grad_(True)
    out = fn(x)
    if not out.requires_grad:
        raise TapeError("field output is not on the active tape")
    rows = []
    for i in range(out.shape[-1]):
        e = torch.zeros_like(out)
        e[..., i] = 1.0
        (row,) = _sweep(out, x, grad_outputs=e, create_graph=create_graph, retain_graph=True)
        rows.append(row)
    return torch.stack(rows, dim=-2)
