"""Differentiable tensor operations on top of torch autograd.

Only the pieces torch does not provide directly live here: shape-checked
contractions in the notation of the model, symmetric eigendecomposition and
matrix logarithm with guarded adjoints, a parameter store with constraint
tags, and a central-difference gradient checker.
"""

from __future__ import annotations

import os
from collections import OrderedDict

import torch

from .errors import ConstraintViolationError, EigenConvergenceError, ShapeMismatchError

GAP_GUARD = 1e-10
EIG_FLOOR = 1e-6

FREE, NONNEGATIVE, SIMPLEX_SUB_ONE = "free", "nonnegative", "simplex-sub-one"


def default_dtype() -> torch.dtype:
    """Precision from ``BAM_PRECISION`` (``f64`` unless set to ``f32``)."""
    return torch.float32 if os.environ.get("BAM_PRECISION", "f64") == "f32" else torch.float64


def contract(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``C[..., l] = sum_k A[..., k] B[k, l]`` (tensor times matrix over the last axis)."""
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatchError(f"cannot contract {tuple(a.shape)} with {tuple(b.shape)} over the last axis")
    return a @ b


def parallel_matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched matrix product over the leading axis: ``(I,J,K) x (I,K,L) -> (I,J,L)``."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeMismatchError(f"cannot batch-multiply {tuple(a.shape)} with {tuple(b.shape)}")
    return torch.bmm(a, b)


def permute_axes(a: torch.Tensor, perm) -> torch.Tensor:
    if sorted(perm) != list(range(a.ndim)):
        raise ShapeMismatchError(f"permutation {tuple(perm)} does not match a {a.ndim}-axis tensor")
    return a.permute(*perm)


def symmetrize(s: torch.Tensor) -> torch.Tensor:
    return 0.5 * (s + s.transpose(-1, -2))


def _eigh(s):
    try:
        return torch.linalg.eigh(s)
    except RuntimeError as exc:  # LAPACK failed to converge
        raise EigenConvergenceError(str(exc)) from exc


def _guard(gap):
    small = gap.abs() < GAP_GUARD
    return torch.where(small, torch.where(gap < 0, -GAP_GUARD, GAP_GUARD), gap)


class _SymEig(torch.autograd.Function):
    @staticmethod
    def forward(ctx, s):
        vals, vecs = _eigh(symmetrize(s))
        ctx.save_for_backward(vals, vecs)
        return vals, vecs

    @staticmethod
    def backward(ctx, g_vals, g_vecs):
        vals, vecs = ctx.saved_tensors
        vt = vecs.transpose(-1, -2)
        inner = torch.diag_embed(g_vals) if g_vals is not None else torch.zeros_like(vecs)
        if g_vecs is not None:
            gap = vals.unsqueeze(-2) - vals.unsqueeze(-1)  # gap[i, j] = l_j - l_i
            f = 1.0 / _guard(gap)
            f = f - torch.diag_embed(torch.diagonal(f, dim1=-2, dim2=-1))
            inner = inner + f * (vt @ g_vecs)
        return symmetrize(vecs @ inner @ vt)


def sym_eig(s: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Eigenvalues (ascending) and orthonormal eigenvectors of symmetric ``s``.

    Works on a single matrix or a stack ``(..., d, d)``.
    """
    return _SymEig.apply(s)


class _LogEig(torch.autograd.Function):
    # Backward uses divided differences of log, which stays exact when
    # eigenvalues coincide (e.g. identity inputs).
    @staticmethod
    def forward(ctx, s, floor):
        vals, vecs = _eigh(symmetrize(s))
        clamped = vals.clamp_min(floor)
        out = vecs @ torch.diag_embed(clamped.log()) @ vecs.transpose(-1, -2)
        ctx.save_for_backward(vals, vecs, clamped)
        ctx.floor = floor
        return symmetrize(out)

    @staticmethod
    def backward(ctx, grad):
        vals, vecs, clamped = ctx.saved_tensors
        deriv = torch.where(vals > ctx.floor, 1.0 / clamped, torch.zeros_like(clamped))
        a, b = clamped.unsqueeze(-1), clamped.unsqueeze(-2)
        gap = a - b
        # log(a) - log(b) = log1p(gap / b) avoids cancellation for nearby eigenvalues;
        # within 1e-4 relative the mean of 1/a and 1/b is accurate to ~x^2 / 6
        rel = gap / b
        close = rel.abs() < 1e-4
        mean_deriv = 0.5 * (deriv.unsqueeze(-1) + deriv.unsqueeze(-2))
        safe_gap = torch.where(close, torch.ones_like(gap), gap)
        ratio = torch.where(close, mean_deriv, torch.log1p(torch.where(close, torch.zeros_like(rel), rel)) / safe_gap)
        vt = vecs.transpose(-1, -2)
        inner = ratio * (vt @ symmetrize(grad) @ vecs)
        return vecs @ inner @ vt, None


def log_eig(s: torch.Tensor, floor: float = EIG_FLOOR) -> torch.Tensor:
    """Matrix logarithm ``U log(max(D, floor)) U^T`` of a symmetric stack."""
    return _LogEig.apply(s, floor)


# --------------------------------------------------------------------------
# parameters


def tag(param: torch.nn.Parameter, constraint: str) -> torch.nn.Parameter:
    param.constraint = constraint
    return param


class ParamStore:
    """Named trainable tensors with constraint tags.

    Built from a module's ``named_parameters``; tags come from
    :func:`tag` and default to ``free``.
    """

    def __init__(self, params: "OrderedDict[str, torch.nn.Parameter]"):
        self.params = OrderedDict(params)

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParamStore":
        return cls(OrderedDict(module.named_parameters()))

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def __getitem__(self, name):
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def constraint(self, name: str) -> str:
        return getattr(self.params[name], "constraint", FREE)

    @torch.no_grad()
    def project(self) -> None:
        for name, p in self.params.items():
            if self.constraint(name) == NONNEGATIVE:
                p.clamp_(min=0.0)

    def check(self) -> None:
        for name, p in self.params.items():
            if self.constraint(name) == NONNEGATIVE and bool((p < 0).any()):
                raise ConstraintViolationError(f"parameter {name} has negative entries")

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict((k, v.detach().clone()) for k, v in self.params.items())


def grad_check(f, params: ParamStore, eps: float = 1e-6, names=None) -> float:
    """Max relative error between autograd and central-difference gradients.

    ``f`` is a zero-argument callable returning a scalar tensor.
    """
    params.zero_grad()
    f().backward()
    worst = 0.0
    for name, p in params:
        if names is not None and name not in names:
            continue
        analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        flat = p.data.view(-1)
        for k in range(flat.numel()):
            orig = flat[k].item()
            with torch.no_grad():
                flat[k] = orig + eps
                up = f().item()
                flat[k] = orig - eps
                down = f().item()
                flat[k] = orig
            num = (up - down) / (2 * eps)
            ana = analytic.view(-1)[k].item()
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    params.zero_grad()
    return worst
