"""Independence penalties between causal and non-causal feature batches."""

from __future__ import annotations

import numpy as np

from . import nncore as nn
from .nncore import Tensor

NORM_GUARD = 1e-12
CORR_RIDGE = 1e-8


def centering_matrix(B: int) -> np.ndarray:
    return np.eye(B) - np.full((B, B), 1.0 / B)


def row_normalize(F) -> Tensor:
    """Divide every row by its L2 norm (guarded so zero rows stay zero)."""
    F = nn.as_tensor(F)
    if F.ndim != 2:
        raise ValueError(f"expected a [B, D] feature batch, got {F.shape}")
    norms = np.sqrt((F.data * F.data).sum(axis=1, keepdims=True))
    denom = np.maximum(norms, NORM_GUARD)
    out = F.data / denom
    active = norms > NORM_GUARD

    def backward(g):
        # d(x/|x|) = (g - y <g, y>) / |x| where the norm is not clamped
        proj = (g * out).sum(axis=1, keepdims=True) * active
        return ((g - out * proj) / denom,)

    return nn._make(out, (F,), backward)


def _check_pair(Fc: Tensor, Fd: Tensor) -> None:
    if Fc.ndim != 2 or Fd.ndim != 2:
        raise ValueError(f"features must be [B, D], got {Fc.shape} and {Fd.shape}")
    if Fc.shape[0] != Fd.shape[0]:
        raise ValueError(f"batch size mismatch: {Fc.shape[0]} vs {Fd.shape[0]}")


def hsic(Fc, Fd) -> Tensor:
    """Linear-kernel HSIC: trace(K H L H) / (B-1)^2 on row-normalized features.

    Evaluated as ||(H Nc)^T (H Nd)||_F^2, which equals the trace form because
    K = Nc Nc^T, L = Nd Nd^T and H is symmetric idempotent.
    """
    Fc, Fd = nn.as_tensor(Fc), nn.as_tensor(Fd)
    _check_pair(Fc, Fd)
    B = Fc.shape[0]
    if B < 2:
        raise ValueError("hsic needs a batch of at least 2 rows")
    Nc = row_normalize(Fc)
    Nd = row_normalize(Fd)
    Nc = Nc - nn.mean(Nc, axis=0, keepdims=True)
    Nd = Nd - nn.mean(Nd, axis=0, keepdims=True)
    cross = nn.matmul(Nc.T, Nd)
    return nn.tsum(nn.square(cross)) * (1.0 / (B - 1) ** 2)


def orth_penalty(Fc, Fd) -> Tensor:
    """Mean squared per-sample inner product of the row-normalized features."""
    Fc, Fd = nn.as_tensor(Fc), nn.as_tensor(Fd)
    _check_pair(Fc, Fd)
    if Fc.shape[1] != Fd.shape[1]:
        raise ValueError(f"orth_penalty needs equal feature widths, got {Fc.shape[1]} and {Fd.shape[1]}")
    dots = nn.tsum(row_normalize(Fc) * row_normalize(Fd), axis=1)
    return nn.mean(nn.square(dots))


def _standardize(F: Tensor) -> Tensor:
    centered = F - nn.mean(F, axis=0, keepdims=True)
    std = nn.sqrt(nn.mean(nn.square(centered), axis=0, keepdims=True) + CORR_RIDGE)
    return centered / std


def corr_penalty(Fc, Fd) -> Tensor:
    """Mean squared entry of the batch cross-correlation matrix."""
    Fc, Fd = nn.as_tensor(Fc), nn.as_tensor(Fd)
    _check_pair(Fc, Fd)
    B = Fc.shape[0]
    if B < 2:
        raise ValueError("corr_penalty needs a batch of at least 2 rows")
    M = nn.matmul(_standardize(Fc).T, _standardize(Fd)) * (1.0 / B)
    return nn.mean(nn.square(M))


MEASURES = {"hsic": hsic, "orth": orth_penalty, "corr": corr_penalty}
