"""Classification, independence and consistency terms of the training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nncore as nn
from .hsic import MEASURES
from .model import BranchOutputs
from .nncore import Tensor

CON_MODES = ("symmetric-sum", "literal")
CLS_MODES = ("default", "all-pairs")
L1_REDUCTIONS = ("mean", "sum")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.1

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be non-negative, got alpha={self.alpha}, beta={self.beta}")


@dataclass
class LossBreakdown:
    l_cls: float
    l_ind: float
    l_con: float
    total: float
    margin: float
    alpha: float
    beta: float
    graph: Tensor | None = None  # differentiable total

    def as_dict(self) -> dict[str, float]:
        return {"l_cls": self.l_cls, "l_ind": self.l_ind, "l_con": self.l_con,
                "total": self.total, "margin": self.margin}


def loss_cls(out: BranchOutputs, y, d, mode: str = "default") -> Tensor:
    """Activity CE on original and augmented causal features plus domain CE.

    ``all-pairs`` also trains the domain head on augmented features with the
    original domain label.
    """
    if mode not in CLS_MODES:
        raise ValueError(f"unknown classification mode {mode!r}")
    loss = nn.softmax_cross_entropy(out.act_logits, y)
    if out.act_logits_aug is not None:
        loss = loss + nn.softmax_cross_entropy(out.act_logits_aug, y)
    if out.dom_logits is not None:
        loss = loss + nn.softmax_cross_entropy(out.dom_logits, d)
        if mode == "all-pairs" and out.dom_logits_aug is not None:
            loss = loss + nn.softmax_cross_entropy(out.dom_logits_aug, d)
    return loss


def loss_ind(out: BranchOutputs, measure: str = "hsic") -> Tensor:
    """Independence penalty summed over the four (causal, non-causal) pairings of x and IDS(x)."""
    fn = MEASURES[measure]
    cs = [f for f in (out.Fc_x, out.Fc_a) if f is not None]
    ds = [f for f in (out.Fd_x, out.Fd_a) if f is not None]
    if not ds:
        raise ValueError("independence loss needs the non-causal branch")
    total = None
    for fc in cs:
        for fd in ds:
            term = fn(fc, fd)
            total = term if total is None else total + term
    return total


def l1_rows(a, b, reduce: str = "mean") -> Tensor:
    """Per-sample L1 distance; ``mean`` divides by the feature width."""
    if reduce not in L1_REDUCTIONS:
        raise ValueError(f"unknown L1 reduction {reduce!r}")
    d = nn.tsum(nn.tabs(a - b), axis=1)
    return d * (1.0 / a.shape[1]) if reduce == "mean" else d


def _noncausal_distances(out: BranchOutputs, reduce: str) -> tuple[Tensor, Tensor]:
    return l1_rows(out.Fd_x, out.cdpl_d_a, reduce), l1_rows(out.cdpl_d_x, out.Fd_a, reduce)


def batch_margin(out: BranchOutputs, reduce: str = "mean") -> float:
    """Largest per-sample L1 distance among the two non-causal terms (a constant)."""
    d1, d2 = _noncausal_distances(out, reduce)
    return float(max(d1.data.max(), d2.data.max()))


def loss_con(out: BranchOutputs, mode: str = "symmetric-sum", stopgrad: bool = False,
             margin: float | None = None, reduce: str = "mean") -> Tensor:
    """Pull causal features of x and IDS(x) together through CDPL, push non-causal ones up to the margin."""
    if mode not in CON_MODES:
        raise ValueError(f"unknown consistency mode {mode!r}")
    if out.cdpl_c_x is None:
        raise ValueError("consistency loss needs augmented features and projections")
    fc_x, fc_a = out.Fc_x, out.Fc_a
    if stopgrad:
        fc_x, fc_a = fc_x.detach(), fc_a.detach()
    c1 = l1_rows(fc_x, out.cdpl_c_a, reduce)
    c2 = l1_rows(out.cdpl_c_x, fc_a, reduce)
    causal = c1 + c2 if mode == "symmetric-sum" else c1 - c2
    m = batch_margin(out, reduce) if margin is None else margin
    d1, d2 = _noncausal_distances(out, reduce)
    hinge = nn.minimum(d1 - m, 0.0) + nn.minimum(d2 - m, 0.0)
    return nn.mean(causal - hinge)


def total_loss(out: BranchOutputs, y, d, weights: LossWeights = LossWeights(), con_mode: str = "symmetric-sum",
               cls_mode: str = "default", measure: str = "hsic", use_ind: bool = True, use_con: bool = True,
               stopgrad: bool = False, l1_reduce: str = "mean") -> LossBreakdown:
    """Weighted objective; switched-off terms contribute nothing to the graph."""
    alpha = weights.alpha if use_ind else 0.0
    beta = weights.beta if use_con else 0.0
    parts = {"l_cls": loss_cls(out, y, d, cls_mode)}
    has_pairs = out.Fd_x is not None
    has_con = has_pairs and out.cdpl_c_x is not None
    margin = batch_margin(out, l1_reduce) if has_con else 0.0
    # zero-weight terms are still reported, but kept off the graph
    if has_pairs:
        if alpha > 0:
            parts["l_ind"] = loss_ind(out, measure)
        else:
            with nn.no_grad():
                parts["l_ind"] = loss_ind(out, measure)
    if has_con:
        if beta > 0:
            parts["l_con"] = loss_con(out, con_mode, stopgrad, margin, l1_reduce)
        else:
            with nn.no_grad():
                parts["l_con"] = loss_con(out, con_mode, stopgrad, margin, l1_reduce)
    for name, t in parts.items():
        if not np.isfinite(t.data):
            raise FloatingPointError(f"non-finite loss component {name}")
    graph = parts["l_cls"]
    if alpha > 0 and "l_ind" in parts:
        graph = graph + parts["l_ind"] * alpha
    if beta > 0 and "l_con" in parts:
        graph = graph + parts["l_con"] * beta
    vals = {k: float(parts[k].data) if k in parts else 0.0 for k in ("l_cls", "l_ind", "l_con")}
    total = vals["l_cls"] + alpha * vals["l_ind"] + beta * vals["l_con"]
    return LossBreakdown(vals["l_cls"], vals["l_ind"], vals["l_con"], total, margin, alpha, beta, graph)
