"""Composite segmentation/diagnosis objective.

    total = w_seg * (dice + ce + w_lov * lovasz) + w_cls * cls

All segmentation terms take class probabilities shaped (K, H, W) or
(B, K, H, W) and targets as integer label maps (H, W) / (B, H, W) or as
one-hot tensors with the same shape as the probabilities.  Batches are
flattened into one pixel set.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import torch
import torch.nn.functional as F

PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    lambda_seg: float = 1.0
    lambda_lov: float = 0.3
    lambda_cls: float = 0.1
    label_smoothing: float = 0.1
    dice_eps: float = 1e-6
    # average Lovasz over foreground classes present in the batch
    lovasz_only_present: bool = True
    lovasz_include_background: bool = False
    # CE through log-softmax of the logits (same value as the probability form)
    ce_from_logits: bool = True

    def __post_init__(self) -> None:
        for name in ("lambda_seg", "lambda_lov", "lambda_cls", "dice_eps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown loss fields: {sorted(unknown)}")
        return cls(**d)


def _flatten(probs: torch.Tensor, target: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """-> probs (N, K) and one-hot target (N, K)."""
    if probs.ndim == 3:
        probs = probs.unsqueeze(0)
        target = target.unsqueeze(0)
    k = probs.shape[1]
    if target.shape == probs.shape:
        onehot = target.to(probs.dtype)
    elif target.shape == probs.shape[:1] + probs.shape[2:]:
        onehot = F.one_hot(target.long(), k).movedim(-1, 1).to(probs.dtype)
    else:
        raise ValueError(f"target shape {tuple(target.shape)} does not match probs {tuple(probs.shape)}")
    p = probs.movedim(1, -1).reshape(-1, k)
    g = onehot.movedim(1, -1).reshape(-1, k)
    return p, g


def soft_dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """1 - mean over foreground classes of (2 sum PG + eps) / (sum P + sum G + eps)."""
    p, g = _flatten(probs, target)
    p, g = p[:, 1:], g[:, 1:]
    inter = (p * g).sum(0)
    dice = (2 * inter + eps) / (p.sum(0) + g.sum(0) + eps)
    return 1.0 - dice.mean()


def pixel_ce_loss(probs: torch.Tensor, target: torch.Tensor, floor: float = PROB_FLOOR) -> torch.Tensor:
    p, g = _flatten(probs, target)
    return -(g * torch.log(p.clamp_min(floor))).sum(1).mean()


def pixel_ce_from_logits(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    logp = torch.log_softmax(logits, dim=-3 if logits.ndim == 3 else 1)
    lp, g = _flatten(logp, target)
    return -(g * lp).sum(1).mean()


def lovasz_grad(gt_sorted: torch.Tensor) -> torch.Tensor:
    """Jaccard-loss increments along the prefix chain of the sorted pixels.

    ``gt_sorted`` is the binary ground truth ordered by descending error.
    Entry k is J(first k+1) - J(first k) where J(S) = 1 - |G \\ S| / |G u S|,
    i.e. the Jaccard loss when the pixels in S are mispredicted.
    """
    gt = gt_sorted if gt_sorted.is_floating_point() else gt_sorted.to(torch.float64)
    n = gt.numel()
    if n == 0:
        return gt.new_zeros(0)
    total = gt.sum()
    intersection = total - gt.cumsum(0)
    union = total + (1 - gt).cumsum(0)
    jac = 1.0 - intersection / union
    if n > 1:
        jac = torch.cat([jac[:1], jac[1:] - jac[:-1]])
    return jac


def lovasz_class_terms(
    probs: torch.Tensor,
    target: torch.Tensor,
    only_present: bool = True,
    include_background: bool = False,
) -> dict[int, torch.Tensor]:
    """Per-class Lovasz extension of the Jaccard loss at the error vector."""
    p, g = _flatten(probs, target)
    start = 0 if include_background else 1
    out = {}
    for c in range(start, p.shape[1]):
        fg = g[:, c]
        if only_present and fg.sum() == 0:
            continue
        errors = (fg - p[:, c]).abs()
        errors_sorted, perm = torch.sort(errors, descending=True, stable=True)
        out[c] = torch.dot(errors_sorted, lovasz_grad(fg[perm]).to(errors.dtype))
    return out


def lovasz_softmax_loss(
    probs: torch.Tensor,
    target: torch.Tensor,
    only_present: bool = True,
    include_background: bool = False,
    return_flag: bool = False,
):
    """Mean Lovasz-Softmax over foreground classes present in ``target``.

    With nothing to average (no class present) the loss is 0 and, when
    ``return_flag`` is set, the flag is True.
    """
    terms = lovasz_class_terms(probs, target, only_present, include_background)
    if terms:
        loss = torch.stack(list(terms.values())).mean()
        empty = False
    else:
        loss = probs.sum() * 0.0
        empty = True
    return (loss, empty) if return_flag else loss


def smooth_targets(true_class: torch.Tensor, k: int, alpha: float, dtype=torch.float64) -> torch.Tensor:
    onehot = F.one_hot(true_class.long(), k).to(dtype)
    return (1 - alpha) * onehot + alpha / k


def label_smooth_ce(
    disease_probs: torch.Tensor, true_class, alpha: float = 0.1, floor: float = PROB_FLOOR
) -> torch.Tensor:
    """-sum_k y_k log p_k with y = (1 - alpha) onehot + alpha / K, averaged over rows."""
    probs = disease_probs if disease_probs.ndim == 2 else disease_probs.unsqueeze(0)
    tc = torch.as_tensor(true_class, device=probs.device).reshape(-1)
    k = probs.shape[1]
    if tc.numel() and (tc.min() < 0 or tc.max() >= k):
        raise ValueError(f"true class outside [0, {k})")
    y = smooth_targets(tc, k, alpha, probs.dtype)
    return -(y * torch.log(probs.clamp_min(floor))).sum(1).mean()


def subject_mean_probs(
    disease_probs: torch.Tensor, disease_target: torch.Tensor, subject_ids: Sequence[str]
) -> tuple[torch.Tensor, torch.Tensor]:
    """Average slice-level probabilities per subject (first-seen order)."""
    order: dict[str, list[int]] = {}
    for i, s in enumerate(subject_ids):
        order.setdefault(s, []).append(i)
    probs = torch.stack([disease_probs[idx].mean(0) for idx in order.values()])
    labels = torch.stack([disease_target[idx[0]] for idx in order.values()])
    return probs, labels


@dataclass
class LossBreakdown:
    total: torch.Tensor
    dice: torch.Tensor
    ce: torch.Tensor
    lovasz: torch.Tensor
    cls: torch.Tensor
    lovasz_empty: bool = False

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("total", "dice", "ce", "lovasz", "cls")}

    def csv_row(self, step: int) -> str:
        v = self.as_floats()
        return f"{step},{v['total']:.10g},{v['dice']:.10g},{v['ce']:.10g},{v['lovasz']:.10g},{v['cls']:.10g}"


CSV_HEADER = "step,total,dice,ce,lovasz,cls"


def combine(w: LossWeights, dice, ce, lovasz, cls):
    return w.lambda_seg * (dice + ce + w.lambda_lov * lovasz) + w.lambda_cls * cls


def composite_loss(
    bundle,
    seg_target: torch.Tensor,
    disease_target: torch.Tensor | None,
    w: LossWeights | None = None,
    subject_ids: Sequence[str] | None = None,
) -> LossBreakdown:
    """Weighted sum of Dice, pixel CE, Lovasz-Softmax and smoothed diagnosis CE.

    ``disease_target`` entries < 0 mark slices without a diagnosis; they are
    left out of the classification term.  With ``subject_ids`` the slice
    probabilities of each subject are averaged before the loss.
    """
    w = w or LossWeights()
    probs = bundle.seg_probs
    dice = soft_dice_loss(probs, seg_target, w.dice_eps)
    if w.ce_from_logits:
        ce = pixel_ce_from_logits(bundle.seg_logits, seg_target)
    else:
        ce = pixel_ce_loss(probs, seg_target)
    lov, empty = lovasz_softmax_loss(
        probs, seg_target, w.lovasz_only_present, w.lovasz_include_background, return_flag=True
    )
    cls = probs.new_zeros(())
    if disease_target is not None:
        dt = torch.as_tensor(disease_target, device=probs.device).reshape(-1)
        keep = dt >= 0
        if keep.any():
            dp = bundle.disease_probs[keep]
            dt = dt[keep]
            if subject_ids is not None:
                ids = [s for s, k in zip(subject_ids, keep.tolist()) if k]
                dp, dt = subject_mean_probs(dp, dt, ids)
            cls = label_smooth_ce(dp, dt, w.label_smoothing)
    total = combine(w, dice, ce, lov, cls)
    return LossBreakdown(total=total, dice=dice, ce=ce, lovasz=lov, cls=cls, lovasz_empty=empty)
