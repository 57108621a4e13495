"""Soft-IoU training objective."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import Tensor, _out, _record, add

SOFT_IOU_EPS = 1e-6


def soft_iou_loss(pred: Tensor, gt, eps: float = SOFT_IOU_EPS) -> Tensor:
    """1 - (sum p*g + eps) / (sum p + sum g - sum p*g + eps) over the whole batch."""
    g = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if pred.shape != g.shape:
        raise ValueError(f"soft_iou_loss: prediction {pred.shape} vs ground truth {g.shape}")
    p = pred.data
    g = g.astype(p.dtype, copy=False)
    inter = float(np.sum(p * g, dtype=np.float64))
    union = float(np.sum(p, dtype=np.float64)) + float(np.sum(g, dtype=np.float64)) - inter
    num, den = inter + eps, union + eps
    out = _out(np.full((1, 1, 1, 1), 1.0 - num / den, dtype=p.dtype), "soft_iou_loss")

    def back(gs):
        # d(num/den)/dp = g/den - num*(1 - g)/den^2
        grad = -(g / den - num * (1.0 - g) / den ** 2)
        return ((gs[0].reshape(()) * grad).astype(p.dtype),)

    _record("soft_iou_loss", (pred,), (out,), back)
    return out


def total_loss(o_final: Tensor, aux: Optional[Tensor], gt) -> Tensor:
    """Soft-IoU on the final map plus Soft-IoU on the auxiliary GPM map when present."""
    loss = soft_iou_loss(o_final, gt)
    if aux is not None:
        loss = add(loss, soft_iou_loss(aux, gt))
    return loss
