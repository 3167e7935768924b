"""Training objectives for online adapter updates.

Segmentation corrections are fit with a focal + dice combination at a 20:1
weight ratio; classification corrections use cross-entropy plus a hinge
margin on the true-vs-best-wrong logit gap and an L2 penalty on the adapter
residuals. Everything is differentiable through ``autodiff``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


@dataclass
class SegLossConfig:
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    w_focal: float = 20.0
    w_dice: float = 1.0
    dice_eps: float = 1.0

    def __post_init__(self):
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if not 0.0 < self.focal_alpha < 1.0:
            raise ValueError("focal_alpha must lie in (0, 1)")
        if self.dice_eps <= 0:
            raise ValueError("dice_eps must be positive")


@dataclass
class ClassLossConfig:
    margin_m: float = 10.0
    w_margin: float = 0.1
    w_l2: float = 1e-4
    temperature: float = 0.01

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def _binary_target(target, shape, dtype) -> np.ndarray:
    arr = np.asarray(target)
    if arr.shape != shape:
        raise DimensionError(f"target shape {arr.shape} != prediction shape {shape}")
    if arr.dtype != bool and not np.isin(arr, (0, 1)).all():
        raise ValueError("target mask must be binary")
    return arr.astype(dtype)


def focal_loss(logits: Tensor, target, cfg: SegLossConfig | None = None) -> Tensor:
    """Mean over pixels of -alpha_t * (1 - p_t)^gamma * log(p_t)."""
    cfg = cfg or SegLossConfig()
    t = _binary_target(target, logits.shape, logits.data.dtype)
    p = ad.sigmoid(logits)
    # p_t = p where target=1, 1-p where target=0
    p_t = ad.add(ad.mul(p, t), ad.mul(ad.add(1.0, ad.mul(p, -1.0)), 1.0 - t))
    alpha_t = cfg.focal_alpha * t + (1.0 - cfg.focal_alpha) * (1.0 - t)
    weight = ad.powc(ad.add(1.0, ad.mul(p_t, -1.0)), cfg.focal_gamma)
    per_pixel = ad.mul(ad.mul(Tensor(-alpha_t), weight), ad.log(p_t))
    return ad.mean_all(per_pixel)


def dice_loss(probs: Tensor, target, cfg: SegLossConfig | None = None) -> Tensor:
    """Soft dice: 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)."""
    cfg = cfg or SegLossConfig()
    t = _binary_target(target, probs.shape, probs.data.dtype)
    if probs.data.min() < -1e-9 or probs.data.max() > 1.0 + 1e-9:
        raise ValueError("dice_loss expects probabilities in [0, 1]")
    inter = ad.sum_all(ad.mul(probs, t))
    num = ad.add(ad.mul(inter, 2.0), cfg.dice_eps)
    den = ad.add(ad.sum_all(probs), float(t.sum()) + cfg.dice_eps)
    return ad.add(1.0, ad.mul(ad.mul(num, ad.powc(den, -1.0)), -1.0))


def seg_loss(logits: Tensor, target, cfg: SegLossConfig | None = None) -> Tensor:
    cfg = cfg or SegLossConfig()
    focal = focal_loss(logits, target, cfg)
    dice = dice_loss(ad.sigmoid(logits), target, cfg)
    return ad.add(ad.mul(focal, cfg.w_focal), ad.mul(dice, cfg.w_dice))


def class_loss(logits: Tensor, true_label: int, delta_params: list[Tensor] | None = None,
               cfg: ClassLossConfig | None = None) -> Tensor:
    """Cross-entropy + hinge margin on (s_y - s_max) + L2 on adapter residuals."""
    cfg = cfg or ClassLossConfig()
    if logits.data.ndim != 1:
        raise DimensionError(f"class_loss expects a logit vector, got {logits.shape}")
    n_classes = logits.shape[0]
    if n_classes < 2:
        raise ValueError("class_loss needs at least two classes")
    if not 0 <= true_label < n_classes:
        raise ValueError(f"label {true_label} outside [0, {n_classes})")

    # cross-entropy as logsumexp(s) - s_y, with a detached max shift
    z_max = float(logits.data.max())
    lse = ad.add(ad.log(ad.sum_all(ad.exp(ad.add(logits, -z_max)))), z_max)
    s_y = ad.pick(logits, true_label)
    ce = ad.add(lse, ad.mul(s_y, -1.0))

    others = np.arange(n_classes) != true_label
    rival = int(np.arange(n_classes)[others][np.argmax(logits.data[others])])
    s_max = ad.pick(logits, rival)
    hinge = ad.relu(ad.add(cfg.margin_m, ad.mul(ad.add(s_y, ad.mul(s_max, -1.0)), -1.0)))

    total = ad.add(ce, ad.mul(hinge, cfg.w_margin))
    if delta_params:
        l2 = ad.sum_all(ad.square(delta_params[0]))
        for p in delta_params[1:]:
            l2 = ad.add(l2, ad.sum_all(ad.square(p)))
        total = ad.add(total, ad.mul(l2, cfg.w_l2))
    return total
