"""Simulated user: error detection, click placement at error centers,
escalation to full masks, and annotation-time accounting.

Clicks are placed at the taxicab distance-transform argmax of the largest
4-connected error component, with lexicographic tie-breaking throughout so a
given (prediction, ground truth) pair always yields the same click. After
``max_clicks`` failed clicks the user draws the full ground-truth mask; the
failed clicks' time is still charged unless configured otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .metrics import iou
from .model import MaskPrediction, PromptState

_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass
class ProtocolConfig:
    tau_iou: float = 0.5
    max_clicks: int = 3
    click_sigma: float = 2.0
    refund_clicks_on_escalation: bool = False
    corrections_budget: int | None = None  # None = unlimited

    def __post_init__(self):
        if not 0.0 < self.tau_iou < 1.0:
            raise ValueError("tau_iou must lie in (0, 1)")
        if self.max_clicks < 1:
            raise ValueError("max_clicks must be >= 1")


@dataclass
class TimeModel:
    t_loc: float = 1.0
    t_click: float = 1.5
    t_full_mask: float = 80.0
    count_training_latency: bool = True

    def __post_init__(self):
        if min(self.t_loc, self.t_click, self.t_full_mask) < 0:
            raise ValueError("times must be non-negative")

    @property
    def loc_ms(self) -> int:
        return round(self.t_loc * 1000)

    @property
    def click_ms(self) -> int:
        return round(self.t_click * 1000)

    @property
    def full_mask_ms(self) -> int:
        return round(self.t_full_mask * 1000)


@dataclass
class Correction:
    frame_index: int
    clicks: list[tuple[int, int, str]]  # (row, col, "positive"|"negative")
    escalated_full_mask: bool
    supervision_mask: np.ndarray
    elapsed_user_seconds: float
    elapsed_user_ms: int
    # prompt state before the user's clicks; training pairs it with the
    # supervision mask so proposals work from click-free inputs
    train_prompts: PromptState = field(default_factory=PromptState)


def detect_error(pred: MaskPrediction, gt: np.ndarray, cfg: ProtocolConfig) -> bool:
    """True iff IoU drops strictly below the trigger threshold."""
    return iou(pred.binary, gt) < cfg.tau_iou


def _component_min_pixel(labels: np.ndarray, comp: int) -> tuple[int, int]:
    flat = np.flatnonzero(labels.reshape(-1) == comp)[0]
    return np.unravel_index(flat, labels.shape)


def place_click(pred_binary: np.ndarray, gt: np.ndarray) -> tuple[int, int, str]:
    """Click at the interior-most pixel of the largest error component.

    Components are 4-connected regions of pred XOR gt; size ties go to the
    component whose first row-major pixel is smallest, and the click lands on
    the pixel with the largest taxicab distance to the component boundary
    (image border counts as boundary), first row-major pixel on ties.
    Polarity follows the ground truth at the clicked pixel.
    """
    pred_binary = np.asarray(pred_binary, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    diff = pred_binary ^ gt
    if not diff.any():
        raise ValueError("prediction equals ground truth; nothing to correct")
    labels, n = ndimage.label(diff, structure=_CROSS)
    sizes = ndimage.sum_labels(diff, labels, index=np.arange(1, n + 1))
    best = max(range(1, n + 1),
               key=lambda c: (sizes[c - 1], tuple(-v for v in _component_min_pixel(labels, c))))

    comp = labels == best
    padded = np.pad(comp, 1)
    dist = ndimage.distance_transform_cdt(padded, metric="taxicab")[1:-1, 1:-1]
    dist = np.where(comp, dist, 0)
    r, c = np.unravel_index(int(np.argmax(dist)), dist.shape)
    polarity = "positive" if gt[r, c] else "negative"
    return int(r), int(c), polarity


def simulate_correction(decode_fn, prompts: PromptState, pred: MaskPrediction,
                        gt: np.ndarray, cfg: ProtocolConfig, tm: TimeModel,
                        frame_index: int) -> tuple[Correction, PromptState, np.ndarray]:
    """Iteratively click, re-decode and recheck until the mask clears tau or
    the click budget runs out, then escalate to the full ground-truth mask.

    Returns the correction record, the prompt state after the interaction and
    the frame's final mask (the accepted post-click prediction, or the ground
    truth when escalated).
    """
    current_iou = iou(pred.binary, gt)
    if current_iou >= cfg.tau_iou:
        raise ValueError(f"IoU {current_iou:.3f} already >= tau {cfg.tau_iou}; no correction due")

    train_prompts = prompts.copy()
    prompts = prompts.copy()
    clicks: list[tuple[int, int, str]] = []
    for _ in range(cfg.max_clicks):
        r, c, polarity = place_click(pred.binary, gt)
        clicks.append((r, c, polarity))
        if polarity == "positive":
            prompts.positive_clicks.append((r, c))
        else:
            prompts.negative_clicks.append((r, c))
        pred = decode_fn(prompts)
        if iou(pred.binary, gt) >= cfg.tau_iou:
            break

    escalated = iou(pred.binary, gt) < cfg.tau_iou
    if escalated:
        supervision = gt.copy()
        prompts.mask_prompt = gt.astype(np.float64)
        final_mask = gt.copy()
    else:
        supervision = pred.binary.copy()
        final_mask = pred.binary.copy()

    charged_clicks = 0 if (escalated and cfg.refund_clicks_on_escalation) else len(clicks)
    ms = tm.loc_ms + charged_clicks * tm.click_ms + (tm.full_mask_ms if escalated else 0)
    correction = Correction(
        frame_index=frame_index,
        clicks=clicks,
        escalated_full_mask=escalated,
        supervision_mask=supervision,
        elapsed_user_seconds=ms / 1000.0,
        elapsed_user_ms=ms,
        train_prompts=train_prompts,
    )
    return correction, prompts, final_mask


def validate_adapter_proposal(proposal: MaskPrediction, gt: np.ndarray,
                              cfg: ProtocolConfig, tm: TimeModel) -> tuple[bool, float]:
    """The user looks at the adapter's refined mask: accepted iff IoU >= tau.
    The look costs t_loc either way."""
    return iou(proposal.binary, gt) >= cfg.tau_iou, tm.t_loc
