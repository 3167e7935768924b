"""Desk-scale promptable segmentation model.

A frozen, deterministic per-pixel feature extractor feeds a small trainable
decoder: features are pooled to an 8x8 token grid, mixed by one self-attention
block, broadcast back to pixels and concatenated with the raw features, then a
two-layer MLP emits per-pixel mask logits. A separate two-layer head predicts
the mask's own IoU from the mean token. The attention projections and the two
MLP layers are the adapter host layers.

Feature channels (D=20): intensity, normalized row/col, Gaussian-blurred
intensity at sigma 1/2/4, gradient magnitude, 8 fixed seeded random
projections of the 5x5 patch, a constant bias channel, and 4 prompt channels
(positive clicks, negative clicks, mask prompt, memory mask).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import adapters as ada
from . import autodiff as ad
from . import litt
from .autodiff import Tensor

FEATURE_DIM = 20
STATIC_DIM = 16
PROMPT_DIM = 4
TOKEN_GRID = 8
TOKEN_DIM = 32
MLP_HIDDEN = 64
IOU_HIDDEN = 16
PIXEL_IN = FEATURE_DIM + TOKEN_DIM

BLUR_SIGMAS = (1.0, 2.0, 4.0)
PATCH_SIZE = 5
N_PROJECTIONS = 8
_PROJECTION_SEED = 870516  # fixed: projections are part of the frozen architecture

LAYER_DIMS: dict[str, tuple[int, int]] = {
    "token_proj": (FEATURE_DIM, TOKEN_DIM),
    "attn_q": (TOKEN_DIM, TOKEN_DIM),
    "attn_k": (TOKEN_DIM, TOKEN_DIM),
    "attn_v": (TOKEN_DIM, TOKEN_DIM),
    "attn_out": (TOKEN_DIM, TOKEN_DIM),
    "mlp1": (PIXEL_IN, MLP_HIDDEN),
    "mlp2": (MLP_HIDDEN, MLP_HIDDEN),
    "mask_head": (MLP_HIDDEN, 1),
    "iou1": (TOKEN_DIM, IOU_HIDDEN),
    "iou2": (IOU_HIDDEN, 1),
}

DECODER_LAYERS = ("token_proj", "attn_q", "attn_k", "attn_v", "attn_out",
                  "mlp1", "mlp2", "mask_head")  # iou head stays frozen in fine-tune variants


class PromptError(ValueError):
    """Prompt coordinates fall outside the frame."""


@dataclass
class Frame:
    index: int
    image: np.ndarray  # (H, W) grayscale in [0, 1]


@dataclass
class PromptState:
    positive_clicks: list[tuple[int, int]] = field(default_factory=list)
    negative_clicks: list[tuple[int, int]] = field(default_factory=list)
    mask_prompt: np.ndarray | None = None
    memory_mask: np.ndarray | None = None

    def copy(self) -> "PromptState":
        return PromptState(list(self.positive_clicks), list(self.negative_clicks),
                           None if self.mask_prompt is None else self.mask_prompt.copy(),
                           None if self.memory_mask is None else self.memory_mask.copy())


@dataclass
class MaskPrediction:
    logits: Tensor            # (H, W), graph-connected when an adapter is training
    probs: np.ndarray         # (H, W) in [0, 1]
    binary: np.ndarray        # (H, W) bool, probs >= 0.5
    predicted_iou: float
    iou_tensor: Tensor        # scalar, for pretraining supervision

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape


class BaseWeights:
    """Named linear layers of the decoder; frozen unless trainable_layers is set."""

    def __init__(self, tensors: dict[str, dict[str, Tensor]],
                 trainable_layers: tuple[str, ...] = (),
                 seed: int | None = None, config_hash: str = ""):
        self.tensors = tensors
        self.trainable_layers = tuple(trainable_layers)
        self.seed = seed
        self.config_hash = config_hash
        self.update_count = 0
        for name, pair in tensors.items():
            trainable = name in self.trainable_layers
            pair["w"].requires_grad = trainable
            pair["b"].requires_grad = trainable

    def weight(self, name: str) -> Tensor:
        return self.tensors[name]["w"]

    def bias(self, name: str) -> Tensor:
        return self.tensors[name]["b"]

    def layer_dims(self) -> dict[str, tuple[int, int]]:
        return {name: (pair["w"].shape[0], pair["w"].shape[1])
                for name, pair in self.tensors.items()}

    def params(self) -> list[Tensor]:
        out = []
        for name in self.trainable_layers:
            out.extend([self.tensors[name]["w"], self.tensors[name]["b"]])
        return out

    def param_count(self) -> int:
        return sum(p["w"].data.size + p["b"].data.size for p in self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, pair in self.tensors.items():
            out[f"{name}.w"] = pair["w"].data
            out[f"{name}.b"] = pair["b"].data
        return out

    def clone(self, trainable_layers: tuple[str, ...] = ()) -> "BaseWeights":
        tensors = {name: {"w": Tensor(pair["w"].data.copy()),
                          "b": Tensor(pair["b"].data.copy())}
                   for name, pair in self.tensors.items()}
        return BaseWeights(tensors, trainable_layers, self.seed, self.config_hash)

    def quantized_f32(self) -> "BaseWeights":
        """Round every value to float32 so in-memory state matches serialized state."""
        return self.cast(np.float32)

    def cast(self, dtype) -> "BaseWeights":
        tensors = {name: {"w": Tensor(pair["w"].data.astype(dtype)),
                          "b": Tensor(pair["b"].data.astype(dtype))}
                   for name, pair in self.tensors.items()}
        return BaseWeights(tensors, (), self.seed, self.config_hash)

    def save(self, directory: str | Path) -> None:
        litt.save_bundle(directory, self.arrays(),
                         meta={"seed": self.seed, "config_hash": self.config_hash,
                               "kind": "base-weights"})

    @classmethod
    def load(cls, directory: str | Path) -> "BaseWeights":
        arrays, manifest = litt.load_bundle(directory)
        names = sorted({key.rsplit(".", 1)[0] for key in arrays})
        tensors = {name: {"w": Tensor(arrays[f"{name}.w"]),
                          "b": Tensor(arrays[f"{name}.b"])} for name in names}
        return cls(tensors, (), manifest.get("seed"), manifest.get("config_hash", ""))


def init_base_weights(seed: int, trainable: bool = False) -> BaseWeights:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    tensors = {}
    for name, (d_in, d_out) in LAYER_DIMS.items():
        limit = np.sqrt(6.0 / (d_in + d_out))
        w = Tensor(rng.uniform(-limit, limit, size=(d_in, d_out)).astype(np.float32))
        b = Tensor(np.zeros(d_out, dtype=np.float32))
        tensors[name] = {"w": w, "b": b}
    layers = tuple(LAYER_DIMS) if trainable else ()
    return BaseWeights(tensors, layers, seed=seed)


# ---------------------------------------------------------------------------
# feature extraction (frozen, deterministic, no trainable parameters)


def _projection_kernels() -> np.ndarray:
    rng = np.random.default_rng(_PROJECTION_SEED)
    kernels = rng.standard_normal((N_PROJECTIONS, PATCH_SIZE, PATCH_SIZE))
    return (kernels / PATCH_SIZE).astype(np.float32)  # keep responses O(1)


_KERNELS = _projection_kernels()


def static_channels(frame: Frame) -> np.ndarray:
    """The 16 prompt-independent channels of a frame, (H, W, 16)."""
    img = np.asarray(frame.image, dtype=np.float64)
    h, w = img.shape
    rows, cols = np.mgrid[0:h, 0:w]
    channels = [img,
                rows / max(h - 1, 1),
                cols / max(w - 1, 1)]
    for sigma in BLUR_SIGMAS:
        channels.append(ndimage.gaussian_filter(img, sigma=sigma, mode="nearest"))
    gy, gx = np.gradient(img)
    channels.append(np.sqrt(gx * gx + gy * gy))
    for k in range(N_PROJECTIONS):
        channels.append(ndimage.correlate(img, _KERNELS[k].astype(np.float64),
                                          mode="constant", cval=0.0))
    channels.append(np.ones_like(img))
    return np.stack(channels, axis=2).astype(np.float32)


def _click_heatmap(clicks, shape, sigma: float) -> np.ndarray:
    h, w = shape
    heat = np.zeros((h, w))
    rows, cols = np.mgrid[0:h, 0:w]
    for r, c in clicks:
        if not (0 <= r < h and 0 <= c < w):
            raise PromptError(f"click ({r}, {c}) outside frame {h}x{w}")
        bump = np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2.0 * sigma * sigma))
        heat = np.maximum(heat, bump)
    return heat


def prompt_channels(prompts: PromptState, shape: tuple[int, int],
                    click_sigma: float = 2.0) -> np.ndarray:
    h, w = shape
    pos = _click_heatmap(prompts.positive_clicks, shape, click_sigma)
    neg = _click_heatmap(prompts.negative_clicks, shape, click_sigma)
    mask = np.zeros(shape) if prompts.mask_prompt is None \
        else np.asarray(prompts.mask_prompt, dtype=np.float64)
    mem = np.zeros(shape) if prompts.memory_mask is None \
        else np.asarray(prompts.memory_mask, dtype=np.float64)
    for name, arr in (("mask_prompt", mask), ("memory_mask", mem)):
        if arr.shape != (h, w):
            raise PromptError(f"{name} shape {arr.shape} != frame {h}x{w}")
    return np.stack([pos, neg, mask, mem], axis=2).astype(np.float32)


def assemble_features(static: np.ndarray, prompts: PromptState,
                      click_sigma: float = 2.0) -> np.ndarray:
    return np.concatenate([static, prompt_channels(prompts, static.shape[:2], click_sigma)],
                          axis=2)


def extract_features(frame: Frame, prompts: PromptState,
                     click_sigma: float = 2.0) -> Tensor:
    return Tensor(assemble_features(static_channels(frame), prompts, click_sigma))


# ---------------------------------------------------------------------------
# decoding

_POOL_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _pool_maps(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """(cell index per pixel, pooling matrix (tokens x pixels)) for an HxW frame."""
    key = (h, w)
    if key not in _POOL_CACHE:
        if h % TOKEN_GRID or w % TOKEN_GRID:
            raise ValueError(f"frame {h}x{w} not divisible by token grid {TOKEN_GRID}")
        ch, cw = h // TOKEN_GRID, w // TOKEN_GRID
        rows, cols = np.mgrid[0:h, 0:w]
        cell = (rows // ch) * TOKEN_GRID + (cols // cw)
        cell = cell.reshape(-1)
        pool = np.zeros((TOKEN_GRID * TOKEN_GRID, h * w), dtype=np.float32)
        pool[cell, np.arange(h * w)] = 1.0 / (ch * cw)
        _POOL_CACHE[key] = (cell, pool)
    return _POOL_CACHE[key]


def _host_linear(name: str, x: Tensor, weights: BaseWeights,
                 adapter: ada.LoraAdapter | None, mode: str,
                 rng: np.random.Generator | None, relu_out: bool = False) -> Tensor:
    w, b = weights.weight(name), weights.bias(name)
    if adapter is not None and name in adapter.layers:
        layer = adapter.layers[name]
        base = ad.matmul(x, w)
        dropped = ad.dropout(x, adapter.config.dropout, rng, training=(mode == "train"))
        low = ad.matmul(dropped, ad.transpose(layer.a))
        residual = ad.matmul(ad.mul(low, adapter.scale), ad.transpose(layer.b))
        if relu_out:
            return ad.residual_bias_relu(base, residual, b)
        return ad.add(ad.add(base, residual), b)
    return ad.linear(x, w, b, relu_out=relu_out)


def decode_mask(features: Tensor | np.ndarray, weights: BaseWeights,
                adapter: ada.LoraAdapter | ada.MemoryAdapter | None = None,
                mode: str = "eval",
                rng: np.random.Generator | None = None) -> MaskPrediction:
    """Run the decoder over per-pixel features.

    ``adapter`` may be a LoRA set on the host layers, a memory adapter over
    the prompt channels, or None. In train mode adapter dropout draws from
    ``rng``; eval mode is deterministic.
    """
    feats = features.data if isinstance(features, Tensor) else np.asarray(features)
    if feats.ndim != 3 or feats.shape[2] != FEATURE_DIM:
        raise ad.DimensionError(f"features must be (H, W, {FEATURE_DIM}), got {feats.shape}")
    h, w, _ = feats.shape
    n_pix = h * w
    flat = feats.reshape(n_pix, FEATURE_DIM)
    _, pool = _pool_maps(h, w)
    pool = pool.astype(feats.dtype, copy=False)

    lora = adapter if isinstance(adapter, ada.LoraAdapter) else None
    if isinstance(adapter, ada.MemoryAdapter):
        prompt_t = ada.memory_adapter_forward(Tensor(flat[:, STATIC_DIM:]), adapter)
        pix_feats = ad.concat_cols(Tensor(flat[:, :STATIC_DIM]), prompt_t)
        pooled_static = Tensor(pool @ flat[:, :STATIC_DIM])
        pooled_prompt = ad.matmul(Tensor(pool), prompt_t)
        pooled = ad.concat_cols(pooled_static, pooled_prompt)
    else:
        pix_feats = Tensor(flat)
        pooled = Tensor(pool @ flat)

    tokens0 = _host_linear("token_proj", pooled, weights, lora, mode, rng)
    q = _host_linear("attn_q", tokens0, weights, lora, mode, rng)
    k = _host_linear("attn_k", tokens0, weights, lora, mode, rng)
    v = _host_linear("attn_v", tokens0, weights, lora, mode, rng)
    attn = ad.softmax_rows(ad.mul(ad.matmul(q, ad.transpose(k)), float(1.0 / np.sqrt(TOKEN_DIM))))
    mixed = _host_linear("attn_out", ad.matmul(attn, v), weights, lora, mode, rng)
    tokens = ad.add(tokens0, mixed)

    token_up = ad.upsample_cells(tokens, TOKEN_GRID, h // TOKEN_GRID, w // TOKEN_GRID)
    pix = ad.concat_cols(pix_feats, token_up)
    h1 = _host_linear("mlp1", pix, weights, lora, mode, rng, relu_out=True)
    h2 = _host_linear("mlp2", h1, weights, lora, mode, rng, relu_out=True)
    logit_col = _host_linear("mask_head", h2, weights, lora, mode, rng)
    logits = ad.reshape(logit_col, (h, w))

    token_mean = ad.matmul(Tensor(np.full((1, TOKEN_GRID * TOKEN_GRID),
                                          1.0 / (TOKEN_GRID * TOKEN_GRID),
                                          dtype=feats.dtype)), tokens)
    iou_h = _host_linear("iou1", token_mean, weights, lora, mode, rng, relu_out=True)
    iou_t = ad.reshape(ad.sigmoid(_host_linear("iou2", iou_h, weights, lora, mode, rng)), ())

    probs = ad.sigmoid_np(logits.data)
    return MaskPrediction(logits=logits, probs=probs, binary=probs >= 0.5,
                          predicted_iou=float(iou_t.data), iou_tensor=iou_t)


# ---------------------------------------------------------------------------
# offline pretraining


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-3
    iou_loss_weight: float = 1.0
    save_dir: str | Path | None = None
    # prompt synthesis mix: how often frames are paired with a clean previous
    # mask, a jittered one, clicks, or a full mask prompt
    p_memory_clean: float = 0.45
    p_memory_jittered: float = 0.25
    p_positive_clicks: float = 0.35
    p_negative_clicks: float = 0.25
    p_mask_prompt: float = 0.15
    click_sigma: float = 2.0

    def digest(self) -> str:
        blob = json.dumps({k: str(v) for k, v in self.__dict__.items()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _jitter_mask(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    dr, dc = rng.integers(-4, 5, size=2)
    out = np.roll(mask, (dr, dc), axis=(0, 1))
    if rng.random() < 0.5:
        out = ndimage.binary_erosion(out, iterations=int(rng.integers(1, 3)))
    return out.astype(np.float64)


def _sample_points(mask: np.ndarray, count: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    coords = np.argwhere(mask)
    if len(coords) == 0:
        return []
    picks = rng.integers(0, len(coords), size=count)
    return [tuple(int(v) for v in coords[i]) for i in picks]


def _synthesize_prompts(masks: list[np.ndarray], t: int, rng: np.random.Generator,
                        cfg: PretrainConfig) -> PromptState:
    prompts = PromptState()
    gt = masks[t]
    u = rng.random()
    if u < cfg.p_memory_clean:
        prompts.memory_mask = masks[t - 1].astype(np.float64)
    elif u < cfg.p_memory_clean + cfg.p_memory_jittered:
        prompts.memory_mask = _jitter_mask(masks[t - 1], rng)
    if rng.random() < cfg.p_positive_clicks and gt.any():
        prompts.positive_clicks = _sample_points(gt, int(rng.integers(1, 4)), rng)
    if rng.random() < cfg.p_negative_clicks:
        ring = ndimage.binary_dilation(gt, iterations=6) & ~gt
        region = ring if ring.any() else ~gt
        prompts.negative_clicks = _sample_points(region, int(rng.integers(1, 3)), rng)
    if rng.random() < cfg.p_mask_prompt:
        prompts.mask_prompt = gt.astype(np.float64)
    return prompts


def pretrain_base(train_scenarios, cfg: PretrainConfig, seed: int,
                  progress=None) -> BaseWeights:
    """Full-parameter Adam training on synthetic scenarios.

    Supervises mask logits with the segmentation loss and the IoU head with
    the squared error against the true IoU of the model's own binary mask.
    Deterministic given the seed; weights are rounded to float32 at the end so
    the returned model equals its serialized form bit for bit.
    """
    from . import data as synth
    from .losses import SegLossConfig, seg_loss
    from .metrics import iou

    if not train_scenarios:
        raise ValueError("pretrain_base needs at least one scenario")
    videos = [synth.generate_video(s) for s in train_scenarios]
    statics: dict[tuple[int, int], np.ndarray] = {}
    pool = [(vi, t) for vi, v in enumerate(videos) for t in range(1, len(v.images))]

    weights = init_base_weights(seed, trainable=True)
    weights.config_hash = cfg.digest()
    opt = ada.Adam(weights.params(), lr=cfg.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
    seg_cfg = SegLossConfig()

    for step in range(cfg.steps):
        losses = []
        for _ in range(cfg.batch_size):
            vi, t = pool[int(rng.integers(0, len(pool)))]
            video = videos[vi]
            if (vi, t) not in statics:
                statics[(vi, t)] = static_channels(Frame(t, video.images[t]))
            prompts = _synthesize_prompts(video.masks, t, rng, cfg)
            feats = assemble_features(statics[(vi, t)], prompts, cfg.click_sigma)
            pred = decode_mask(feats, weights)
            gt = video.masks[t]
            actual = iou(pred.binary, gt)
            sample_loss = ad.add(seg_loss(pred.logits, gt, seg_cfg),
                                 ad.mul(ad.square(ad.add(pred.iou_tensor, -actual)),
                                        cfg.iou_loss_weight))
            losses.append(sample_loss)
        total = losses[0]
        for extra in losses[1:]:
            total = ad.add(total, extra)
        total = ad.mul(total, 1.0 / len(losses))
        opt.zero_grad()
        ad.backward(total)
        opt.step()
        if progress is not None and (step + 1) % 100 == 0:
            progress(step + 1, cfg.steps, total.item())

    frozen = weights.quantized_f32()
    frozen.seed = seed
    frozen.config_hash = cfg.digest()
    if cfg.save_dir is not None:
        frozen.save(cfg.save_dir)
    return frozen


def propagation_iou(weights: BaseWeights, video, adapter=None) -> list[float]:
    """Per-frame IoU when each frame sees the previous ground truth as memory."""
    from .metrics import iou

    out = []
    for t in range(1, len(video.images)):
        prompts = PromptState(memory_mask=video.masks[t - 1].astype(np.float64))
        feats = assemble_features(static_channels(Frame(t, video.images[t])), prompts)
        pred = decode_mask(feats, weights, adapter=adapter)
        out.append(iou(pred.binary, video.masks[t]))
    return out
