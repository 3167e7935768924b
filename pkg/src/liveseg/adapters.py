"""Trainable residual modules attached to the frozen model, plus the online
update loop that fits them to user corrections.

A LoRA layer augments a frozen weight as ``y = x @ W0 + (alpha/r) * drop(x) @ A^T @ B^T``
with A Gaussian-initialized and B zero, so a fresh adapter is an exact no-op.
The memory adapter is a per-pixel bottleneck-with-residual over the prompt and
memory channels, zero-initialized to the identity.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_HOST_LAYERS = ("attn_q", "attn_k", "attn_v", "attn_out", "mlp1", "mlp2")

LORA_INIT_STD = 0.02


@dataclass
class LoraConfig:
    rank: int = 4
    alpha: float = 4.0
    dropout: float = 0.1
    learning_rate: float = 1e-4
    max_epochs: int = 40
    host_layers: tuple[str, ...] = DEFAULT_HOST_LAYERS
    loss_floor: float = 1e-3
    iou_target: float = 0.95

    def __post_init__(self):
        if self.rank <= 0:
            raise ValueError("rank must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        self.host_layers = tuple(self.host_layers)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @classmethod
    def classification(cls, **overrides) -> "LoraConfig":
        """Higher-rank preset for the streaming classification task."""
        base = dict(rank=8, alpha=16.0, host_layers=("feature_proj",))
        base.update(overrides)
        return cls(**base)


@dataclass
class LoraLayer:
    a: Tensor  # (rank, d_in)
    b: Tensor  # (d_out, rank)


class LoraAdapter:
    def __init__(self, cfg: LoraConfig, host_dims: dict[str, tuple[int, int]],
                 seed: int, generation: int = 0, dtype=np.float32):
        unknown = [n for n in cfg.host_layers if n not in host_dims]
        if unknown:
            raise KeyError(f"unknown host layers {unknown}; known: {sorted(host_dims)}")
        self.config = cfg
        self.host_dims = {n: host_dims[n] for n in cfg.host_layers}
        self.seed = seed
        self.generation = generation
        self.update_count = 0
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence([seed, generation]))
        self.layers: dict[str, LoraLayer] = {}
        for name in cfg.host_layers:
            d_in, d_out = host_dims[name]
            a = ad.randn((cfg.rank, d_in), rng, std=LORA_INIT_STD,
                         requires_grad=True, dtype=dtype)
            b = ad.zeros((d_out, cfg.rank), requires_grad=True, dtype=dtype)
            self.layers[name] = LoraLayer(a=a, b=b)

    @property
    def scale(self) -> float:
        return self.config.scale

    def params(self) -> list[Tensor]:
        out = []
        for name in self.config.host_layers:
            layer = self.layers[name]
            out.extend([layer.a, layer.b])
        return out

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params())

    def delta_tensors(self) -> list[Tensor]:
        """In-graph ΔW = B @ A per host layer (for L2 regularization)."""
        return [ad.matmul(self.layers[n].b, self.layers[n].a)
                for n in self.config.host_layers]

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self.layers.items():
            out[f"{name}.a"] = layer.a.data
            out[f"{name}.b"] = layer.b.data
        return out


def lora_init(cfg: LoraConfig, host_dims: dict[str, tuple[int, int]], seed: int,
              dtype=np.float32) -> LoraAdapter:
    return LoraAdapter(cfg, host_dims, seed, dtype=dtype)


def lora_apply(w0: Tensor | np.ndarray, layer: LoraLayer, scale: float, x: Tensor,
               mode: str = "eval", dropout_rate: float = 0.0,
               rng: np.random.Generator | None = None) -> Tensor:
    """y = x @ W0 + scale * (drop(x) @ A^T) @ B^T; dropout only in train mode."""
    w0_t = w0 if isinstance(w0, Tensor) else Tensor(w0)
    base = ad.matmul(x, w0_t)
    dropped = ad.dropout(x, dropout_rate, rng, training=(mode == "train"))
    low = ad.matmul(dropped, ad.transpose(layer.a))
    # scale on the rank-sized intermediate, not the full output
    residual = ad.matmul(ad.mul(low, scale), ad.transpose(layer.b))
    return ad.add(base, residual)


def reset(adapter: LoraAdapter) -> LoraAdapter:
    """Reinitialize with a fresh seed derived from the adapter's own; B returns to zero."""
    return LoraAdapter(adapter.config, adapter.host_dims, adapter.seed,
                       generation=adapter.generation + 1, dtype=adapter.dtype)


class MemoryAdapter:
    """Bottleneck d -> d/2 -> d with relu, added back residually.

    The second map starts at zero, so the transform is the identity until
    trained. Applied per pixel to the prompt/memory feature channels.
    """

    def __init__(self, dim: int, cfg: LoraConfig, seed: int, generation: int = 0,
                 dtype=np.float32):
        if dim < 2:
            raise ValueError("memory adapter needs dim >= 2")
        self.dim = dim
        self.config = cfg
        self.seed = seed
        self.generation = generation
        self.update_count = 0
        self.dtype = dtype
        hidden = dim // 2
        rng = np.random.default_rng(np.random.SeedSequence([seed, generation, 7]))
        self.w1 = ad.randn((dim, hidden), rng, std=float(np.sqrt(2.0 / dim)),
                           requires_grad=True, dtype=dtype)
        self.b1 = ad.zeros((hidden,), requires_grad=True, dtype=dtype)
        self.w2 = ad.zeros((hidden, dim), requires_grad=True, dtype=dtype)
        self.b2 = ad.zeros((dim,), requires_grad=True, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = ad.relu(ad.add(ad.matmul(x, self.w1), self.b1))
        return ad.add(x, ad.add(ad.matmul(h, self.w2), self.b2))

    def params(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1.data, "b1": self.b1.data,
                "w2": self.w2.data, "b2": self.b2.data}


def memory_adapter_forward(features: Tensor, adapter: MemoryAdapter) -> Tensor:
    if features.shape[-1] != adapter.dim:
        raise ValueError(f"memory adapter dim {adapter.dim} != channels {features.shape[-1]}")
    return adapter.forward(features)


def reset_memory_adapter(adapter: MemoryAdapter) -> MemoryAdapter:
    return MemoryAdapter(adapter.dim, adapter.config, adapter.seed,
                         generation=adapter.generation + 1, dtype=adapter.dtype)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / b1t
            v_hat = self.v[i] / b2t
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# online update loop


@dataclass
class UpdateReport:
    epochs_run: int
    initial_loss: float
    final_loss: float
    wall_time: float
    stop_reason: str  # loss_floor | iou_target | max_epochs


@dataclass
class TrainCase:
    """One correction turned into a trainable example.

    ``forward`` runs a train-mode pass and returns the loss tensor plus the
    current fit quality in [0, 1] (IoU against the supervision mask, or a
    0/1 success flag for classification).
    """
    forward: Callable[[np.random.Generator], tuple[Tensor, float]]


def train_on_correction(session, corrections: Sequence, batch_mode: str = "joint") -> UpdateReport:
    """Fit the session's trainable module to the given corrections.

    ``joint``: every epoch takes one Adam step on the mean loss over all
    corrections. ``sequential``: each correction gets the full epoch budget,
    oldest first. Early stop fires when the loss drops below the configured
    floor or every correction is fit to the IoU target, but never while the
    loss sits above its starting value. The trainable module is mutated in
    place and training continues from its current state.
    """
    if not corrections:
        raise ValueError("train_on_correction needs at least one correction")
    if batch_mode not in ("joint", "sequential"):
        raise ValueError(f"unknown batch_mode {batch_mode!r}")
    cases = [session.make_train_case(c) for c in corrections]

    t0 = time.perf_counter()
    if batch_mode == "sequential" and len(cases) > 1:
        reports = [_run_epochs(session, [case]) for case in cases]
        report = UpdateReport(
            epochs_run=max(r.epochs_run for r in reports),
            initial_loss=reports[0].initial_loss,
            final_loss=reports[-1].final_loss,
            wall_time=time.perf_counter() - t0,
            stop_reason=reports[-1].stop_reason,
        )
    else:
        report = _run_epochs(session, cases)
        report.wall_time = time.perf_counter() - t0
    session.trainable.update_count += 1
    return report


def _run_epochs(session, cases: list[TrainCase]) -> UpdateReport:
    cfg: LoraConfig = session.update_cfg
    opt: Adam = session.optimizer
    rng = session.train_rng
    progress = getattr(session, "train_progress", None)
    initial = None
    loss_val = float("nan")
    stop_reason = "max_epochs"
    epochs = 0
    for epoch in range(1, cfg.max_epochs + 1):
        epochs = epoch
        losses, quals = [], []
        for case in cases:
            loss_t, qual = case.forward(rng)
            losses.append(loss_t)
            quals.append(qual)
        total = losses[0]
        for extra in losses[1:]:
            total = ad.add(total, extra)
        if len(losses) > 1:
            total = ad.mul(total, 1.0 / len(losses))
        loss_val = total.item()
        if progress is not None:
            progress(epoch, loss_val)
        if initial is None:
            initial = loss_val
        if loss_val <= initial:
            if min(quals) >= cfg.iou_target:
                stop_reason = "iou_target"
                break
            if loss_val < cfg.loss_floor:
                stop_reason = "loss_floor"
                break
        opt.zero_grad()
        ad.backward(total)
        opt.step()
    else:
        # budget exhausted; report the post-step loss honestly
        losses = [case.forward(rng)[0] for case in cases]
        vals = [t.item() for t in losses]
        loss_val = float(np.mean(vals))
    return UpdateReport(epochs_run=epochs, initial_loss=float(initial),
                        final_loss=float(loss_val), wall_time=0.0,
                        stop_reason=stop_reason)
