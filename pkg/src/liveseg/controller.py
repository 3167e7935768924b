"""The live-adaptation state machine.

A stream session walks frames strictly in order. Each frame is decoded with
the last accepted mask as memory; when the trigger fires, the session first
consults its adapter (if it has ever been trained) and shows that proposal to
the user, then falls back to simulated clicks and, past the click budget, a
full ground-truth mask. Corrections train the adapter in place; adapters never
survive a stream boundary.

Variants: ``original`` never adapts; ``lit_lora`` keeps a LoRA consulted on
errors; ``lit_no_cl`` trains it only once; ``lit_ft`` trains a full decoder
copy consulted on errors; ``replace_original`` fine-tunes the live decoder
used for every frame; ``lit_multi_lora`` keeps up to k adapters and lets the
user pick the best proposal.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import adapters as ada
from . import autodiff as adlib
from . import rle
from .data import ClassStream, VideoBundle
from .losses import ClassLossConfig, SegLossConfig, class_loss, seg_loss
from .metrics import boundary_f, iou
from .model import (DECODER_LAYERS, BaseWeights, Frame, MaskPrediction, PromptState,
                    assemble_features, decode_mask, static_channels)
from .oracle import (Correction, ProtocolConfig, TimeModel, detect_error,
                     simulate_correction, validate_adapter_proposal)

VARIANT_KINDS = ("original", "lit_lora", "replace_original", "lit_no_cl",
                 "lit_ft", "lit_multi_lora")


@dataclass
class MethodVariant:
    kind: str = "lit_lora"
    placement: str = "decoder_lora"     # decoder_lora | memory_adapter
    batch_mode: str = "joint"           # joint | sequential
    window: int = 1                     # corrections buffered for each update
    multi_k: int = 3

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ValueError(f"unknown variant {self.kind!r}")
        if self.placement not in ("decoder_lora", "memory_adapter"):
            raise ValueError(f"unknown placement {self.placement!r}")
        if self.batch_mode not in ("joint", "sequential"):
            raise ValueError(f"unknown batch mode {self.batch_mode!r}")
        if self.window < 1:
            raise ValueError("window must be >= 1")

    @property
    def adapts(self) -> bool:
        return self.kind != "original"

    @property
    def consults(self) -> bool:
        """Whether proposals come from a module separate from the live path."""
        return self.kind in ("lit_lora", "lit_no_cl", "lit_ft", "lit_multi_lora")

    def label(self) -> str:
        extra = "" if self.placement == "decoder_lora" else "+memory"
        return self.kind + extra


@dataclass
class TriggerMode:
    kind: str = "oracle"   # oracle | predicted_auto | predicted_semi
    theta: float = 0.8

    def __post_init__(self):
        if self.kind not in ("oracle", "predicted_auto", "predicted_semi"):
            raise ValueError(f"unknown trigger {self.kind!r}")
        if not 0.0 < self.theta < 1.0:
            raise ValueError("theta must lie in (0, 1)")


def resolve_trigger(pred: MaskPrediction, gt: np.ndarray, mode: TriggerMode,
                    cfg: ProtocolConfig) -> bool:
    if mode.kind == "oracle":
        return detect_error(pred, gt, cfg)
    return pred.predicted_iou < mode.theta


def _proposal_accepted(pred: MaskPrediction, gt: np.ndarray, mode: TriggerMode,
                       cfg: ProtocolConfig) -> bool:
    if mode.kind == "predicted_auto":
        return pred.predicted_iou >= mode.theta
    return iou(pred.binary, gt) >= cfg.tau_iou


class StreamSession:
    """One video processed online under a variant/trigger combination."""

    def __init__(self, bundle: VideoBundle, base: BaseWeights,
                 variant: MethodVariant, trigger: TriggerMode,
                 protocol: ProtocolConfig, time_model: TimeModel,
                 update_cfg: ada.LoraConfig, seed: int,
                 seg_cfg: SegLossConfig | None = None):
        if base.trainable_layers:
            raise ValueError("sessions need frozen base weights")
        self.bundle = bundle
        self.base = base
        self.variant = variant
        self.trigger = trigger
        self.protocol = protocol
        self.time_model = time_model
        self.update_cfg = update_cfg
        self.seg_cfg = seg_cfg or SegLossConfig()
        self.seed = seed
        self.stream_id = bundle.stream_id
        self.train_rng = np.random.Generator(np.random.SFC64(
            np.random.SeedSequence([seed, 41])))

        self.events: list[dict] = []
        self.outputs: list[np.ndarray] = []
        self.frame_index = -1
        self.memory: np.ndarray | None = None
        self._static: np.ndarray | None = None
        self._train_static: dict[int, np.ndarray] = {}
        self._window: list[Correction] = []
        self._corrections_spent = 0

        self.live_weights = base
        self.trainable = None
        self.adapters: list = []
        self.optimizer: ada.Adam | None = None
        self._adapter_seq = 0
        if variant.adapts:
            self._install_trainable()

    # ----- adapter lifecycle -------------------------------------------------

    def _new_adapter(self):
        self._adapter_seq += 1
        seq = self._adapter_seq
        if self.variant.placement == "memory_adapter":
            return ada.MemoryAdapter(4, self.update_cfg,
                                     seed=self.seed * 1000 + seq)
        return ada.LoraAdapter(self.update_cfg, self.base.layer_dims(),
                               seed=self.seed * 1000 + seq)

    def _install_trainable(self) -> None:
        kind = self.variant.kind
        if kind in ("lit_ft", "replace_original"):
            copy = self.base.clone(trainable_layers=DECODER_LAYERS)
            self.trainable = copy
            if kind == "replace_original":
                self.live_weights = copy
        elif kind == "lit_multi_lora":
            self.adapters = [self._new_adapter()]
            self.trainable = self.adapters[0]
        else:
            self.trainable = self._new_adapter()
        self.optimizer = ada.Adam(self._trainable_params(), lr=self.update_cfg.learning_rate)

    def _trainable_params(self) -> list:
        return self.trainable.params()

    def _select_trainable(self, module) -> None:
        """Point the update loop (and its optimizer state) at one module."""
        if module is not self.trainable:
            self.trainable = module
            self.optimizer = ada.Adam(module.params(), lr=self.update_cfg.learning_rate)

    def reset_adapter(self) -> None:
        """Reinitialize the trainable state; predictions return to the base model."""
        if not self.variant.adapts:
            return
        self._window.clear()
        self._install_trainable()
        self.log(self.frame_index, "group_boundary", {})

    # ----- decode paths ------------------------------------------------------

    def _features(self, prompts: PromptState) -> np.ndarray:
        return assemble_features(self._static, prompts, self.protocol.click_sigma)

    def live_decode(self, prompts: PromptState) -> MaskPrediction:
        return decode_mask(self._features(prompts), self.live_weights)

    def _proposal_decode(self, prompts: PromptState, module) -> MaskPrediction:
        feats = self._features(prompts)
        if isinstance(module, BaseWeights):
            return decode_mask(feats, module)
        return decode_mask(feats, self.base, adapter=module)

    # ----- training ----------------------------------------------------------

    def make_train_case(self, correction: Correction) -> ada.TrainCase:
        static = self._train_static[correction.frame_index]
        feats = assemble_features(static, correction.train_prompts,
                                  self.protocol.click_sigma)
        supervision = correction.supervision_mask

        def forward(rng: np.random.Generator):
            if isinstance(self.trainable, BaseWeights):
                pred = decode_mask(feats, self.trainable, mode="train", rng=rng)
            else:
                pred = decode_mask(feats, self.base, adapter=self.trainable,
                                   mode="train", rng=rng)
            loss = seg_loss(pred.logits, supervision, self.seg_cfg)
            return loss, iou(pred.binary, supervision)

        return ada.TrainCase(forward=forward)

    def _train(self, correction: Correction) -> ada.UpdateReport:
        self._window.append(correction)
        self._train_static[correction.frame_index] = self._static
        if len(self._window) > self.variant.window:
            dropped = self._window.pop(0)
            if all(c.frame_index != dropped.frame_index for c in self._window):
                self._train_static.pop(dropped.frame_index, None)
        return ada.train_on_correction(self, list(self._window), self.variant.batch_mode)

    # ----- event log ---------------------------------------------------------

    def log(self, frame: int, kind: str, payload: dict,
            user_ms: int = 0, train_ms: int = 0) -> dict:
        event = {"frame": frame, "kind": kind, "payload": payload,
                 "user_ms": int(user_ms), "train_ms": int(train_ms)}
        self.events.append(event)
        return event

    # ----- the frame loop ----------------------------------------------------

    def run(self) -> dict:
        video = self.bundle
        gt0 = video.masks[0]
        self.frame_index = 0
        self.outputs.append(gt0.copy())
        self.memory = gt0.astype(np.float32)
        self.log(0, "init_prompt", {"mask_rle": rle.encode(gt0)})

        for t in range(1, len(video)):
            self.frame_index = t
            self._static = static_channels(Frame(t, video.images[t]))
            prompts = PromptState(memory_mask=self.memory)
            pred = self.live_decode(prompts)
            gt = video.masks[t]
            budget = self.protocol.corrections_budget
            budget_left = budget is None or self._corrections_spent < budget
            if budget_left and resolve_trigger(pred, gt, self.trigger, self.protocol):
                output, memory = self._handle_error(t, prompts, pred, gt)
            else:
                output, memory = pred.binary, pred.probs
            self.outputs.append(output)
            self.memory = memory.astype(np.float32)
        return self.report()

    def _usable_proposers(self) -> list:
        if not self.variant.consults:
            return []
        if self.variant.kind == "lit_multi_lora":
            return [a for a in self.adapters if a.update_count > 0]
        return [self.trainable] if self.trainable.update_count > 0 else []

    def _handle_error(self, t: int, prompts: PromptState, pred: MaskPrediction,
                      gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        self.log(t, "error", {"iou": iou(pred.binary, gt),
                              "predicted_iou": pred.predicted_iou})
        pending_view_ms = 0

        proposers = self._usable_proposers()
        if proposers:
            proposals = [self._proposal_decode(prompts, m) for m in proposers]
            if self.trigger.kind == "predicted_auto":
                scores = [p.predicted_iou for p in proposals]
            else:
                scores = [iou(p.binary, gt) for p in proposals]
            best = int(np.argmax(scores))
            proposal, module = proposals[best], proposers[best]
            accepted = _proposal_accepted(proposal, gt, self.trigger, self.protocol)
            _, view_s = validate_adapter_proposal(proposal, gt, self.protocol,
                                                  self.time_model)
            view_ms = round(view_s * 1000)
            if accepted:
                self.log(t, "adapter_accepted",
                         {"iou": iou(proposal.binary, gt),
                          "predicted_iou": proposal.predicted_iou,
                          "adapter": proposers.index(module),
                          "mask_rle": rle.encode(proposal.binary)},
                         user_ms=view_ms)
                return proposal.binary, proposal.probs
            pending_view_ms = view_ms
            if self.variant.kind == "lit_multi_lora":
                self._select_trainable(module)
                if len(self.adapters) < self.variant.multi_k:
                    self.adapters.append(self._new_adapter())

        if iou(pred.binary, gt) >= self.protocol.tau_iou:
            # predicted-IoU trigger fired on a mask the user finds acceptable;
            # the user declines to correct and the prediction stands
            self.log(t, "declined", {"iou": iou(pred.binary, gt)},
                     user_ms=pending_view_ms + self.time_model.loc_ms)
            return pred.binary, pred.probs

        correction, _, final_mask = simulate_correction(
            self.live_decode, prompts, pred, gt, self.protocol, self.time_model, t)
        self._corrections_spent += 1

        train_ms = 0
        update_payload = {}
        if self._should_train():
            report = self._train(correction)
            ms = round(report.wall_time * 1000)
            train_ms = ms if self.time_model.count_training_latency else 0
            update_payload = {"epochs": report.epochs_run,
                              "initial_loss": report.initial_loss,
                              "final_loss": report.final_loss,
                              "stop_reason": report.stop_reason,
                              "train_wall_ms": ms}

        event = self.log(t, "correction",
                         {"clicks": [[r, c, pol] for r, c, pol in correction.clicks],
                          "n_clicks": len(correction.clicks),
                          "escalated": correction.escalated_full_mask,
                          "supervision_rle": rle.encode(correction.supervision_mask),
                          "viewing_ms": pending_view_ms,
                          **update_payload},
                         user_ms=pending_view_ms + correction.elapsed_user_ms,
                         train_ms=train_ms)
        if correction.escalated_full_mask:
            self.log(t, "escalation", {"supervision_rle": event["payload"]["supervision_rle"]})
        return final_mask, correction.supervision_mask.astype(np.float32)

    def _should_train(self) -> bool:
        if not self.variant.adapts:
            return False
        if self.variant.kind == "lit_no_cl":
            return self.trainable.update_count == 0
        return True

    # ----- reporting ---------------------------------------------------------

    def report(self) -> dict:
        video = self.bundle
        js = [iou(self.outputs[t], video.masks[t]) for t in range(1, len(video))]
        fs = [boundary_f(self.outputs[t], video.masks[t]) for t in range(1, len(video))]
        corrections = sum(1 for e in self.events if e["kind"] == "correction")
        clicks = sum(e["payload"].get("n_clicks", 0) for e in self.events
                     if e["kind"] == "correction")
        escalations = sum(1 for e in self.events if e["kind"] == "escalation")
        accepted = sum(1 for e in self.events if e["kind"] == "adapter_accepted")
        errors = sum(1 for e in self.events if e["kind"] == "error")
        user_ms = sum(e["user_ms"] for e in self.events)
        train_ms = sum(e["train_ms"] for e in self.events)
        train_events = [e["payload"] for e in self.events
                        if e["kind"] == "correction" and "train_wall_ms" in e["payload"]]
        report = {
            "stream_id": self.stream_id,
            "seed": self.seed,
            "frames": len(video),
            "variant": self.variant.label(),
            "batch_mode": f"{self.variant.window}/{'1' if self.variant.batch_mode == 'sequential' else str(self.variant.window)}",
            "trigger": self.trigger.kind,
            "tau": self.protocol.tau_iou,
            "events": self.events,
            "totals": {
                "errors": errors,
                "corrections": corrections,
                "clicks": clicks,
                "escalations": escalations,
                "adapter_accepted": accepted,
                "user_ms": user_ms,
                "train_ms": train_ms,
            },
            "metrics": {
                "mean_j": float(np.mean(js)) if js else 1.0,
                "mean_f": float(np.mean(fs)) if fs else 1.0,
                "mean_jf": float((np.mean(js) + np.mean(fs)) / 2) if js else 1.0,
                "per_frame_j": [float(v) for v in js],
                "per_frame_f": [float(v) for v in fs],
            },
            "adapter": {
                "param_count": 0 if not self.variant.adapts else self.trainable.param_count(),
                "update_count": 0 if not self.variant.adapts else
                    sum(a.update_count for a in self.adapters) if self.adapters
                    else self.trainable.update_count,
                "updates": train_events,
                "mean_update_wall_s": float(np.mean([p["train_wall_ms"] for p in train_events]) / 1000.0)
                    if train_events else 0.0,
            },
        }
        return report


def run_video_stream(bundle: VideoBundle, base: BaseWeights,
                     variant: MethodVariant | None = None,
                     trigger: TriggerMode | None = None,
                     protocol: ProtocolConfig | None = None,
                     time_model: TimeModel | None = None,
                     update_cfg: ada.LoraConfig | None = None,
                     seed: int = 0) -> dict:
    session = StreamSession(bundle, base,
                            variant or MethodVariant(),
                            trigger or TriggerMode(),
                            protocol or ProtocolConfig(),
                            time_model or TimeModel(),
                            update_cfg or ada.LoraConfig(),
                            seed=seed)
    return session.run()


# ---------------------------------------------------------------------------
# streaming classification


class _ClassGroupSession:
    """Adapter state for one predicted-label group."""

    def __init__(self, prototypes: np.ndarray, update_cfg: ada.LoraConfig,
                 loss_cfg: ClassLossConfig, seed: int):
        d = prototypes.shape[1]
        self.prototypes = prototypes.astype(np.float32)
        self.loss_cfg = loss_cfg
        self.update_cfg = update_cfg
        self.trainable = ada.LoraAdapter(update_cfg, {"feature_proj": (d, d)}, seed=seed)
        self.optimizer = ada.Adam(self.trainable.params(), lr=update_cfg.learning_rate)
        self.train_rng = np.random.Generator(np.random.SFC64(
            np.random.SeedSequence([seed, 77])))

    def adapted_logits(self, x: np.ndarray, mode: str = "eval",
                       rng: np.random.Generator | None = None) -> adlib.Tensor:
        layer = self.trainable.layers["feature_proj"]
        xt = adlib.Tensor(x.reshape(1, -1).astype(np.float32))
        dropped = adlib.dropout(xt, self.trainable.config.dropout, rng,
                                training=(mode == "train"))
        low = adlib.matmul(dropped, adlib.transpose(layer.a))
        residual = adlib.matmul(adlib.mul(low, self.trainable.scale),
                                adlib.transpose(layer.b))
        projected = adlib.add(xt, residual)  # identity-initialized projection
        logits = adlib.matmul(projected, adlib.Tensor(self.prototypes.T))
        return adlib.reshape(adlib.mul(logits, float(1.0 / self.loss_cfg.temperature)),
                             (self.prototypes.shape[0],))

    def make_train_case(self, item: tuple[np.ndarray, int]) -> ada.TrainCase:
        x, label = item
        m = self.loss_cfg.margin_m

        def forward(rng: np.random.Generator):
            logits = self.adapted_logits(x, mode="train", rng=rng)
            loss = class_loss(logits, label, self.trainable.delta_tensors(), self.loss_cfg)
            vals = logits.data
            others = np.arange(len(vals)) != label
            fitted = vals[label] >= vals[others].max() + m
            return loss, 1.0 if fitted else 0.0

        return ada.TrainCase(forward=forward)


def base_class_logits(prototypes: np.ndarray, x: np.ndarray, temperature: float) -> np.ndarray:
    return (prototypes @ x) / temperature


def run_class_stream(stream: ClassStream, variant: MethodVariant | None = None,
                     k_top: int = 3, update_cfg: ada.LoraConfig | None = None,
                     loss_cfg: ClassLossConfig | None = None, seed: int = 0) -> dict:
    """Group items by the base model's predicted label and adapt within groups.

    An error fires when the true label is outside the base top-k; the adapter
    is consulted first, and only if it also misses does the user supply the
    label (one correction) and the adapter get trained on it.
    """
    variant = variant or MethodVariant()
    update_cfg = update_cfg or ada.LoraConfig.classification()
    loss_cfg = loss_cfg or ClassLossConfig()
    protos = stream.prototypes.astype(np.float32)
    n_classes = len(protos)

    for _, label in stream.items:
        if not 0 <= label < n_classes:
            raise ValueError(f"label {label} outside prototype set of {n_classes}")

    order = np.arange(len(stream.items))
    initial_pred = np.array([int(np.argmax(base_class_logits(protos, x, loss_cfg.temperature)))
                             for x, _ in stream.items])

    groups = []
    events = []
    total = {"items": len(stream.items), "errors": 0, "corrections": 0,
             "adapter_accepted": 0, "train_ms": 0}
    for label in range(n_classes):
        idxs = [int(i) for i in order if initial_pred[i] == label]
        if not idxs:
            continue
        group_session = (_ClassGroupSession(protos, update_cfg, loss_cfg,
                                            seed=seed * 1000 + label)
                         if variant.adapts else None)
        g = {"group_label": label, "items": len(idxs), "errors": 0,
             "corrections": 0, "adapter_accepted": 0}
        events.append({"kind": "group_boundary", "group_label": label})
        for i in idxs:
            x, y = stream.items[i]
            base_logits = base_class_logits(protos, x, loss_cfg.temperature)
            base_topk = np.argsort(base_logits)[::-1][:k_top]
            if y in base_topk:
                continue
            g["errors"] += 1
            resolved = False
            if group_session is not None and group_session.trainable.update_count > 0:
                adapted = group_session.adapted_logits(x).data
                if y in np.argsort(adapted)[::-1][:k_top]:
                    g["adapter_accepted"] += 1
                    events.append({"kind": "adapter_accepted", "item": i,
                                   "group_label": label, "true_label": y})
                    resolved = True
            if not resolved:
                g["corrections"] += 1
                train_ms = 0
                if group_session is not None:
                    t0 = time.perf_counter()
                    ada.train_on_correction(group_session, [(x, y)], "joint")
                    train_ms = round((time.perf_counter() - t0) * 1000)
                events.append({"kind": "correction", "item": i, "group_label": label,
                               "true_label": y, "train_ms": train_ms})
                total["train_ms"] += train_ms
        total["errors"] += g["errors"]
        total["corrections"] += g["corrections"]
        total["adapter_accepted"] += g["adapter_accepted"]
        groups.append(g)

    corrections_per_group = [g["corrections"] for g in groups]
    return {
        "stream_id": stream.spec.stream_id if stream.spec else "external",
        "seed": seed,
        "variant": variant.label(),
        "k_top": k_top,
        "groups": groups,
        "events": events,
        "totals": total,
        "mean_corrections_per_group": float(np.mean(corrections_per_group))
            if corrections_per_group else 0.0,
    }


# ---------------------------------------------------------------------------
# event-log audit


def audit_event_log(report: dict, bundle: VideoBundle, protocol: ProtocolConfig) -> list[str]:
    """Post-hoc protocol conformance check over a stream report.

    Verifies the click budget, ground-truth supervision on escalations,
    acceptance quality against tau, single ordered visits, and accounting
    identities. Returns a list of violations (empty = conformant).
    """
    problems = []
    shape = bundle.masks[0].shape
    events = report["events"]
    if not events or events[0]["kind"] != "init_prompt":
        problems.append("log does not open with init_prompt")

    last_frame = -1
    for e in events:
        if e["frame"] < last_frame:
            problems.append(f"frame order regressed at {e['frame']}")
        last_frame = max(last_frame, e["frame"])
        payload = e["payload"] if "payload" in e else {}
        gt = bundle.masks[e["frame"]] if e["frame"] < len(bundle.masks) else None
        if e["kind"] == "correction":
            if payload["n_clicks"] > protocol.max_clicks:
                problems.append(f"frame {e['frame']}: {payload['n_clicks']} clicks")
            supervision = rle.decode(payload["supervision_rle"], shape)
            if payload["escalated"]:
                if not np.array_equal(supervision, gt):
                    problems.append(f"frame {e['frame']}: escalation without GT supervision")
            elif iou(supervision, gt) < protocol.tau_iou:
                problems.append(f"frame {e['frame']}: accepted correction below tau")
        elif e["kind"] == "adapter_accepted":
            mask = rle.decode(payload["mask_rle"], shape)
            if report["trigger"] != "predicted_auto" and iou(mask, gt) < protocol.tau_iou:
                problems.append(f"frame {e['frame']}: accepted proposal below tau")

    totals = report["totals"]
    if totals["user_ms"] != sum(e["user_ms"] for e in events):
        problems.append("user_ms total does not equal event sum")
    if totals["train_ms"] != sum(e["train_ms"] for e in events):
        problems.append("train_ms total does not equal event sum")
    if totals["corrections"] != sum(1 for e in events if e["kind"] == "correction"):
        problems.append("correction count mismatch")
    return problems
