"""Session service exposing the live-adaptation loop to interactive clients.

A human replaces the simulated oracle: the server shows its current best
prediction for each frame, the user clicks (left=positive, right=negative),
optionally paints a full mask, and accepts. Accepting a corrected frame trains
the session's adapter exactly like a simulated correction would; accepting an
untouched prediction validates it into memory.

Wire formats (all JSON):
  frames    raw base64 of height*width uint8 grayscale bytes, row-major
  masks     run-length encoding over row-major order, background run first
            (see ``rle``); run sum must equal height*width

Endpoints:
  POST /sessions                    {bundle_id, variant?, seed?, tau_iou?}
  POST /sessions/{id}/advance
  POST /sessions/{id}/click        {row, col, polarity}
  POST /sessions/{id}/mask         {rle}
  POST /sessions/{id}/accept
  GET  /sessions/{id}/status
  WS   /sessions/{id}/events       pushes phase changes, predictions (RLE),
                                   predicted IoU and training progress
"""

from __future__ import annotations

import asyncio
import base64
import threading
import time
import uuid
from dataclasses import dataclass, field
import numpy as np
from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from pydantic import BaseModel

from . import adapters as ada
from . import rle
from .controller import MethodVariant
from .data import ScenarioSpec, VideoBundle, generate_video
from .losses import SegLossConfig, seg_loss
from .metrics import iou
from .model import (DECODER_LAYERS, BaseWeights, Frame, PromptState,
                    assemble_features, decode_mask, static_channels)
from .oracle import ProtocolConfig, TimeModel

PHASES = ("awaiting_advance", "awaiting_review", "awaiting_correction",
          "training", "finished")


class ProtocolViolation(Exception):
    def __init__(self, message: str, phase: str):
        super().__init__(message)
        self.phase = phase


class SessionBusy(Exception):
    pass


@dataclass
class _Recorded:
    kind: str
    payload: dict = field(default_factory=dict)


class HumanSession:
    """Server-side state machine for one human-driven stream."""

    def __init__(self, session_id: str, bundle: VideoBundle, base: BaseWeights,
                 variant: MethodVariant, protocol: ProtocolConfig,
                 update_cfg: ada.LoraConfig, time_model: TimeModel, seed: int):
        self.id = session_id
        self.bundle = bundle
        self.base = base
        self.variant = variant
        self.protocol = protocol
        self.update_cfg = update_cfg
        self.time_model = time_model
        self.seed = seed
        self.seg_cfg = SegLossConfig()
        self.train_rng = np.random.Generator(np.random.SFC64(
            np.random.SeedSequence([seed, 53])))

        self.phase = "awaiting_advance"
        self.frame_index = -1
        self.memory: np.ndarray | None = None
        self.prompts = PromptState()
        self._static: np.ndarray | None = None
        self.displayed: np.ndarray | None = None
        self.displayed_iou = 0.0
        self.corrected = False
        self.submitted_mask: np.ndarray | None = None
        self.pending_clicks = 0

        self.lock = threading.Lock()
        self.actions: list[_Recorded] = []
        self.listeners: list[tuple[asyncio.AbstractEventLoop, asyncio.Queue]] = []

        self.counters = {"frames_accepted": 0, "corrections": 0, "clicks": 0,
                         "masks": 0, "train_ms": 0,
                         "measured_user_ms": 0, "modeled_user_ms": 0}
        self.accepted_outputs: list[np.ndarray] = []
        self._display_ts: float | None = None

        self.live_weights = base
        self.trainable = None
        self.optimizer = None
        if variant.adapts:
            if variant.kind in ("lit_ft", "replace_original"):
                copy = base.clone(trainable_layers=DECODER_LAYERS)
                self.trainable = copy
                if variant.kind == "replace_original":
                    self.live_weights = copy
            else:
                self.trainable = ada.LoraAdapter(update_cfg, base.layer_dims(), seed=seed)
            self.optimizer = ada.Adam(self.trainable.params(),
                                      lr=update_cfg.learning_rate)

    # ----- websocket fan-out -------------------------------------------------

    def subscribe(self, loop: asyncio.AbstractEventLoop) -> asyncio.Queue:
        queue: asyncio.Queue = asyncio.Queue()
        self.listeners.append((loop, queue))
        return queue

    def unsubscribe(self, queue: asyncio.Queue) -> None:
        self.listeners = [(l, q) for l, q in self.listeners if q is not queue]

    def push(self, message: dict) -> None:
        for loop, queue in list(self.listeners):
            loop.call_soon_threadsafe(queue.put_nowait, message)

    # ----- helpers -----------------------------------------------------------

    @property
    def update_count(self) -> int:
        return self.trainable.update_count if self.trainable is not None else 0

    def _decode_current(self) -> None:
        feats = assemble_features(self._static, self.prompts, self.protocol.click_sigma)
        consult = (self.variant.consults and self.trainable is not None
                   and self.trainable.update_count > 0)
        if isinstance(self.trainable, BaseWeights) and self.variant.kind == "lit_ft" and consult:
            pred = decode_mask(feats, self.trainable)
        elif consult and not isinstance(self.trainable, BaseWeights):
            pred = decode_mask(feats, self.base, adapter=self.trainable)
        else:
            pred = decode_mask(feats, self.live_weights)
        self.displayed = pred.binary
        self.displayed_iou = pred.predicted_iou

    def _prediction_payload(self) -> dict:
        return {"prediction_rle": rle.encode(self.displayed),
                "predicted_iou": self.displayed_iou,
                "frame_index": self.frame_index,
                "phase": self.phase}

    def _require(self, *phases: str) -> None:
        if self.phase not in phases:
            raise ProtocolViolation(
                f"call not allowed in phase {self.phase!r} (expected {phases})", self.phase)

    # ----- the four verbs ----------------------------------------------------

    def advance(self, record: bool = True) -> dict:
        self._require("awaiting_advance")
        if record:
            self.actions.append(_Recorded("advance"))
        self.frame_index += 1
        t = self.frame_index
        image = self.bundle.images[t]
        self._static = static_channels(Frame(t, image))
        self.prompts = PromptState(memory_mask=self.memory)
        self.corrected = False
        self.submitted_mask = None
        self.pending_clicks = 0
        self._decode_current()
        self.phase = "awaiting_review"
        self._display_ts = time.perf_counter()
        payload = {
            "image_b64": base64.b64encode(
                np.round(image * 255.0).astype(np.uint8).tobytes()).decode(),
            "height": image.shape[0], "width": image.shape[1],
            **self._prediction_payload(),
        }
        self.push({"type": "frame", **{k: v for k, v in payload.items() if k != "image_b64"}})
        return payload

    def click(self, row: int, col: int, polarity: str, record: bool = True) -> dict:
        self._require("awaiting_review", "awaiting_correction")
        h, w = self.bundle.images[0].shape
        if not (0 <= row < h and 0 <= col < w):
            raise ProtocolViolation(f"click ({row}, {col}) outside {h}x{w}", self.phase)
        if polarity not in ("positive", "negative"):
            raise ProtocolViolation(f"bad polarity {polarity!r}", self.phase)
        if record:
            self.actions.append(_Recorded("click", {"row": row, "col": col,
                                                    "polarity": polarity}))
        if polarity == "positive":
            self.prompts.positive_clicks.append((row, col))
        else:
            self.prompts.negative_clicks.append((row, col))
        self.corrected = True
        self.pending_clicks += 1
        self.counters["clicks"] += 1
        self.submitted_mask = None
        feats = assemble_features(self._static, self.prompts, self.protocol.click_sigma)
        pred = decode_mask(feats, self.live_weights)
        self.displayed = pred.binary
        self.displayed_iou = pred.predicted_iou
        self.phase = "awaiting_correction"
        payload = self._prediction_payload()
        self.push({"type": "prediction", **payload})
        return payload

    def submit_mask(self, runs: list[int], record: bool = True) -> dict:
        self._require("awaiting_review", "awaiting_correction")
        mask = rle.decode(runs, self.bundle.images[0].shape)
        if record:
            self.actions.append(_Recorded("mask", {"rle": list(runs)}))
        self.submitted_mask = mask
        self.displayed = mask
        self.corrected = True
        self.counters["masks"] += 1
        self.phase = "awaiting_correction"
        payload = self._prediction_payload()
        self.push({"type": "prediction", **payload})
        return payload

    def accept(self, record: bool = True) -> dict:
        self._require("awaiting_review", "awaiting_correction")
        if record:
            self.actions.append(_Recorded("accept"))
        elapsed_ms = 0
        if self._display_ts is not None:
            elapsed_ms = round((time.perf_counter() - self._display_ts) * 1000)
        self.counters["measured_user_ms"] += elapsed_ms
        modeled = self.time_model.loc_ms + self.pending_clicks * self.time_model.click_ms
        if self.submitted_mask is not None:
            modeled += self.time_model.full_mask_ms
        self.counters["modeled_user_ms"] += modeled

        trained = None
        output = self.displayed
        self.accepted_outputs.append(output.copy())
        if self.corrected:
            self.counters["corrections"] += 1
            if self.variant.adapts and self._should_train():
                self.phase = "training"
                self.push({"type": "phase", "phase": "training",
                           "frame_index": self.frame_index})
                trained = self._train(output)
                self.counters["train_ms"] += round(trained.wall_time * 1000)
        self.counters["frames_accepted"] += 1
        self.memory = output.astype(np.float32)

        if self.frame_index + 1 >= len(self.bundle):
            self.phase = "finished"
        else:
            self.phase = "awaiting_advance"
        result = {"frame_index": self.frame_index, "phase": self.phase,
                  "corrected": self.corrected,
                  "update_count": self.update_count,
                  "trained": None if trained is None else {
                      "epochs": trained.epochs_run,
                      "final_loss": trained.final_loss,
                      "stop_reason": trained.stop_reason}}
        self.push({"type": "accepted", **result})
        return result

    def _should_train(self) -> bool:
        if self.variant.kind == "lit_no_cl":
            return self.update_count == 0
        return True

    def _train(self, supervision: np.ndarray) -> ada.UpdateReport:
        # train on click-free inputs so later consults work without prompts
        train_prompts = PromptState(memory_mask=self.memory)
        feats = assemble_features(self._static, train_prompts, self.protocol.click_sigma)
        session = self

        def forward(rng: np.random.Generator):
            if isinstance(session.trainable, BaseWeights):
                pred = decode_mask(feats, session.trainable, mode="train", rng=rng)
            else:
                pred = decode_mask(feats, session.base, adapter=session.trainable,
                                   mode="train", rng=rng)
            return seg_loss(pred.logits, supervision, session.seg_cfg), \
                iou(pred.binary, supervision)

        outer = self

        class _Shim:
            update_cfg = outer.update_cfg
            optimizer = outer.optimizer
            train_rng = outer.train_rng
            trainable = outer.trainable

            @staticmethod
            def make_train_case(_):
                return ada.TrainCase(forward=forward)

            @staticmethod
            def train_progress(epoch: int, loss: float) -> None:
                outer.push({"type": "training", "epoch": epoch, "loss": loss,
                            "frame_index": outer.frame_index})

        return ada.train_on_correction(_Shim, [None], "joint")

    def status(self) -> dict:
        return {"session_id": self.id, "phase": self.phase,
                "frame_index": self.frame_index, "frames": len(self.bundle),
                "variant": self.variant.label(), "update_count": self.update_count,
                **self.counters}


def replay_actions(bundle: VideoBundle, base: BaseWeights, variant: MethodVariant,
                   protocol: ProtocolConfig, update_cfg: ada.LoraConfig,
                   time_model: TimeModel, seed: int,
                   actions: list[dict]) -> list[np.ndarray]:
    """Re-drive a fresh session with a recorded action log; returns the
    accepted mask per frame. Model outputs are deterministic, so a replay
    matches the original session bit for bit."""
    session = HumanSession("replay", bundle, base, variant, protocol,
                           update_cfg, time_model, seed)
    outputs = []
    for action in actions:
        kind, payload = action["kind"], action.get("payload", {})
        if kind == "advance":
            session.advance(record=False)
        elif kind == "click":
            session.click(payload["row"], payload["col"], payload["polarity"],
                          record=False)
        elif kind == "mask":
            session.submit_mask(payload["rle"], record=False)
        elif kind == "accept":
            outputs.append(session.displayed.copy())
            session.accept(record=False)
        else:
            raise ValueError(f"unknown recorded action {kind!r}")
    return outputs


# ---------------------------------------------------------------------------
# HTTP app


class CreateSession(BaseModel):
    bundle_id: str
    variant: str = "lit_lora"
    seed: int = 0
    tau_iou: float = 0.5
    max_epochs: int = 40
    learning_rate: float = 2e-2
    frames: int | None = None


class ClickBody(BaseModel):
    row: int
    col: int
    polarity: str = "positive"


class MaskBody(BaseModel):
    rle: list[int]


def _resolve_bundle(bundle_id: str, frames: int | None) -> VideoBundle:
    """Bundle ids name a generator scenario: '<family>-<seed>'."""
    family, _, seed = bundle_id.partition("-")
    try:
        spec = ScenarioSpec(family, seed=int(seed), frames=frames or 60)
    except (ValueError, TypeError) as exc:
        raise HTTPException(404, f"unknown bundle id {bundle_id!r}: {exc}") from exc
    return generate_video(spec)


def create_app(base: BaseWeights) -> FastAPI:
    app = FastAPI(title="liveseg annotation service")
    sessions: dict[str, HumanSession] = {}
    app.state.sessions = sessions  # exposed for tests and diagnostics

    def get_session(session_id: str) -> HumanSession:
        session = sessions.get(session_id)
        if session is None:
            raise HTTPException(404, f"unknown session {session_id}")
        return session

    def guarded(session: HumanSession, fn, *args):
        if not session.lock.acquire(blocking=False):
            raise HTTPException(409, detail={"error": "busy",
                                             "phase": session.phase})
        try:
            return fn(*args)
        except ProtocolViolation as exc:
            raise HTTPException(409, detail={"error": "protocol_violation",
                                             "phase": exc.phase,
                                             "message": str(exc)}) from exc
        except ValueError as exc:
            raise HTTPException(422, detail=str(exc)) from exc
        finally:
            session.lock.release()

    @app.post("/sessions")
    def create_session(body: CreateSession):
        bundle = _resolve_bundle(body.bundle_id, body.frames)
        session_id = uuid.uuid4().hex[:12]
        variant = MethodVariant(body.variant)
        update_cfg = ada.LoraConfig(max_epochs=body.max_epochs,
                                    learning_rate=body.learning_rate)
        session = HumanSession(session_id, bundle, base, variant,
                               ProtocolConfig(tau_iou=body.tau_iou),
                               update_cfg, TimeModel(), body.seed)
        sessions[session_id] = session
        h, w = bundle.images[0].shape
        return {"session_id": session_id, "frames": len(bundle),
                "height": h, "width": w, "variant": variant.label()}

    @app.post("/sessions/{session_id}/advance")
    def advance(session_id: str):
        session = get_session(session_id)
        return guarded(session, session.advance)

    @app.post("/sessions/{session_id}/click")
    def click(session_id: str, body: ClickBody):
        session = get_session(session_id)
        return guarded(session, session.click, body.row, body.col, body.polarity)

    @app.post("/sessions/{session_id}/mask")
    def submit_mask(session_id: str, body: MaskBody):
        session = get_session(session_id)
        return guarded(session, session.submit_mask, body.rle)

    @app.post("/sessions/{session_id}/accept")
    def accept(session_id: str):
        session = get_session(session_id)
        return guarded(session, session.accept)

    @app.get("/sessions/{session_id}/status")
    def status(session_id: str):
        return get_session(session_id).status()

    @app.post("/sessions/{session_id}/verify-replay")
    def verify_replay(session_id: str):
        """Re-drive the recorded action log through a fresh session and
        compare the accepted mask of every frame bit for bit."""
        session = get_session(session_id)
        actions = [{"kind": a.kind, "payload": a.payload} for a in session.actions]
        replayed = replay_actions(session.bundle, session.base, session.variant,
                                  session.protocol, session.update_cfg,
                                  session.time_model, session.seed, actions)
        identical = (len(replayed) == len(session.accepted_outputs)
                     and all(np.array_equal(a, b) for a, b in
                             zip(replayed, session.accepted_outputs)))
        return {"identical": identical, "frames_compared": len(replayed)}

    @app.get("/sessions/{session_id}/log")
    def action_log(session_id: str):
        session = get_session(session_id)
        return {"session_id": session_id, "variant": session.variant.label(),
                "seed": session.seed, "bundle_id": session.bundle.stream_id,
                "actions": [{"kind": a.kind, "payload": a.payload}
                            for a in session.actions]}

    @app.websocket("/sessions/{session_id}/events")
    async def events(websocket: WebSocket, session_id: str):
        session = sessions.get(session_id)
        if session is None:
            await websocket.close(code=4404)
            return
        await websocket.accept()
        queue = session.subscribe(asyncio.get_running_loop())
        try:
            while True:
                message = await queue.get()
                await websocket.send_json(message)
        except WebSocketDisconnect:
            pass
        finally:
            session.unsubscribe(queue)

    return app
