"""Procedural segmentation videos with recurring failure modes, streaming
classification data, and bundle file I/O.

Videos are grayscale with one bright target over a textured background.
Families: ``plain`` and ``drift`` are benign; ``occlusion`` hides the target
behind a bar; ``split`` breaks it into two dimmer fragments mid-video;
``distractor`` sends a look-alike object across the scene; ``camouflage``
fades the target's contrast toward the background over time. Ground-truth
masks are exact by construction. Frames are quantized to 8 bits at generation
time so PGM round trips are lossless.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import litt

FAMILIES = ("plain", "drift", "occlusion", "split", "distractor", "camouflage")
EASY_FAMILIES = ("plain", "drift", "occlusion")
HARD_FAMILIES = ("split", "distractor", "camouflage")

_BG_LEVEL = 0.33
_TARGET_INTENSITY = 0.88
_SPLIT_INTENSITY = 0.52
_CAMO_FLOOR = 0.12


class BundleError(ValueError):
    """Corrupt, truncated, or inconsistent bundle on disk."""


@dataclass(frozen=True)
class ScenarioSpec:
    family: str
    frames: int = 60
    size: int = 96
    radius_min: float = 9.0
    radius_max: float = 13.0
    speed_min: float = 0.5
    speed_max: float = 1.4
    noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if self.frames < 2 or self.size < 16:
            raise ValueError("need frames >= 2 and size >= 16")
        if not (0 < self.radius_min <= self.radius_max < self.size / 3):
            raise ValueError("bad radius range")

    @property
    def stream_id(self) -> str:
        return f"{self.family}-{self.seed:05d}"


@dataclass
class VideoBundle:
    spec: ScenarioSpec
    images: list[np.ndarray]  # float64 (H, W) in [0, 1], 8-bit quantized values
    masks: list[np.ndarray]   # bool (H, W)

    @property
    def stream_id(self) -> str:
        return self.spec.stream_id

    def __len__(self) -> int:
        return len(self.images)


def _disk(shape: tuple[int, int], center: tuple[float, float], radius: float) -> np.ndarray:
    rows, cols = np.mgrid[0:shape[0], 0:shape[1]]
    return (rows - center[0]) ** 2 + (cols - center[1]) ** 2 <= radius * radius


def _quantize(img: np.ndarray) -> np.ndarray:
    u8 = np.clip(np.round(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    return u8.astype(np.float64) / 255.0


def _bounce(pos: float, vel: float, lo: float, hi: float) -> tuple[float, float]:
    pos += vel
    if pos < lo:
        pos, vel = 2 * lo - pos, -vel
    elif pos > hi:
        pos, vel = 2 * hi - pos, -vel
    return pos, vel


def generate_video(spec: ScenarioSpec) -> VideoBundle:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, FAMILIES.index(spec.family)]))
    n, size = spec.frames, spec.size
    background = _BG_LEVEL + 0.09 * ndimage.gaussian_filter(rng.standard_normal((size, size)), 7.0)

    radius = rng.uniform(spec.radius_min, spec.radius_max)
    margin = radius + 3.0
    cy = rng.uniform(margin + 4, size - margin - 4)
    cx = rng.uniform(margin + 4, size - margin - 4)
    angle = rng.uniform(0, 2 * np.pi)
    speed = rng.uniform(spec.speed_min, spec.speed_max)
    vy, vx = speed * np.sin(angle), speed * np.cos(angle)

    if spec.family == "occlusion":
        # force a horizontal crossing through a static occluder bar
        cy = rng.uniform(size * 0.3, size * 0.7)
        cx = margin + 2
        vy, vx = 0.0, (size - 2 * (margin + 2)) / n
        bar_x = size / 2 + rng.uniform(-6, 6)
        bar_w = 2.4 * radius
    if spec.family == "distractor":
        d_radius = radius * rng.uniform(0.9, 1.1)
        d_cy = rng.uniform(margin, size - margin)
        d_cx = size - margin if cx < size / 2 else margin
        d_vx = -abs(vx + 0.6) if d_cx > size / 2 else abs(vx + 0.6)
        d_vy = rng.uniform(-0.4, 0.4)
    if spec.family == "split":
        t_split = n // 2
        frag_r = radius / 1.4
        sep_angle = angle + np.pi / 2
        sep_uy, sep_ux = np.sin(sep_angle), np.cos(sep_angle)

    images, masks = [], []
    intensity = _TARGET_INTENSITY
    for t in range(n):
        img = background + rng.normal(0.0, spec.noise, (size, size))

        if spec.family == "drift":
            angle += rng.normal(0.0, 0.25)
            speed = float(np.clip(speed + rng.normal(0.0, 0.08),
                                  spec.speed_min, spec.speed_max))
            vy, vx = speed * np.sin(angle), speed * np.cos(angle)
            intensity = _TARGET_INTENSITY + 0.04 * np.sin(t / 6.0)
        elif spec.family == "camouflage":
            fade = t / max(n - 1, 1)
            intensity = _TARGET_INTENSITY * (1 - fade) + (_BG_LEVEL + _CAMO_FLOOR) * fade

        if spec.family == "split" and t >= t_split:
            offset = 1.0 + 0.35 * (t - t_split)
            c1 = (cy + sep_uy * (frag_r + offset), cx + sep_ux * (frag_r + offset))
            c2 = (cy - sep_uy * (frag_r + offset), cx - sep_ux * (frag_r + offset))
            c1 = (float(np.clip(c1[0], frag_r + 1, size - frag_r - 2)),
                  float(np.clip(c1[1], frag_r + 1, size - frag_r - 2)))
            c2 = (float(np.clip(c2[0], frag_r + 1, size - frag_r - 2)),
                  float(np.clip(c2[1], frag_r + 1, size - frag_r - 2)))
            mask = _disk((size, size), c1, frag_r) | _disk((size, size), c2, frag_r)
            img[mask] = _SPLIT_INTENSITY + rng.normal(0.0, spec.noise, int(mask.sum()))
        else:
            mask = _disk((size, size), (cy, cx), radius)
            img[mask] = intensity + rng.normal(0.0, spec.noise, int(mask.sum()))

        if spec.family == "distractor" and t >= 4:
            d_mask = _disk((size, size), (d_cy, d_cx), d_radius)
            d_mask &= ~mask  # the true target stays on top where they graze
            img[d_mask] = intensity + rng.normal(0.0, spec.noise, int(d_mask.sum()))
            d_cy, d_vy = _bounce(d_cy, d_vy, margin, size - margin)
            d_cx += d_vx
            if d_cx < margin or d_cx > size - margin:
                d_vx = -d_vx
                d_cx += 2 * d_vx

        if spec.family == "occlusion":
            bar = np.zeros((size, size), dtype=bool)
            lo = int(max(0, bar_x - bar_w / 2))
            hi = int(min(size, bar_x + bar_w / 2))
            bar[:, lo:hi] = True
            img[bar] = 0.14 + rng.normal(0.0, spec.noise, int(bar.sum()))
            mask = mask & ~bar

        cy, vy = _bounce(cy, vy, margin, size - margin)
        cx, vx = _bounce(cx, vx, margin, size - margin)

        images.append(_quantize(img))
        masks.append(mask)

    return VideoBundle(spec=spec, images=images, masks=masks)


# ---------------------------------------------------------------------------
# PGM + bundle I/O


def save_pgm(path: str | Path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + arr.tobytes())


def load_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise BundleError(f"{path}: not a binary PGM")
    try:
        w, h = (int(v) for v in parts[1].split())
        maxval = int(parts[2])
    except ValueError as exc:
        raise BundleError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise BundleError(f"{path}: unsupported maxval {maxval}")
    payload = parts[3]
    if len(payload) != w * h:
        raise BundleError(f"{path}: payload {len(payload)} bytes, expected {w * h}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_bundle(bundle: VideoBundle, directory: str | Path) -> None:
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    hashes = {}
    for t, (img, mask) in enumerate(zip(bundle.images, bundle.masks)):
        fp = directory / "frames" / f"{t:05d}.pgm"
        mp = directory / "masks" / f"{t:05d}.pgm"
        save_pgm(fp, np.round(img * 255.0).astype(np.uint8))
        save_pgm(mp, np.where(mask, 255, 0).astype(np.uint8))
        hashes[f"frames/{t:05d}.pgm"] = _sha256(fp.read_bytes())
        hashes[f"masks/{t:05d}.pgm"] = _sha256(mp.read_bytes())
    manifest = {
        "kind": "video-bundle",
        "spec": asdict(bundle.spec),
        "stream_id": bundle.stream_id,
        "frames": len(bundle),
        "hashes": hashes,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_bundle(directory: str | Path) -> VideoBundle:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise BundleError(f"{directory}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    spec = ScenarioSpec(**manifest["spec"])
    images, masks = [], []
    for t in range(manifest["frames"]):
        for rel in (f"frames/{t:05d}.pgm", f"masks/{t:05d}.pgm"):
            fpath = directory / rel
            if not fpath.exists():
                raise BundleError(f"{directory}: missing {rel}")
            if _sha256(fpath.read_bytes()) != manifest["hashes"][rel]:
                raise BundleError(f"{directory}: hash mismatch for {rel}")
        images.append(load_pgm(directory / f"frames/{t:05d}.pgm").astype(np.float64) / 255.0)
        mask_u8 = load_pgm(directory / f"masks/{t:05d}.pgm")
        if not np.isin(mask_u8, (0, 255)).all():
            raise BundleError(f"{directory}: mask {t} is not binary")
        masks.append(mask_u8 == 255)
    return VideoBundle(spec=spec, images=images, masks=masks)


# ---------------------------------------------------------------------------
# streaming classification data


@dataclass(frozen=True)
class ClassStreamSpec:
    num_classes: int = 12
    items_per_class: int = 30
    dim: int = 16
    spread: float = 0.12
    confusable_fraction: float = 0.35
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.dim < 2:
            raise ValueError("embedding dim must be >= 2")

    @property
    def stream_id(self) -> str:
        return f"class-{self.seed:05d}"


@dataclass
class ClassStream:
    spec: ClassStreamSpec | None
    prototypes: np.ndarray            # (C, d) unit rows; doubles as the frozen text matrix
    items: list[tuple[np.ndarray, int]]
    item_ids: list[str] = field(default_factory=list)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def generate_class_stream(spec: ClassStreamSpec) -> ClassStream:
    """Items cluster on the unit sphere around class prototypes; a confusable
    fraction is blended toward the other members of its 4-class group so the
    true label reliably drops out of the base model's top-3 and the mistake
    recurs within the predicted-label group."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 101]))
    protos = rng.standard_normal((spec.num_classes, spec.dim))
    protos = protos / np.linalg.norm(protos, axis=1, keepdims=True)

    group_of = {}
    for start in range(0, spec.num_classes, 4):
        quad = list(range(start, min(start + 4, spec.num_classes)))
        for c in quad:
            group_of[c] = quad

    items = []
    for y in range(spec.num_classes):
        n_confused = int(round(spec.confusable_fraction * spec.items_per_class))
        quad = [c for c in group_of[y] if c != y]
        for i in range(spec.items_per_class):
            noise = spec.spread * rng.standard_normal(spec.dim)
            if i < n_confused and quad:
                partners = (quad * 3)[:3]  # pad when a tail quad is short
                x = (0.62 * protos[partners[0]] + 0.20 * protos[partners[1]]
                     + 0.16 * protos[partners[2]] + 0.13 * protos[y] + noise)
            else:
                x = protos[y] + noise
            items.append((_unit(x), y))

    order = rng.permutation(len(items))
    items = [items[i] for i in order]
    ids = [f"item_{i:05d}" for i in range(len(items))]
    return ClassStream(spec=spec, prototypes=protos, items=items, item_ids=ids)


def save_class_stream(stream: ClassStream, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    litt.save_tensor(directory / "embeddings.litt",
                     np.stack([x for x, _ in stream.items]))
    litt.save_tensor(directory / "prototypes.litt", stream.prototypes)
    with open(directory / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["item_id", "label"])
        for item_id, (_, label) in zip(stream.item_ids, stream.items):
            writer.writerow([item_id, label])


def load_class_stream(directory: str | Path) -> ClassStream:
    """Ingest external embeddings: a LITT matrix plus an item_id,label CSV."""
    directory = Path(directory)
    embeddings = litt.load_tensor(directory / "embeddings.litt")
    protos = litt.load_tensor(directory / "prototypes.litt")
    if embeddings.ndim != 2 or protos.ndim != 2 or embeddings.shape[1] != protos.shape[1]:
        raise BundleError(f"{directory}: embedding dim does not match prototypes")
    ids, labels = [], []
    with open(directory / "labels.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["item_id"])
            labels.append(int(row["label"]))
    if len(labels) != len(embeddings):
        raise BundleError(f"{directory}: {len(labels)} labels for {len(embeddings)} embeddings")
    if labels and (min(labels) < 0 or max(labels) >= len(protos)):
        raise BundleError(f"{directory}: label outside prototype range")
    items = [(embeddings[i], labels[i]) for i in range(len(labels))]
    return ClassStream(spec=None, prototypes=protos, items=items, item_ids=ids)
