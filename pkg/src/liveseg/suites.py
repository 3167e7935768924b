"""Shipped seeded suites: pretraining scenarios, the held-out evaluation sets,
the benchmark videos (hard families the base model never saw), and the
classification stream.

The numbers here were fixed once during development; tests and the CLI both
read them from this module so every run, ablation and acceptance check uses
the same data.
"""

from __future__ import annotations

from .adapters import LoraConfig
from .data import ClassStreamSpec, ScenarioSpec
from .model import PretrainConfig

PRETRAIN_SEED = 20240811

# families the base model trains on; split/distractor/camouflage stay unseen
PRETRAIN_SCENARIOS = tuple(
    ScenarioSpec(family, frames=40, seed=seed)
    for family in ("plain", "drift", "occlusion")
    for seed in (101, 102, 103, 104)
)

# held-out easy videos for the pretraining quality gate
EVAL_EASY_SCENARIOS = tuple(
    ScenarioSpec(family, frames=30, seed=seed)
    for family in ("plain", "drift")
    for seed in (201, 202, 203)
)

# the shipped benchmark: 20 hard-family videos x 60 frames
BENCH_SCENARIOS = tuple(
    [ScenarioSpec("split", frames=60, seed=s) for s in range(301, 308)]
    + [ScenarioSpec("distractor", frames=60, seed=s) for s in range(401, 408)]
    + [ScenarioSpec("camouflage", frames=60, seed=s) for s in range(501, 507)]
)

EVAL_HARD_SCENARIOS = BENCH_SCENARIOS[:6]

CLASS_SUITE = ClassStreamSpec(num_classes=12, items_per_class=30, dim=16,
                              spread=0.12, confusable_fraction=0.35, seed=601)

# online update settings used by the shipped benchmark; the learning rate is
# calibrated to this model's scale (the 1e-4 dataclass default barely moves a
# freshly initialized adapter of this size within 40 epochs)
BENCH_LORA = LoraConfig(learning_rate=2e-2)
BENCH_CLASS_LORA = LoraConfig.classification(learning_rate=2e-2)

# full-decoder fine-tuning takes far smaller steps than rank-4 adapters
BENCH_FT = LoraConfig(learning_rate=1e-3)


def update_config_for(variant_kind: str) -> LoraConfig:
    if variant_kind in ("lit_ft", "replace_original"):
        return BENCH_FT
    return BENCH_LORA

BENCH_SEED = 7


def default_pretrain_config(save_dir=None) -> PretrainConfig:
    return PretrainConfig(save_dir=save_dir)


def pretrained_base(cache_root, progress=None):
    """Load the suite's pretrained base from a cache directory, training and
    saving it there on first use."""
    from pathlib import Path

    from . import litt
    from .model import BaseWeights, pretrain_base

    cfg = default_pretrain_config()
    bundle_dir = Path(cache_root) / f"base-{cfg.digest()}-{PRETRAIN_SEED}"
    if (bundle_dir / "manifest.json").exists():
        try:
            return BaseWeights.load(bundle_dir)
        except litt.LittError:
            pass  # stale or corrupt cache: retrain below
    cfg.save_dir = bundle_dir
    return pretrain_base(PRETRAIN_SCENARIOS, cfg, PRETRAIN_SEED, progress=progress)
