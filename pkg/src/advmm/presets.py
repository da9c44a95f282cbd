"""Desk-scale settings for the default synthetic dataset.

The full-size defaults in ModelConfig target 4096-d image features and
59 x 300 sentences. These smaller settings train on one CPU core in under a
minute per run.
"""
from __future__ import annotations

from .data import SynthSpec
from .model import ModelConfig
from .trainer import TrainConfig

DESK_MODEL = dict(d_hidden=128, D=32, widths=(3, 4, 5), n_filters=32, head_hidden=64,
                  dropout=0.0, image_norm="both", text_norm="both")
DESK_TRAIN = dict(max_steps=8000, batch_size=64, lr=3e-4, gamma=10.0, eval_every=1000)


def desk_configs(spec: SynthSpec | None = None, **train_overrides):
    """``(ModelConfig, TrainConfig)`` sized for ``spec`` (default synthetic)."""
    spec = spec or SynthSpec()
    mc = ModelConfig(d_image_in=spec.d_image, d_word=spec.d_word, max_len=spec.max_len,
                     n_categories=spec.n_categories, **DESK_MODEL)
    tc = TrainConfig(**{**DESK_TRAIN, **train_overrides})
    return mc, tc


def desk_config_file() -> dict:
    """The same settings as a CLI ``--config`` document."""
    return {"synth": {}, "model": {**DESK_MODEL, "widths": list(DESK_MODEL["widths"])},
            "train": dict(DESK_TRAIN)}
