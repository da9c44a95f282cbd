"""Training loops: adversarial / category-only, and the triplet baseline."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation as E
from .data import Collated, Sample, batch_iter, collate
from .layers import triplet_ranking_loss
from .model import EmbeddingNet, ModelConfig, load_checkpoint, save_checkpoint
from .optim import AdamState, LambdaSchedule, NonFiniteGradientError, adam_step
from .tensor import Rng

log = logging.getLogger(__name__)

MODES = ("adversarial", "category_only", "triplet_baseline")


class NumericalAbort(FloatingPointError):
    """Training produced a non-finite loss; the last good checkpoint is kept."""


@dataclass
class TrainConfig:
    max_steps: int = 3000
    batch_size: int = 64
    seed: int = 0
    lr: float = 1e-5
    gamma: float = 10.0
    lambda_constant: float | None = None
    eval_every: int = 500
    mode: str = "adversarial"
    margin: float = 0.1
    stop_after: int | None = None
    collapse_ratio: float = 0.1

    def validate(self) -> None:
        if self.max_steps < 1:
            raise ValueError("TrainConfig.max_steps must be >= 1")
        if self.batch_size < 2:
            raise ValueError("TrainConfig.batch_size must be >= 2")
        if self.mode not in MODES:
            raise ValueError(f"TrainConfig.mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size % 2:
            raise ValueError("TrainConfig.batch_size must be even (balanced image/text batches)")
        if self.eval_every < 1:
            raise ValueError("TrainConfig.eval_every must be >= 1")
        if not self.lr > 0:
            raise ValueError("TrainConfig.lr must be > 0")
        if self.lambda_constant is not None and self.lambda_constant < 0:
            raise ValueError("TrainConfig.lambda_constant must be >= 0")
        if self.margin <= 0:
            raise ValueError("TrainConfig.margin must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


def model_config_for_mode(model_config: ModelConfig, mode: str) -> ModelConfig:
    d = model_config.to_dict()
    d["category_head"] = mode != "triplet_baseline"
    d["domain_head"] = mode == "adversarial"
    return ModelConfig.from_dict(d)


@dataclass
class TrainResult:
    net: EmbeddingNet
    adam: AdamState
    step: int
    history: list = field(default_factory=list)
    checkpoint: Path | None = None


def held_out_metrics(net: EmbeddingNet, col: Collated, rng: Rng) -> dict:
    """Fresh-probe domain accuracy, macro-F1 and mean pairwise distance."""
    emb = net.embed(col)
    out = {"confusion": E.probe_domain_accuracy(emb, col.domains, rng),
           "f1_macro": None,
           "mean_pairwise_dist": E.mean_pairwise_distance(emb)}
    if net.config.category_head:
        cat, _ = net.predict(col)
        out["f1_macro"] = E.prf1(cat, col.labels)["macro"]["f1"]
    return out


class _Batches:
    """Step-addressable batch sequence: epoch ``e`` is shuffled by
    ``rng.fork("epoch", e)``, so any step's batch can be rebuilt on resume."""

    def __init__(self, make_epoch, rng: Rng):
        self._make = make_epoch
        self._rng = rng
        self._epoch = None
        self._cache = None
        self._per_epoch = len(make_epoch(rng.fork("epoch", 0)))
        if self._per_epoch == 0:
            raise ValueError("dataset too small for one batch")

    def __getitem__(self, step: int):
        e, k = divmod(step, self._per_epoch)
        if e != self._epoch:
            self._cache = self._make(self._rng.fork("epoch", e))
            self._epoch = e
        return self._cache[k]


def _triplet_pairs(samples: list[Sample]) -> np.ndarray:
    """(text index, image index) for every text whose pair id has an image."""
    image_of = {}
    for i, s in enumerate(samples):
        if s.domain == "image":
            if s.pair_id is None:
                raise ValueError(f"triplet baseline needs pair ids; sample {s.id} has none")
            image_of.setdefault(s.pair_id, i)
    pairs = []
    for i, s in enumerate(samples):
        if s.domain == "text":
            if s.pair_id is None:
                raise ValueError(f"triplet baseline needs pair ids; sample {s.id} has none")
            if s.pair_id in image_of:
                pairs.append((i, image_of[s.pair_id]))
    if not pairs:
        raise ValueError("triplet baseline found no image-text pairs")
    return np.asarray(pairs, dtype=np.int64)


def train(config: TrainConfig, model_config: ModelConfig, train_samples: list[Sample],
          test_samples: list[Sample] | None = None, out_dir=None, resume=None) -> TrainResult:
    """Run ``config.max_steps`` optimisation steps (or up to ``stop_after``).

    Every ``eval_every`` steps, and on the last step, a record
    ``{step, lambda, loss_c, loss_d, confusion, f1_macro, mean_pairwise_dist}``
    is appended to ``history`` (and ``out_dir/log.jsonl``) and a checkpoint
    is written to ``out_dir/checkpoint.bin``. Outside triplet mode pair ids
    are never read.
    """
    config.validate()
    mcfg = model_config_for_mode(model_config, config.mode)
    root = Rng(config.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = out_dir / "checkpoint.bin" if out_dir is not None else None

    col = collate(train_samples, mcfg.d_image_in, mcfg.max_len, mcfg.d_word, mcfg.n_categories)
    test_col = None
    if test_samples:
        test_col = collate(test_samples, mcfg.d_image_in, mcfg.max_len, mcfg.d_word, mcfg.n_categories)

    if config.mode == "triplet_baseline":
        pairs = _triplet_pairs(train_samples)
        half = config.batch_size // 2

        def make_epoch(r):
            order = pairs[r.permutation(len(pairs))]
            nb = len(order) // half
            return [order[k * half:(k + 1) * half] for k in range(nb)]
    else:
        def make_epoch(r):
            return batch_iter(col.domains, config.batch_size, r, balanced=True, train=True)
    batches = _Batches(make_epoch, root.fork("batches"))

    if resume is not None:
        net, adam, start, meta = load_checkpoint(resume)
        if net.config != mcfg:
            raise ValueError("resume checkpoint model config differs from the requested one")
        initial_mpd = meta.get("initial_mpd")
    else:
        net = EmbeddingNet(mcfg, rng=root.fork("init"))
        adam = AdamState(lr=config.lr)
        start = 0
        initial_mpd = None
        if test_col is not None:
            initial_mpd = E.mean_pairwise_distance(net.embed(test_col))
    schedule = LambdaSchedule(config.max_steps, config.gamma, config.lambda_constant)
    end = config.max_steps if config.stop_after is None else min(config.max_steps, config.stop_after)
    meta = {"train_config": config.to_dict(), "initial_mpd": initial_mpd}

    history = []
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "log.jsonl", "a" if resume is not None else "w")
    try:
        for step in range(start, end):
            lam = schedule(step) if config.mode == "adversarial" else 0.0
            srng = root.fork("step", step)
            if config.mode == "triplet_baseline":
                loss_c, loss_d, grads = _triplet_step(net, col, batches[step], config.margin, srng)
            else:
                idx = batches[step]
                b = col.take(idx)
                out = net.forward(b, "train", srng)
                jg = net.backward_joint(out, b.labels, b.domains.astype(float), lam)
                loss_c, loss_d, grads = jg.loss_c, jg.loss_d, jg.params
            if not (np.isfinite(loss_c) and np.isfinite(loss_d)):
                raise NumericalAbort(f"non-finite loss at step {step}")
            try:
                adam_step(net.params, grads, adam)
            except NonFiniteGradientError as e:
                raise NumericalAbort(f"step {step}: {e}") from e

            done = step + 1
            if step % config.eval_every == 0 or done == config.max_steps:
                rec = {"step": step, "lambda": lam, "loss_c": loss_c,
                       "loss_d": loss_d if mcfg.domain_head else None}
                if test_col is not None:
                    rec.update(held_out_metrics(net, test_col, root.fork("probe", step)))
                    if initial_mpd and rec["mean_pairwise_dist"] < config.collapse_ratio * initial_mpd:
                        log.warning("step %d: embeddings collapsing (mean pairwise distance %.4g, "
                                    "initial %.4g)", step, rec["mean_pairwise_dist"], initial_mpd)
                        rec["collapse_warning"] = True
                history.append(rec)
                if log_file is not None:
                    log_file.write(json.dumps(rec, sort_keys=True) + "\n")
                    log_file.flush()
                if ckpt_path is not None:
                    save_checkpoint(ckpt_path, net, adam, done, meta)
            elif done == end and ckpt_path is not None:
                save_checkpoint(ckpt_path, net, adam, done, meta)
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(net, adam, end, history, ckpt_path)


def _triplet_step(net: EmbeddingNet, col: Collated, pairs: np.ndarray, margin: float, rng: Rng):
    """Text anchors, their paired images as positives, and the batch's images
    shifted by a random offset as negatives."""
    h = pairs.shape[0]
    idx = np.concatenate([pairs[:, 1], pairs[:, 0]])  # images first, then texts
    b = col.take(idx)
    out = net.forward(b, "train", rng, heads=False)
    img, txt = out.embedding[:h], out.embedding[h:]
    shift = int(rng.fork("negatives").integers(1, h)) if h > 1 else 0
    neg = np.roll(img, shift, axis=0)
    loss, da, dp, dn = triplet_ranking_loss(txt, img, neg, margin)
    d_emb = np.concatenate([dp + np.roll(dn, -shift, axis=0), da])
    grads = net.backward_embedding(d_emb, out)
    return loss, 0.0, grads


def train_triplet_baseline(config: TrainConfig, model_config: ModelConfig, train_samples,
                           test_samples=None, out_dir=None, resume=None) -> TrainResult:
    d = config.to_dict()
    d["mode"] = "triplet_baseline"
    return train(TrainConfig.from_dict(d), model_config, train_samples, test_samples, out_dir, resume)
