"""Two-branch embedding network with a category head and a gradient-reversed
domain head, plus the checkpoint container.

Image branch:  fc -> relu -> dropout -> fc -> norm
Text branch:   textcnn -> dropout -> fc -> norm
Heads:         fc -> relu -> dropout -> fc   (domain head sits behind the GRL)

``norm`` is ``bn``, ``l2``, ``both`` (batch-norm then L2) or ``none``.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from .data import Batch, Collated, collate
from .optim import AdamState
from .tensor import DTYPE, DimensionError, Rng

NORMS = ("bn", "l2", "both", "none")


@dataclass
class ModelConfig:
    d_image_in: int = 4096
    d_word: int = 300
    max_len: int = 59
    d_hidden: int = 1024
    D: int = 512
    n_categories: int = 80
    widths: tuple = (3, 4, 5)
    n_filters: int = 128
    head_hidden: int = 256
    dropout: float = 0.5
    image_norm: str = "bn"
    text_norm: str = "l2"
    category_head: bool = True
    domain_head: bool = True
    bn_momentum: float = 0.9

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.validate()

    def validate(self) -> None:
        for name in ("d_image_in", "d_word", "max_len", "d_hidden", "D", "n_categories",
                     "n_filters", "head_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1, got {getattr(self, name)}")
        if not self.widths or any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError(f"ModelConfig.widths must be strictly increasing, got {self.widths}")
        if self.widths[0] < 1 or self.widths[-1] > self.max_len:
            raise ValueError(f"ModelConfig.widths must lie in [1, max_len={self.max_len}]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("ModelConfig.dropout must lie in [0, 1)")
        for name in ("image_norm", "text_norm"):
            if getattr(self, name) not in NORMS:
                raise ValueError(f"ModelConfig.{name} must be one of {NORMS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)


def _uses_bn(norm: str) -> bool:
    return norm in ("bn", "both")


def _uses_l2(norm: str) -> bool:
    return norm in ("l2", "both")


def param_shapes(cfg: ModelConfig) -> dict:
    s = {
        "img.fc1.w": (cfg.d_image_in, cfg.d_hidden), "img.fc1.b": (cfg.d_hidden,),
        "img.fc2.w": (cfg.d_hidden, cfg.D), "img.fc2.b": (cfg.D,),
        "txt.fc.w": (cfg.n_filters * len(cfg.widths), cfg.D), "txt.fc.b": (cfg.D,),
    }
    if cfg.category_head:
        s.update({"cat.fc1.w": (cfg.D, cfg.head_hidden), "cat.fc1.b": (cfg.head_hidden,),
                  "cat.fc2.w": (cfg.head_hidden, cfg.n_categories), "cat.fc2.b": (cfg.n_categories,)})
    for w in cfg.widths:
        s[f"txt.conv{w}.k"] = (w, cfg.d_word, cfg.n_filters)
        s[f"txt.conv{w}.b"] = (cfg.n_filters,)
    for br, norm in (("img", cfg.image_norm), ("txt", cfg.text_norm)):
        if _uses_bn(norm):
            s[f"{br}.bn.gamma"] = (cfg.D,)
            s[f"{br}.bn.beta"] = (cfg.D,)
    if cfg.domain_head:
        s.update({"dom.fc1.w": (cfg.D, cfg.head_hidden), "dom.fc1.b": (cfg.head_hidden,),
                  "dom.fc2.w": (cfg.head_hidden, 1), "dom.fc2.b": (1,)})
    return s


def _fan_in(name: str, shape: tuple) -> int:
    if name.endswith(".k"):
        return shape[0] * shape[1]
    return shape[0]


def init_params(cfg: ModelConfig, rng: Rng) -> tuple[dict, dict]:
    """He-normal weights, zero biases, unit gamma / zero beta.

    Returns ``(params, buffers)``; buffers hold batch-norm running stats.
    Each tensor draws from its own named stream, so adding or removing a
    head leaves the other tensors unchanged.
    """
    cfg.validate()
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype=DTYPE)
        elif name.endswith((".b", ".beta")):
            params[name] = np.zeros(shape, dtype=DTYPE)
        else:
            std = np.sqrt(2.0 / _fan_in(name, shape))
            params[name] = rng.fork("init", name).gaussian(shape, 0.0, std)
    buffers = {}
    for br, norm in (("img", cfg.image_norm), ("txt", cfg.text_norm)):
        if _uses_bn(norm):
            buffers[f"{br}.bn.running_mean"] = np.zeros(cfg.D, dtype=DTYPE)
            buffers[f"{br}.bn.running_var"] = np.ones(cfg.D, dtype=DTYPE)
    return params, buffers


@dataclass
class ForwardOut:
    embedding: np.ndarray
    category_logits: np.ndarray | None
    domain_logits: np.ndarray | None
    batch: Batch
    caches: dict = field(default_factory=dict, repr=False)


@dataclass
class JointGrads:
    params: dict
    embedding: np.ndarray
    loss_c: float
    loss_d: float

    @property
    def loss(self) -> float:
        return self.loss_c + self.loss_d


class EmbeddingNet:
    """Parameters plus forward/backward for the full network."""

    def __init__(self, config: ModelConfig, params: dict | None = None,
                 buffers: dict | None = None, rng: Rng | None = None):
        config.validate()
        self.config = config
        if params is None:
            params, buffers = init_params(config, rng if rng is not None else Rng(0))
        self.params = params
        self.buffers = buffers if buffers is not None else {}
        self.check_shapes()

    def check_shapes(self) -> None:
        want = param_shapes(self.config)
        if set(want) != set(self.params):
            raise DimensionError(
                f"parameter set mismatch: missing {sorted(set(want) - set(self.params))}, "
                f"unexpected {sorted(set(self.params) - set(want))}")
        for name, shape in want.items():
            if self.params[name].shape != shape:
                raise DimensionError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    # -- branches ---------------------------------------------------------

    def _norm_forward(self, br: str, norm: str, h, mode):
        cache = {}
        p = self.params
        if _uses_bn(norm):
            state = {"running_mean": self.buffers[f"{br}.bn.running_mean"],
                     "running_var": self.buffers[f"{br}.bn.running_var"]}
            h, cache["bn"] = L.batchnorm_forward(h, p[f"{br}.bn.gamma"], p[f"{br}.bn.beta"], state,
                                                 mode, momentum=self.config.bn_momentum)
            self.buffers[f"{br}.bn.running_mean"] = state["running_mean"]
            self.buffers[f"{br}.bn.running_var"] = state["running_var"]
        if _uses_l2(norm):
            h, cache["l2"] = L.l2norm_forward(h)
        return h, cache

    def _norm_backward(self, br: str, dh, cache, grads):
        if "l2" in cache:
            dh = L.l2norm_backward(dh, cache["l2"])
        if "bn" in cache:
            dh, grads[f"{br}.bn.gamma"], grads[f"{br}.bn.beta"] = L.batchnorm_backward(dh, cache["bn"])
        return dh

    def _image_forward(self, x, mode, rng):
        p, c = self.params, {}
        h, c["fc1"] = L.fc_forward(x, p["img.fc1.w"], p["img.fc1.b"])
        h, c["relu"] = L.relu_forward(h)
        h, c["drop"] = L.dropout_forward(h, self.config.dropout, mode, rng)
        h, c["fc2"] = L.fc_forward(h, p["img.fc2.w"], p["img.fc2.b"])
        h, c["norm"] = self._norm_forward("img", self.config.image_norm, h, mode)
        return h, c

    def _image_backward(self, dh, c, grads):
        dh = self._norm_backward("img", dh, c["norm"], grads)
        dh, grads["img.fc2.w"], grads["img.fc2.b"] = L.fc_backward(dh, c["fc2"])
        dh = L.dropout_backward(dh, c["drop"])
        dh = L.relu_backward(dh, c["relu"])
        _, grads["img.fc1.w"], grads["img.fc1.b"] = L.fc_backward(dh, c["fc1"])

    def _text_forward(self, x, mode, rng):
        p, c = self.params, {}
        ws = self.config.widths
        h, c["cnn"] = L.textcnn_forward(x, {w: p[f"txt.conv{w}.k"] for w in ws},
                                        {w: p[f"txt.conv{w}.b"] for w in ws})
        h, c["drop"] = L.dropout_forward(h, self.config.dropout, mode, rng)
        h, c["fc"] = L.fc_forward(h, p["txt.fc.w"], p["txt.fc.b"])
        h, c["norm"] = self._norm_forward("txt", self.config.text_norm, h, mode)
        return h, c

    def _text_backward(self, dh, c, grads):
        dh = self._norm_backward("txt", dh, c["norm"], grads)
        dh, grads["txt.fc.w"], grads["txt.fc.b"] = L.fc_backward(dh, c["fc"])
        dh = L.dropout_backward(dh, c["drop"])
        _, dk, db = L.textcnn_backward(dh, c["cnn"])
        for w in self.config.widths:
            grads[f"txt.conv{w}.k"] = dk[w]
            grads[f"txt.conv{w}.b"] = db[w]

    def _head_forward(self, head: str, h, mode, rng):
        p, c = self.params, {}
        h, c["fc1"] = L.fc_forward(h, p[f"{head}.fc1.w"], p[f"{head}.fc1.b"])
        h, c["relu"] = L.relu_forward(h)
        h, c["drop"] = L.dropout_forward(h, self.config.dropout, mode, rng)
        h, c["fc2"] = L.fc_forward(h, p[f"{head}.fc2.w"], p[f"{head}.fc2.b"])
        return h, c

    def _head_backward(self, head: str, dz, c, grads):
        dh, grads[f"{head}.fc2.w"], grads[f"{head}.fc2.b"] = L.fc_backward(dz, c["fc2"])
        dh = L.dropout_backward(dh, c["drop"])
        dh = L.relu_backward(dh, c["relu"])
        dh, grads[f"{head}.fc1.w"], grads[f"{head}.fc1.b"] = L.fc_backward(dh, c["fc1"])
        return dh

    # -- public -----------------------------------------------------------

    def as_batch(self, batch) -> Batch:
        if isinstance(batch, Batch):
            return batch
        cfg = self.config
        col = collate(list(batch), cfg.d_image_in, cfg.max_len, cfg.d_word, cfg.n_categories)
        return col.take(np.arange(len(col)))

    def forward(self, batch, mode: str = "eval", rng: Rng | None = None,
                heads: bool = True) -> ForwardOut:
        """Route every sample through its branch and both heads.

        ``batch`` is a :class:`Batch` or a list of samples. Train mode needs
        ``rng`` for dropout masks (one stream per layer).
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if mode == "train" and self.config.dropout > 0 and rng is None:
            raise ValueError("train mode with dropout needs an rng")
        b = self.as_batch(batch)
        cfg = self.config
        if b.images.shape[1:] != (cfg.d_image_in,) and b.images.shape[0]:
            raise DimensionError(f"image features {b.images.shape[1:]}, expected ({cfg.d_image_in},)")
        if b.texts.shape[1:] != (cfg.max_len, cfg.d_word) and b.texts.shape[0]:
            raise DimensionError(f"text features {b.texts.shape[1:]}, expected ({cfg.max_len}, {cfg.d_word})")
        fork = (lambda k: rng.fork(k)) if rng is not None else (lambda k: None)
        caches = {}
        emb = np.empty((b.size, cfg.D), dtype=DTYPE)
        if b.img_pos.size:
            emb[b.img_pos], caches["img"] = self._image_forward(b.images, mode, fork("img"))
        if b.txt_pos.size:
            emb[b.txt_pos], caches["txt"] = self._text_forward(b.texts, mode, fork("txt"))
        cat = dom = None
        if heads and cfg.category_head:
            cat, caches["cat"] = self._head_forward("cat", emb, mode, fork("cat"))
        if heads and cfg.domain_head:
            dom, caches["dom"] = self._head_forward("dom", L.grl_forward(emb), mode, fork("dom"))
        return ForwardOut(emb, cat, dom, b, caches)

    def head_gradients(self, out: ForwardOut, category_targets, domain_targets):
        """Embedding gradients of each head taken separately, before the GRL.

        Returns ``(g_c, g_d, grads, loss_c, loss_d)``; ``grads`` holds the
        head parameter gradients (never reversed).
        """
        grads = {}
        loss_c, dz = L.sigmoid_xent(out.category_logits, category_targets)
        g_c = self._head_backward("cat", dz, out.caches["cat"], grads)
        loss_d, g_d = 0.0, np.zeros_like(g_c)
        if self.config.domain_head and out.domain_logits is not None:
            loss_d, dz = L.sigmoid_xent(out.domain_logits, np.reshape(domain_targets, (-1, 1)))
            g_d = self._head_backward("dom", dz, out.caches["dom"], grads)
        return g_c, g_d, grads, loss_c, loss_d

    def backward_embedding(self, d_emb, out: ForwardOut, grads: dict | None = None) -> dict:
        """Backpropagate an embedding gradient through both branches."""
        grads = {} if grads is None else grads
        b = out.batch
        if b.img_pos.size:
            self._image_backward(d_emb[b.img_pos], out.caches["img"], grads)
        if b.txt_pos.size:
            self._text_backward(d_emb[b.txt_pos], out.caches["txt"], grads)
        for name, shape in param_shapes(self.config).items():
            if name not in grads and (name.startswith("img.") or name.startswith("txt.")):
                grads[name] = np.zeros(shape, dtype=DTYPE)
        return grads

    def backward_joint(self, out: ForwardOut, category_targets, domain_targets,
                       lam: float) -> JointGrads:
        """Category gradient plus the GRL-reversed domain gradient at the
        embedding: dY = g_c - lam * g_d."""
        if lam < 0:
            raise ValueError(f"adaptation factor must be >= 0, got {lam}")
        category_targets = np.asarray(category_targets, dtype=DTYPE)
        if category_targets.shape != out.category_logits.shape:
            raise DimensionError(
                f"category targets {category_targets.shape} vs logits {out.category_logits.shape}")
        g_c, g_d, grads, loss_c, loss_d = self.head_gradients(out, category_targets, domain_targets)
        d_emb = g_c + L.grl_backward(g_d, lam)
        self.backward_embedding(d_emb, out, grads)
        return JointGrads(grads, d_emb, loss_c, loss_d)

    def embed(self, samples, batch_size: int = 512) -> np.ndarray:
        """Eval-mode embeddings, one row per sample, no heads."""
        if isinstance(samples, Collated):
            col = samples
        else:
            samples = list(samples)
            if not samples:
                return np.empty((0, self.config.D), dtype=DTYPE)
            cfg = self.config
            col = collate(samples, cfg.d_image_in, cfg.max_len, cfg.d_word, cfg.n_categories)
        n = len(col)
        out = np.empty((n, self.config.D), dtype=DTYPE)
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(n, start + batch_size))
            out[idx] = self.forward(col.take(idx), "eval", heads=False).embedding
        return out

    def predict(self, samples, batch_size: int = 512):
        """Eval-mode ``(category_logits, domain_logits or None)``."""
        col = samples if isinstance(samples, Collated) else collate(
            list(samples), self.config.d_image_in, self.config.max_len, self.config.d_word,
            self.config.n_categories)
        n = len(col)
        if not self.config.category_head:
            raise ValueError("model has no category head")
        cat = np.empty((n, self.config.n_categories), dtype=DTYPE)
        dom = np.empty((n, 1), dtype=DTYPE) if self.config.domain_head else None
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(n, start + batch_size))
            o = self.forward(col.take(idx), "eval")
            cat[idx] = o.category_logits
            if dom is not None:
                dom[idx] = o.domain_logits
        return cat, dom


# checkpoint container ------------------------------------------------------

MAGIC = b"ADVMMCKPT\n"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, net: EmbeddingNet, adam: AdamState | None = None, step: int = 0,
                    meta: dict | None = None) -> None:
    """Write a deterministic binary checkpoint (atomic replace).

    Layout: magic line, 8-byte little-endian header length, JSON header,
    then raw little-endian float64 tensors in header order.
    """
    tensors = [("params", k, net.params[k]) for k in sorted(net.params)]
    tensors += [("buffers", k, net.buffers[k]) for k in sorted(net.buffers)]
    adam_hdr = None
    if adam is not None:
        tensors += [("adam_m", k, adam.m[k]) for k in sorted(adam.m)]
        tensors += [("adam_v", k, adam.v[k]) for k in sorted(adam.v)]
        adam_hdr = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                    "eps": adam.eps, "t": adam.t}
    entries, offset = [], 0
    for group, name, arr in tensors:
        entries.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {"version": CKPT_VERSION, "model_config": net.config.to_dict(), "step": int(step),
              "adam": adam_hdr, "meta": meta or {}, "tensors": entries}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for _, _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns ``(net, adam_or_None, step, meta)``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: cannot read checkpoint ({e})") from e
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    blob = np.frombuffer(raw, dtype="<f8", offset=pos)
    groups = {"params": {}, "buffers": {}, "adam_m": {}, "adam_v": {}}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        start = e["offset"] // 8
        groups[e["group"]][e["name"]] = blob[start:start + n].astype(DTYPE).reshape(e["shape"])
    cfg = ModelConfig.from_dict(header["model_config"])
    net = EmbeddingNet(cfg, groups["params"], groups["buffers"])
    adam = None
    if header["adam"] is not None:
        adam = AdamState(m=groups["adam_m"], v=groups["adam_v"], **header["adam"])
    return net, adam, header["step"], header["meta"]
