"""Samples, the synthetic covariate-shift generator, feature files, batching.

Feature files come in pairs: a JSON-lines manifest (``*.jsonl``) whose first
line is a header and whose remaining lines describe one record each, and a
raw little-endian float64 blob (``*.bin``) addressed by byte offset::

    {"format": "advmm-features", "version": 1, "kind": "features",
     "C": 80, "d_image_in": 4096, "L": 59, "d_word": 300, "blob": "train.bin"}
    {"id": "...", "domain": "image", "labels": [0, 1, ...], "pair_id": "...",
     "offset": 0, "rows": 1, "cols": 4096}

Text records may store fewer than ``L`` rows; they are zero-padded on load.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import DTYPE, DimensionError, Rng

FORMAT_NAME = "advmm-features"
FORMAT_VERSION = 1
DOMAINS = ("image", "text")


class FeatureFormatError(ValueError):
    """A feature file violates the format; the message names the record."""


class DomainExhaustedError(ValueError):
    pass


@dataclass
class Sample:
    id: str
    domain: str
    feature: np.ndarray
    labels: np.ndarray
    pair_id: str | None = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")


@dataclass
class SynthSpec:
    latent_dim: int = 16
    n_categories: int = 8
    n_train: int = 4000
    n_test: int = 1000
    d_image: int = 64
    d_word: int = 32
    max_len: int = 12
    min_len: int = 6
    noise_image: float = 0.05
    noise_text: float = 0.05
    text_position_spread: float = 0.3
    image_nonlinearity: str = "tanh"
    identity_image_map: bool = False

    def validate(self) -> None:
        for name in ("latent_dim", "n_categories", "d_image", "d_word", "max_len", "min_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"SynthSpec.{name} must be >= 1, got {getattr(self, name)}")
        for name in ("n_train", "n_test"):
            if getattr(self, name) < 0:
                raise ValueError(f"SynthSpec.{name} must be >= 0")
        if self.min_len > self.max_len:
            raise ValueError("SynthSpec.min_len must not exceed max_len")
        for name in ("noise_image", "noise_text", "text_position_spread"):
            if getattr(self, name) < 0:
                raise ValueError(f"SynthSpec.{name} must be >= 0, got {getattr(self, name)}")
        if self.image_nonlinearity not in ("tanh", "none"):
            raise ValueError("SynthSpec.image_nonlinearity must be 'tanh' or 'none'")
        if self.identity_image_map and self.d_image < self.latent_dim:
            raise ValueError("identity_image_map needs d_image >= latent_dim")


@dataclass
class SynthWorld:
    """The fixed random maps shared by every sample of a synthetic dataset."""
    image_map: np.ndarray            # [d_image, Z]
    text_maps: np.ndarray            # [max_len, d_word, Z]
    label_planes: np.ndarray         # [C, Z]


def make_world(spec: SynthSpec, rng: Rng) -> SynthWorld:
    Z = spec.latent_dim
    if spec.identity_image_map:
        image_map = np.eye(spec.d_image, Z)
    else:
        image_map = rng.fork("image_map").gaussian((spec.d_image, Z), 0.0, 1.0 / np.sqrt(Z))
    # per-position maps = shared map + position-specific deviation
    shared = rng.fork("text_shared").gaussian((1, spec.d_word, Z))
    dev = rng.fork("text_maps").gaussian((spec.max_len, spec.d_word, Z))
    text_maps = (shared + spec.text_position_spread * dev) / np.sqrt(
        Z * (1.0 + spec.text_position_spread ** 2))
    planes = rng.fork("labels").gaussian((spec.n_categories, Z))
    return SynthWorld(image_map, text_maps, planes)


def label_rule(world: SynthWorld, z: np.ndarray) -> np.ndarray:
    """label_c = [w_c . z > 0] for latent rows ``z``."""
    return (np.atleast_2d(z) @ world.label_planes.T > 0).astype(DTYPE)


def _latents(spec: SynthSpec, world: SynthWorld, n: int, rng: Rng) -> np.ndarray:
    # rejection keeps only latents with at least one positive label
    out = np.empty((0, spec.latent_dim))
    round_ = 0
    while out.shape[0] < n:
        z = rng.fork("z", round_).gaussian((n, spec.latent_dim))
        z = z[label_rule(world, z).sum(axis=1) > 0]
        out = np.vstack([out, z])
        round_ += 1
    return out[:n]


def _render(spec: SynthSpec, world: SynthWorld, z: np.ndarray, split: str, rng: Rng) -> list[Sample]:
    n = z.shape[0]
    labels = label_rule(world, z)
    img = z @ world.image_map.T
    if spec.image_nonlinearity == "tanh":
        img = np.tanh(img)
    if spec.noise_image > 0:
        img = img + rng.fork("image_noise").gaussian(img.shape, 0.0, spec.noise_image)

    lengths = rng.fork("lengths").integers(spec.min_len, spec.max_len + 1, size=n)
    txt = np.tanh(np.einsum("lwz,nz->nlw", world.text_maps, z))
    if spec.noise_text > 0:
        txt = txt + rng.fork("text_noise").gaussian(txt.shape, 0.0, spec.noise_text)
    txt[np.arange(spec.max_len)[None, :] >= lengths[:, None]] = 0.0

    samples = []
    for i in range(n):
        pair = f"{split}-{i:06d}"
        samples.append(Sample(f"{split}-img-{i:06d}", "image", img[i].copy(), labels[i].copy(), pair))
        samples.append(Sample(f"{split}-txt-{i:06d}", "text", txt[i].copy(), labels[i].copy(), pair))
    return samples


def generate_synthetic(spec: SynthSpec, rng: Rng, return_world: bool = False):
    """Paired image/text samples sharing one latent-hyperplane labelling rule.

    Each latent ``z`` produces an image vector ``tanh(A z) + noise`` and a
    variable-length token sequence ``tanh(B_t z) + noise`` (zero-padded to
    ``max_len``); both carry ``[w_c . z > 0]`` as labels and the same pair id.
    """
    spec.validate()
    world = make_world(spec, rng.fork("world"))
    out = []
    for split, n in (("train", spec.n_train), ("test", spec.n_test)):
        srng = rng.fork(split)
        z = _latents(spec, world, n, srng) if n else np.empty((0, spec.latent_dim))
        out.append(_render(spec, world, z, split, srng))
    if return_world:
        return out[0], out[1], world
    return out[0], out[1]


# feature files ------------------------------------------------------------

def _blob_path(manifest: Path, header: dict) -> Path:
    return manifest.parent / header.get("blob", manifest.with_suffix(".bin").name)


def write_features(path, samples: list[Sample], *, C: int, d_image_in: int, L: int, d_word: int) -> None:
    """Write ``samples`` as ``<path>`` (manifest) plus ``<path minus .jsonl>.bin``."""
    path = Path(path)
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "kind": "features",
              "C": C, "d_image_in": d_image_in, "L": L, "d_word": d_word,
              "blob": path.with_suffix(".bin").name}
    _write_container(path, header, samples)


def write_embeddings(path, ids, domains, labels, embeddings, pair_ids=None) -> None:
    path = Path(path)
    emb = np.asarray(embeddings, dtype=DTYPE)
    labels = np.asarray(labels, dtype=DTYPE)
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "kind": "embeddings",
              "C": int(labels.shape[1]) if labels.ndim == 2 else 0, "D": int(emb.shape[1]),
              "blob": path.with_suffix(".bin").name}
    samples = [Sample(i, d, emb[k], labels[k], None if pair_ids is None else pair_ids[k])
               for k, (i, d) in enumerate(zip(ids, domains))]
    _write_container(path, header, samples)


def _write_container(path: Path, header: dict, samples: list[Sample]) -> None:
    offset = 0
    lines = [json.dumps(header, sort_keys=True)]
    with open(path.with_suffix(".bin"), "wb") as blob:
        for s in samples:
            feat = np.ascontiguousarray(s.feature, dtype="<f8")
            rows, cols = (1, feat.shape[0]) if feat.ndim == 1 else feat.shape
            rec = {"id": s.id, "domain": s.domain, "labels": [int(v) for v in s.labels],
                   "offset": offset, "rows": int(rows), "cols": int(cols)}
            if s.pair_id is not None:
                rec["pair_id"] = s.pair_id
            lines.append(json.dumps(rec, sort_keys=True))
            blob.write(feat.tobytes())
            offset += feat.nbytes
    path.write_text("\n".join(lines) + "\n")


def _read_container(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise FeatureFormatError(f"{path}: cannot read manifest ({e})") from e
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FeatureFormatError(f"{path}: missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise FeatureFormatError(f"{path}: malformed header ({e})") from e
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise FeatureFormatError(f"{path}: malformed header, not an {FORMAT_NAME} manifest")
    if header.get("version") != FORMAT_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {header.get('version')!r}")
    blob_path = _blob_path(path, header)
    try:
        blob = np.fromfile(blob_path, dtype="<f8") if len(lines) > 1 else np.empty(0)
    except OSError as e:
        raise FeatureFormatError(f"{path}: cannot read blob {blob_path} ({e})") from e
    records = []
    for i, ln in enumerate(lines[1:]):
        try:
            rec = json.loads(ln)
        except json.JSONDecodeError as e:
            raise FeatureFormatError(f"{path}: record {i}: malformed JSON ({e})") from e
        if not isinstance(rec, dict):
            raise FeatureFormatError(f"{path}: record {i}: not an object")
        records.append(rec)
    return header, records, blob


def _record_array(path, i, rec, blob) -> np.ndarray:
    for key in ("id", "domain", "labels", "offset", "rows", "cols"):
        if key not in rec:
            raise FeatureFormatError(f"{path}: record {i}: missing field {key!r}")
    rows, cols, offset = rec["rows"], rec["cols"], rec["offset"]
    if not all(isinstance(v, int) for v in (rows, cols, offset)) or rows < 1 or cols < 1 or offset < 0:
        raise FeatureFormatError(f"{path}: record {i} ({rec['id']}): bad rows/cols/offset")
    if offset % 8:
        raise FeatureFormatError(f"{path}: record {i} ({rec['id']}): offset not 8-byte aligned")
    start = offset // 8
    stop = start + rows * cols
    if stop > blob.size:
        raise FeatureFormatError(f"{path}: record {i} ({rec['id']}): extends past end of blob")
    arr = blob[start:stop].astype(DTYPE).reshape(rows, cols)
    if not np.all(np.isfinite(arr)):
        raise FeatureFormatError(f"{path}: record {i} ({rec['id']}): non-finite values")
    return arr


def _record_labels(path, i, rec, C) -> np.ndarray:
    labels = rec["labels"]
    if not isinstance(labels, list) or len(labels) != C:
        raise FeatureFormatError(f"{path}: record {i} ({rec['id']}): expected {C} labels")
    if any(v not in (0, 1) or isinstance(v, bool) for v in labels):
        raise FeatureFormatError(f"{path}: record {i} ({rec['id']}): labels must be 0/1")
    if C and sum(labels) == 0:
        raise FeatureFormatError(f"{path}: record {i} ({rec['id']}): no positive label")
    return np.asarray(labels, dtype=DTYPE)


def load_features(path) -> list[Sample]:
    """Load and validate a feature manifest; order is file order."""
    header, records, blob = _read_container(path)
    if header.get("kind", "features") != "features":
        raise FeatureFormatError(f"{path}: manifest holds {header.get('kind')}, not features")
    for key in ("C", "d_image_in", "L", "d_word"):
        if not isinstance(header.get(key), int) or header[key] < 1:
            raise FeatureFormatError(f"{path}: malformed header, bad or missing {key!r}")
    C, d_img, L, d_word = header["C"], header["d_image_in"], header["L"], header["d_word"]
    samples, seen = [], set()
    for i, rec in enumerate(records):
        arr = _record_array(path, i, rec, blob)
        rid = rec["id"]
        if rid in seen:
            raise FeatureFormatError(f"{path}: record {i} ({rid}): duplicate id")
        seen.add(rid)
        if rec["domain"] == "image":
            if arr.shape != (1, d_img):
                raise FeatureFormatError(
                    f"{path}: record {i} ({rid}): image shape {arr.shape}, expected (1, {d_img})")
            feat = arr[0]
        elif rec["domain"] == "text":
            if arr.shape[1] != d_word or arr.shape[0] > L:
                raise FeatureFormatError(
                    f"{path}: record {i} ({rid}): text shape {arr.shape}, expected (<= {L}, {d_word})")
            feat = np.zeros((L, d_word), dtype=DTYPE)
            feat[:arr.shape[0]] = arr
        else:
            raise FeatureFormatError(f"{path}: record {i} ({rid}): unknown domain {rec['domain']!r}")
        samples.append(Sample(rid, rec["domain"], feat, _record_labels(path, i, rec, C),
                              rec.get("pair_id")))
    return samples


def feature_header(path) -> dict:
    header, _, _ = _read_container(path)
    return header


def load_embeddings(path):
    """Read an embedding export: returns ``(ids, domains, pair_ids, labels, emb)``."""
    header, records, blob = _read_container(path)
    if header.get("kind") != "embeddings":
        raise FeatureFormatError(f"{path}: manifest holds {header.get('kind')}, not embeddings")
    D, C = header["D"], header["C"]
    ids, domains, pairs, labels = [], [], [], []
    emb = np.empty((len(records), D), dtype=DTYPE)
    for i, rec in enumerate(records):
        arr = _record_array(path, i, rec, blob)
        if arr.shape != (1, D):
            raise FeatureFormatError(f"{path}: record {i} ({rec['id']}): shape {arr.shape}, expected (1, {D})")
        emb[i] = arr[0]
        ids.append(rec["id"])
        domains.append(rec["domain"])
        pairs.append(rec.get("pair_id"))
        labels.append(np.asarray(rec["labels"], dtype=DTYPE))
    labels = np.vstack(labels) if labels else np.empty((0, C))
    return ids, domains, pairs, labels, emb


# batching -----------------------------------------------------------------

@dataclass
class Batch:
    """Samples split by domain; ``img_pos``/``txt_pos`` are row positions in
    the batch so outputs come back in the caller's sample order."""
    images: np.ndarray          # [Ni, d_image_in]
    texts: np.ndarray           # [Nt, L, d_word]
    img_pos: np.ndarray
    txt_pos: np.ndarray
    labels: np.ndarray          # [N, C]
    domains: np.ndarray         # [N] 0 = image, 1 = text

    @property
    def size(self) -> int:
        return self.labels.shape[0]


@dataclass
class Collated:
    """Array view of a sample list for fast batch assembly. Pair ids are
    deliberately not carried."""
    images: np.ndarray
    texts: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    row: np.ndarray             # position of each sample inside images/texts
    ids: list = field(default_factory=list)

    def take(self, idx) -> Batch:
        idx = np.asarray(idx, dtype=np.int64)
        dom = self.domains[idx]
        img_pos = np.flatnonzero(dom == 0)
        txt_pos = np.flatnonzero(dom == 1)
        return Batch(self.images[self.row[idx[img_pos]]], self.texts[self.row[idx[txt_pos]]],
                     img_pos, txt_pos, self.labels[idx], dom)

    def __len__(self) -> int:
        return self.labels.shape[0]


def collate(samples: list[Sample], d_image_in: int | None = None, L: int | None = None,
            d_word: int | None = None, n_categories: int | None = None) -> Collated:
    if d_image_in is None:
        d_image_in = next((s.feature.shape[0] for s in samples if s.domain == "image"), 0)
    if L is None or d_word is None:
        L, d_word = next((s.feature.shape for s in samples if s.domain == "text"), (0, 0))
    if n_categories is None:
        n_categories = samples[0].labels.shape[0] if samples else 0
    imgs, txts = [], []
    for s in samples:
        x = s.feature
        if s.domain == "text" and x.ndim == 2 and x.shape[0] < L and x.shape[1] == d_word:
            # shorter sentences get zero rows at the bottom
            x = np.vstack([x, np.zeros((L - x.shape[0], d_word), dtype=DTYPE)])
        want = (d_image_in,) if s.domain == "image" else (L, d_word)
        if x.shape != want:
            raise DimensionError(f"sample {s.id}: feature shape {x.shape}, expected {want}")
        if s.labels.shape != (n_categories,):
            raise DimensionError(f"sample {s.id}: {s.labels.shape[0]} labels, expected {n_categories}")
        (imgs if s.domain == "image" else txts).append(x)
    domains = np.array([0 if s.domain == "image" else 1 for s in samples], dtype=np.int64)
    row = np.zeros(len(samples), dtype=np.int64)
    row[domains == 0] = np.arange(int((domains == 0).sum()))
    row[domains == 1] = np.arange(int((domains == 1).sum()))
    return Collated(
        np.array(imgs, dtype=DTYPE).reshape(len(imgs), d_image_in),
        np.array(txts, dtype=DTYPE).reshape(len(txts), L, d_word),
        np.array([s.labels for s in samples], dtype=DTYPE).reshape(len(samples), n_categories),
        domains, row, [s.id for s in samples])


def batch_iter(samples, batch_size: int, rng: Rng | None, balanced: bool, train: bool = True):
    """Index batches over one epoch.

    ``samples`` is a sample list or a domain array (0 image, 1 text).
    Balanced batches hold ``batch_size // 2`` of each domain. In train mode
    the trailing partial batch is dropped; otherwise it is kept. Without an
    ``rng`` the order is not shuffled.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    domains = _domain_array(samples)
    n = domains.shape[0]
    shuffle = (lambda a: a[rng.permutation(a.shape[0])]) if rng is not None else (lambda a: a)
    if not balanced:
        order = shuffle(np.arange(n))
        stop = n - n % batch_size if train else n
        return [order[i:i + batch_size] for i in range(0, stop, batch_size)]
    if batch_size % 2:
        raise ValueError(f"balanced batches need an even batch_size, got {batch_size}")
    half = batch_size // 2
    img = shuffle(np.flatnonzero(domains == 0))
    txt = shuffle(np.flatnonzero(domains == 1))
    if min(img.size, txt.size) < half:
        raise DomainExhaustedError(
            f"balanced batch of {batch_size} needs {half} per domain; have image={img.size}, text={txt.size}")
    nb = min(img.size, txt.size) // half
    batches = [np.concatenate([img[k * half:(k + 1) * half], txt[k * half:(k + 1) * half]])
               for k in range(nb)]
    if not train:
        rest = np.concatenate([img[nb * half:], txt[nb * half:]])
        if rest.size:
            batches.append(rest)
    return batches


def _domain_array(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        return samples
    if isinstance(samples, Collated):
        return samples.domains
    return np.array([0 if s.domain == "image" else 1 for s in samples], dtype=np.int64)


def strip_pair_ids(samples: list[Sample]) -> list[Sample]:
    return [Sample(s.id, s.domain, s.feature, s.labels, None) for s in samples]


def dataset_summary(samples: list[Sample]) -> dict:
    out = {}
    for dom in DOMAINS:
        sel = [s for s in samples if s.domain == dom]
        counts = np.sum([s.labels for s in sel], axis=0) if sel else []
        out[dom] = {"count": len(sel), "per_class": [int(c) for c in counts]}
    return out


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
