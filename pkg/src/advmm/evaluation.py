"""Classification metrics, domain confusion, exact kNN search, recall@K, PCA."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from . import layers as L
from .optim import AdamState, adam_step
from .tensor import DTYPE, DimensionError, Rng


# classification -----------------------------------------------------------

def _safe_div(a, b):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    return np.divide(a, b, out=np.zeros_like(a), where=b > 0)


def prf1(pred_logits, targets, threshold: float = 0.5) -> dict:
    """Per-class and micro/macro precision, recall and F1.

    A class is predicted positive when sigmoid(logit) >= ``threshold``.
    Zero denominators give 0 (so a class never predicted has P = 0).
    """
    z = np.asarray(pred_logits, dtype=DTYPE)
    t = np.asarray(targets) > 0.5
    if z.shape != t.shape:
        raise DimensionError(f"logits {z.shape} vs targets {t.shape}")
    pred = expit(z) >= threshold
    tp = (pred & t).sum(axis=0)
    fp = (pred & ~t).sum(axis=0)
    fn = (~pred & t).sum(axis=0)
    p = _safe_div(tp, tp + fp)
    r = _safe_div(tp, tp + fn)
    f = _safe_div(2 * p * r, p + r)
    mp = float(_safe_div(tp.sum(), tp.sum() + fp.sum()))
    mr = float(_safe_div(tp.sum(), tp.sum() + fn.sum()))
    mf = float(_safe_div(2 * mp * mr, mp + mr))
    return {
        "threshold": threshold,
        "per_class": {"precision": p.tolist(), "recall": r.tolist(), "f1": f.tolist()},
        "micro": {"precision": mp, "recall": mr, "f1": mf},
        "macro": {"precision": float(p.mean()), "recall": float(r.mean()), "f1": float(f.mean())},
    }


def domain_confusion(domain_logits, domains) -> dict:
    """Accuracy of the decision sigmoid(logit) >= 0.5 <=> text.

    ``domains`` holds 0 for image and 1 for text (or the strings). 0.5 on a
    balanced set means the two domains cannot be told apart.
    """
    z = np.asarray(domain_logits, dtype=DTYPE).reshape(-1)
    d = _domain_codes(domains)
    if z.shape[0] != d.shape[0] or d.shape[0] == 0:
        raise DimensionError(f"{z.shape[0]} logits vs {d.shape[0]} domain tags")
    acc = float(((z >= 0.0).astype(np.int64) == d).mean())
    single = np.unique(d).size < 2
    if single:
        warnings.warn("domain confusion computed on a single-domain set")
    return {"accuracy": acc, "single_domain": bool(single), "n": int(d.shape[0])}


def _domain_codes(domains) -> np.ndarray:
    d = np.asarray(domains)
    if d.dtype.kind in "UO":
        return (d == "text").astype(np.int64)
    return d.astype(np.int64).reshape(-1)


def fit_logistic(x, y, l2: float = 1e-3, maxiter: int = 500):
    """L2-regularised logistic regression (L-BFGS) on standardised inputs.

    Returns a callable mapping features to logits.
    """
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=DTYPE).reshape(-1)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd < 1e-12] = 1.0
    xs = (x - mu) / sd
    n, d = xs.shape

    def obj(wb):
        w, b = wb[:d], wb[d]
        z = xs @ w + b
        loss = np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))) + 0.5 * l2 * w @ w
        g = (expit(z) - y) / n
        return loss, np.concatenate([xs.T @ g + l2 * w, [g.sum()]])

    res = minimize(obj, np.zeros(d + 1), jac=True, method="L-BFGS-B",
                   options={"maxiter": maxiter})
    w, b = res.x[:d], res.x[d]
    return lambda q: ((np.asarray(q, dtype=DTYPE) - mu) / sd) @ w + b


def fit_mlp(x, y, rng: Rng, hidden: int = 64, steps: int = 400, lr: float = 1e-2):
    """One-hidden-layer ReLU classifier, full-batch Adam on standardised
    inputs. Returns a callable mapping features to logits."""
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=DTYPE).reshape(-1, 1)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd < 1e-12] = 1.0
    xs = (x - mu) / sd
    d = xs.shape[1]
    p = {"w1": rng.fork("w1").gaussian((d, hidden), 0.0, np.sqrt(2.0 / d)),
         "b1": np.zeros(hidden),
         "w2": rng.fork("w2").gaussian((hidden, 1), 0.0, np.sqrt(2.0 / hidden)),
         "b2": np.zeros(1)}
    state = AdamState(lr=lr)
    for _ in range(steps):
        h, c1 = L.fc_forward(xs, p["w1"], p["b1"])
        a, cr = L.relu_forward(h)
        z, c2 = L.fc_forward(a, p["w2"], p["b2"])
        _, dz = L.sigmoid_xent(z, y)
        da, dw2, db2 = L.fc_backward(dz, c2)
        _, dw1, db1 = L.fc_backward(L.relu_backward(da, cr), c1)
        adam_step(p, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}, state)

    def predict(q):
        qs = (np.asarray(q, dtype=DTYPE) - mu) / sd
        return (np.maximum(qs @ p["w1"] + p["b1"], 0.0) @ p["w2"] + p["b2"])[:, 0]
    return predict


def probe_domain_accuracy(features, domains, rng: Rng, train_frac: float = 0.5,
                          kind: str = "mlp") -> float:
    """Fresh domain probe: fit on one split, report held-out accuracy.

    ``kind`` is ``"mlp"`` (FC-ReLU-FC, the domain head's shape) or
    ``"linear"`` (logistic regression). The split is stratified by domain
    and drawn from ``rng``.
    """
    x = np.asarray(features, dtype=DTYPE)
    d = _domain_codes(domains)
    tr, te = [], []
    for k, code in enumerate((0, 1)):
        idx = np.flatnonzero(d == code)
        idx = idx[rng.fork("split", k).permutation(idx.size)]
        cut = int(round(train_frac * idx.size))
        tr.append(idx[:cut])
        te.append(idx[cut:])
    tr, te = np.concatenate(tr), np.concatenate(te)
    if tr.size == 0 or te.size == 0 or np.unique(d[tr]).size < 2:
        raise ValueError("probe needs both domains on both sides of the split")
    if kind == "mlp":
        f = fit_mlp(x[tr], d[tr], rng.fork("mlp"))
    elif kind == "linear":
        f = fit_logistic(x[tr], d[tr])
    else:
        raise ValueError(f"unknown probe kind {kind!r}")
    return domain_confusion(f(x[te]), d[te])["accuracy"]


# nearest neighbours -------------------------------------------------------

@dataclass
class EmbeddingIndex:
    ids: list
    domains: list
    embeddings: np.ndarray
    pair_ids: list | None = None
    metric: str = "cosine"

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=DTYPE)
        if self.embeddings.ndim != 2:
            raise DimensionError(f"embeddings must be [N, D], got {self.embeddings.shape}")
        n = self.embeddings.shape[0]
        if len(self.ids) != n or len(self.domains) != n:
            raise DimensionError("ids/domains length does not match embeddings")
        if len(set(self.ids)) != n:
            raise ValueError("index ids must be unique")
        if self.pair_ids is not None and len(self.pair_ids) != n:
            raise DimensionError("pair_ids length does not match embeddings")
        if self.metric not in ("cosine", "euclidean"):
            raise ValueError(f"unknown metric {self.metric!r}")
        self.ids = list(self.ids)
        self.domains = list(self.domains)
        # lexicographic id rank breaks distance ties
        self._id_rank = np.empty(n, dtype=np.int64)
        self._id_rank[np.argsort(np.array(self.ids, dtype=object), kind="stable")] = np.arange(n)
        self._points = _prepare(self.embeddings, self.metric)

    def rows(self, domain: str | None = None) -> np.ndarray:
        if domain is None:
            return np.arange(len(self.ids))
        return np.flatnonzero(np.array(self.domains) == domain)

    def distances(self, query, rows=None) -> np.ndarray:
        rows = self.rows() if rows is None else rows
        q = _prepare(np.atleast_2d(np.asarray(query, dtype=DTYPE)), self.metric)
        return _pairwise(q, self._points[rows], self.metric)


def _prepare(x, metric):
    if metric == "cosine":
        n = np.sqrt((x * x).sum(axis=1, keepdims=True))
        return x / np.maximum(n, 1e-12)
    return x


def _pairwise(q, pts, metric, chunk: int = 64) -> np.ndarray:
    # explicit differences keep identical vectors at distance exactly 0
    out = np.empty((q.shape[0], pts.shape[0]), dtype=DTYPE)
    for s in range(0, q.shape[0], chunk):
        diff = q[s:s + chunk, None, :] - pts[None, :, :]
        sq = np.einsum("qnd,qnd->qn", diff, diff)
        out[s:s + chunk] = 0.5 * sq if metric == "cosine" else np.sqrt(sq)
    return out


def knn_search(index: EmbeddingIndex, query, k: int, restrict_domain: str | None = None):
    """Exact k nearest neighbours as ``[(id, distance), ...]`` ascending.

    Cosine distance is ``1 - cos``; ties go to the lexicographically
    smaller id.
    """
    rows = index.rows(restrict_domain)
    if k < 1 or k > rows.size:
        raise ValueError(f"k={k} outside [1, {rows.size}] candidate rows")
    d = index.distances(query, rows)[0]
    order = np.lexsort((index._id_rank[rows], d))[:k]
    return [(index.ids[rows[i]], float(d[i])) for i in order]


DIRECTIONS = {"img2txt": ("image", "text"), "txt2img": ("text", "image")}


def recall_at_k(index: EmbeddingIndex, direction: str, ks=(1, 5, 10)) -> dict:
    """Fraction of queries with any ground-truth partner in the top K.

    Queries are every row of the source domain; candidates every row of the
    other domain; partners share a ``pair_id``. Queries without a partner
    are excluded and counted.
    """
    if index.pair_ids is None:
        raise ValueError("recall@K needs pair ids")
    src, dst = DIRECTIONS[direction]
    qrows, crows = index.rows(src), index.rows(dst)
    cand_pairs = np.array([index.pair_ids[i] for i in crows], dtype=object)
    cand_rank = index._id_rank[crows]
    best = []
    excluded = 0
    for s in range(0, qrows.size, 256):
        block = qrows[s:s + 256]
        dist = _pairwise(index._points[block], index._points[crows], index.metric)
        for j, qi in enumerate(block):
            pid = index.pair_ids[qi]
            gt = np.flatnonzero(cand_pairs == pid) if pid is not None else np.empty(0, np.int64)
            if gt.size == 0:
                excluded += 1
                continue
            d = dist[j]
            ranks = [int(((d < d[g]) | ((d == d[g]) & (cand_rank < cand_rank[g]))).sum()) for g in gt]
            best.append(min(ranks))
    best = np.asarray(best)
    out = {f"R@{k}": float((best < k).mean()) if best.size else 0.0 for k in ks}
    out.update({"n_queries": int(best.size), "n_excluded": excluded})
    return out


# projection ---------------------------------------------------------------

def pca_project(x, out_dim: int = 2):
    """Project mean-centred rows onto the top principal directions.

    Each axis is signed so its largest-magnitude loading is positive.
    Returns ``(projection [N, out_dim], explained-variance ratios)``.
    """
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"PCA needs at least 2 rows, got shape {x.shape}")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:out_dim]
    vals = np.clip(vals, 0.0, None)
    total = vals.sum()
    comps = vecs[:, order]
    pivot = np.abs(comps).argmax(axis=0)
    comps = comps * np.sign(comps[pivot, np.arange(comps.shape[1])])
    ratios = vals[order] / total if total > 0 else np.zeros(len(order))
    return xc @ comps, ratios


def mean_pairwise_distance(x, max_rows: int = 500) -> float:
    """Mean euclidean distance over distinct pairs of the first ``max_rows`` rows."""
    x = np.asarray(x, dtype=DTYPE)[:max_rows]
    n = x.shape[0]
    if n < 2:
        return 0.0
    sq = (x * x).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0)
    iu = np.triu_indices(n, 1)
    return float(np.sqrt(d2[iu]).mean())


# reports ------------------------------------------------------------------

def report_table(report: dict) -> str:
    """Aligned-column text rendering of a metrics report."""
    lines = []
    cls = report.get("classification")
    if cls:
        lines.append(f"classification (threshold {cls['threshold']})")
        lines.append(f"  {'average':<8}{'precision':>11}{'recall':>9}{'f1':>9}")
        for avg in ("micro", "macro"):
            m = cls[avg]
            lines.append(f"  {avg:<8}{m['precision']:>11.4f}{m['recall']:>9.4f}{m['f1']:>9.4f}")
        lines.append(f"  {'class':<8}{'precision':>11}{'recall':>9}{'f1':>9}")
        pc = cls["per_class"]
        for c, (p, r, f) in enumerate(zip(pc["precision"], pc["recall"], pc["f1"])):
            lines.append(f"  {c:<8}{p:>11.4f}{r:>9.4f}{f:>9.4f}")
    dom = report.get("domain")
    if dom:
        lines.append("domain")
        for key, val in dom.items():
            lines.append(f"  {key:<22}{val if val is None or isinstance(val, str) else f'{val:.4f}':>10}")
    rec = report.get("retrieval")
    if rec == "unavailable" or rec is None:
        lines.append("retrieval: unavailable")
    else:
        lines.append("retrieval")
        lines.append(f"  {'direction':<10}{'R@1':>8}{'R@5':>8}{'R@10':>8}{'queries':>9}{'excluded':>10}")
        for direction, r in rec.items():
            lines.append(f"  {direction:<10}{r['R@1']:>8.4f}{r['R@5']:>8.4f}{r['R@10']:>8.4f}"
                         f"{r['n_queries']:>9}{r['n_excluded']:>10}")
    return "\n".join(lines) + "\n"


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
