"""Central finite-difference checks, one function per layer.

Each ``check_*`` builds a random small instance from ``seed`` and returns the
worst per-entry relative error between the analytic backward pass and
central differences (h = 1e-5) of a random linear functional of the output.
"""
import numpy as np

from advmm import layers as L
from advmm.data import Sample
from advmm.model import EmbeddingNet, ModelConfig
from advmm.tensor import Rng

H = 1e-5


def numeric_grad(f, x, h=H):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    return float(np.max(np.abs(a - n) / np.maximum(floor, np.abs(a) + np.abs(n)), initial=0.0))


def _away_from(r, shape, bad, margin=1e-4):
    """Gaussian draw with entries kept at least ``margin`` from ``bad``."""
    x = r.gaussian(shape)
    close = np.abs(x - bad) < margin
    while close.any():
        x[close] = r.gaussian((int(close.sum()),))
        close = np.abs(x - bad) < margin
    return x


def _dims(r, lo=1, hi=8, n=2):
    return [int(v) for v in r.integers(lo, hi + 1, size=n)]


def check_fc(seed):
    r = Rng(seed)
    B = int(r.integers(1, 5))
    din, dout = _dims(r)
    x, w, b = r.gaussian((B, din)), r.gaussian((din, dout)), r.gaussian((dout,))
    proj = r.gaussian((B, dout))
    f = lambda: float((L.fc_forward(x, w, b)[0] * proj).sum())
    dx, dw, db = L.fc_backward(proj, L.fc_forward(x, w, b)[1])
    return max(rel_error(dx, numeric_grad(f, x)), rel_error(dw, numeric_grad(f, w)),
               rel_error(db, numeric_grad(f, b)))


def check_relu(seed):
    r = Rng(seed)
    B = int(r.integers(1, 5))
    (d,) = _dims(r, n=1)
    x = _away_from(r, (B, d), 0.0)
    proj = r.gaussian((B, d))
    f = lambda: float((L.relu_forward(x)[0] * proj).sum())
    dx = L.relu_backward(proj, L.relu_forward(x)[1])
    return rel_error(dx, numeric_grad(f, x))


def check_dropout(seed):
    r = Rng(seed)
    B = int(r.integers(1, 5))
    (d,) = _dims(r, n=1)
    x = r.gaussian((B, d))
    rate = float(r.uniform((1,), 0.1, 0.9)[0])
    mask = r.bernoulli((B, d), 1 - rate)
    proj = r.gaussian((B, d))
    f = lambda: float((L.dropout_forward(x, rate, "train", mask=mask)[0] * proj).sum())
    dx = L.dropout_backward(proj, L.dropout_forward(x, rate, "train", mask=mask)[1])
    return rel_error(dx, numeric_grad(f, x))


def check_batchnorm(seed):
    r = Rng(seed)
    B = int(r.integers(2, 5))
    (d,) = _dims(r, n=1)
    x = r.gaussian((B, d)) * 2 + 0.5
    gamma, beta = r.gaussian((d,)), r.gaussian((d,))
    proj = r.gaussian((B, d))
    errs = []
    for mode in ("train", "eval"):
        state = {"running_mean": r.gaussian((d,)), "running_var": r.uniform((d,), 0.5, 2.0)}
        frozen = dict(state)

        def f():
            st = dict(frozen)
            return float((L.batchnorm_forward(x, gamma, beta, st, mode)[0] * proj).sum())
        dx, dg, dbeta = L.batchnorm_backward(proj, L.batchnorm_forward(x, gamma, beta, dict(frozen), mode)[1])
        errs += [rel_error(dx, numeric_grad(f, x), 1e-5), rel_error(dg, numeric_grad(f, gamma)),
                 rel_error(dbeta, numeric_grad(f, beta))]
    return max(errs)


def check_l2norm(seed):
    r = Rng(seed)
    B = int(r.integers(1, 5))
    (d,) = _dims(r, n=1)
    x = r.gaussian((B, d)) + 0.1
    proj = r.gaussian((B, d))
    f = lambda: float((L.l2norm_forward(x)[0] * proj).sum())
    dx = L.l2norm_backward(proj, L.l2norm_forward(x)[1])
    return rel_error(dx, numeric_grad(f, x))


def _textcnn_instance(r):
    B = int(r.integers(1, 4))
    Lx = int(r.integers(4, 8))
    d = int(r.integers(1, 5))
    F = int(r.integers(1, 4))
    widths = sorted(set(int(w) for w in r.integers(1, 5, size=2)))
    while True:
        x = r.gaussian((B, Lx, d))
        ks = {w: r.gaussian((w, d, F)) for w in widths}
        bs = {w: r.gaussian((F,)) * 0.1 for w in widths}
        ok = True
        for w in widths:
            P = Lx - w + 1
            from numpy.lib.stride_tricks import sliding_window_view
            win = sliding_window_view(x, w, axis=1).transpose(0, 1, 3, 2).reshape(B, P, w * d)
            conv = win @ ks[w].reshape(w * d, F) + bs[w]
            top = np.sort(conv, axis=1)
            # pooling ties and the relu kink are non-differentiable points
            if P > 1 and (top[:, -1] - top[:, -2] < 1e-4).any():
                ok = False
            if (np.abs(conv) < 1e-4).any():
                ok = False
        if ok:
            return x, ks, bs


def check_textcnn(seed):
    r = Rng(seed)
    x, ks, bs = _textcnn_instance(r)
    out, cache = L.textcnn_forward(x, ks, bs)
    proj = r.gaussian(out.shape)
    f = lambda: float((L.textcnn_forward(x, ks, bs)[0] * proj).sum())
    dx, dk, db = L.textcnn_backward(proj, cache)
    errs = [rel_error(dx, numeric_grad(f, x))]
    for w in ks:
        errs += [rel_error(dk[w], numeric_grad(f, ks[w])), rel_error(db[w], numeric_grad(f, bs[w]))]
    return max(errs)


def check_sigmoid_xent(seed):
    r = Rng(seed)
    B = int(r.integers(1, 5))
    (C,) = _dims(r, n=1)
    z = r.gaussian((B, C)) * 3
    t = r.bernoulli((B, C), 0.5)
    f = lambda: L.sigmoid_xent(z, t)[0]
    return rel_error(L.sigmoid_xent(z, t)[1], numeric_grad(f, z))


def check_triplet(seed):
    r = Rng(seed)
    B = int(r.integers(1, 5))
    (D,) = _dims(r, n=1)
    margin = 0.5
    while True:
        a, p, n = r.gaussian((B, D)), r.gaussian((B, D)), r.gaussian((B, D))
        hinge = margin + ((a - p) ** 2).sum(1) - ((a - n) ** 2).sum(1)
        if (np.abs(hinge) > 1e-4).all():
            break
    f = lambda: L.triplet_ranking_loss(a, p, n, margin)[0]
    _, da, dp, dn = L.triplet_ranking_loss(a, p, n, margin)
    return max(rel_error(da, numeric_grad(f, a)), rel_error(dp, numeric_grad(f, p)),
               rel_error(dn, numeric_grad(f, n)))


TINY = dict(d_image_in=5, d_word=3, max_len=6, d_hidden=6, D=4, n_categories=3,
            widths=(2, 3), n_filters=2, head_hidden=5, dropout=0.3)


def tiny_batch(r, cfg, n_img=2, n_txt=2):
    samples = []
    for i in range(n_img):
        samples.append(Sample(f"i{i}", "image", r.gaussian((cfg.d_image_in,)),
                              r.bernoulli((cfg.n_categories,), 0.5)))
    for i in range(n_txt):
        samples.append(Sample(f"t{i}", "text", r.gaussian((cfg.max_len, cfg.d_word)),
                              r.bernoulli((cfg.n_categories,), 0.5)))
    return samples


def _near_kink(net, out, margin=1e-4):
    """True when the instance sits near a non-differentiable point: a relu
    input within ``margin`` of 0, a collapsed batch-norm variance or an
    all-zero row entering L2 normalisation."""
    c = out.caches
    for key, heads in (("img", "img"), ("cat", "cat"), ("dom", "dom")):
        if key not in c:
            continue
        x, w = c[key]["fc1"]
        pre = x @ w + net.params[f"{heads}.fc1.b"]
        if (np.abs(pre) < margin).any():
            return True
    for br in ("img", "txt"):
        norm = c[br]["norm"]
        if "bn" in norm and (norm["bn"][1] > 1 / np.sqrt(1e-3)).any():
            return True
        if "l2" in norm and (norm["l2"][1] < 1e-3).any():
            return True
    return False


def check_model(seed, image_norm="both", text_norm="both"):
    """Whole-network joint backward against finite differences.

    Branch parameters are checked against loss_c - lam * loss_d and head
    parameters against loss_c + loss_d, with dropout masks held fixed.
    Instances near a kink are redrawn.
    """
    r = Rng(seed)
    cfg = ModelConfig(**TINY, image_norm=image_norm, text_norm=text_norm)
    attempt = 0
    while True:
        ar = r.fork("attempt", attempt)
        net = EmbeddingNet(cfg, rng=ar.fork("init"))
        batch = net.as_batch(tiny_batch(ar.fork("data"), cfg))
        mask_rng = ar.fork("masks")
        if not _near_kink(net, net.forward(batch, "train", mask_rng)):
            break
        attempt += 1
    lam = float(r.uniform((1,), 0.1, 1.0)[0])
    yc, yd = batch.labels, batch.domains.astype(float)

    def losses():
        out = net.forward(batch, "train", mask_rng)
        return L.sigmoid_xent(out.category_logits, yc)[0], L.sigmoid_xent(out.domain_logits, yd[:, None])[0]

    out = net.forward(batch, "train", mask_rng)
    jg = net.backward_joint(out, yc, yd, lam)
    errs = []
    for name, p in net.params.items():
        if name.startswith(("img.", "txt.")):
            f = lambda: (lambda c, d: c - lam * d)(*losses())
        else:
            f = lambda: (lambda c, d: c + d)(*losses())
        errs.append(rel_error(jg.params[name], numeric_grad(f, p), 1e-5))
    return max(errs)


LAYER_CHECKS = {
    "fc": check_fc, "relu": check_relu, "dropout": check_dropout, "batchnorm": check_batchnorm,
    "l2norm": check_l2norm, "textcnn": check_textcnn, "sigmoid_xent": check_sigmoid_xent,
    "triplet": check_triplet,
}
