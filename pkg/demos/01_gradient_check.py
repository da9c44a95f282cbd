"""
Checking hand-written gradients
===============================

Every layer returns ``(out, cache)`` and has a matching backward pass.
Here we compare each backward pass to central differences.
"""
import numpy as np

from advmm import layers as L
from advmm.tensor import Rng

rng = Rng(0)


def numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


# A fully connected layer followed by batch-norm and L2 normalisation,
# the same stack that ends each branch of the network.
x = rng.gaussian((5, 4))
w, b = rng.gaussian((4, 3)), np.zeros(3)
gamma, beta = np.ones(3), np.zeros(3)
proj = rng.gaussian((5, 3))  # random linear read-out makes the loss a scalar


def loss():
    h, _ = L.fc_forward(x, w, b)
    h, _ = L.batchnorm_forward(h, gamma, beta, {"running_mean": np.zeros(3),
                                                "running_var": np.ones(3)}, "train")
    h, _ = L.l2norm_forward(h)
    return float((h * proj).sum())


h1, c1 = L.fc_forward(x, w, b)
h2, c2 = L.batchnorm_forward(h1, gamma, beta, {"running_mean": np.zeros(3),
                                               "running_var": np.ones(3)}, "train")
h3, c3 = L.l2norm_forward(h2)
d = L.l2norm_backward(proj, c3)
d, dgamma, dbeta = L.batchnorm_backward(d, c2)
dx, dw, db = L.fc_backward(d, c1)

for name, analytic, param in [("x", dx, x), ("w", dw, w), ("gamma", dgamma, gamma)]:
    print(f"{name:<6} relative error {rel_error(analytic, numeric_grad(loss, param)):.2e}")

# The sentence encoder: convolution over word positions, ReLU and
# max-over-time pooling. Zero padding rows at the bottom of a sentence
# never win the max unless every real window is negative.
sent = np.zeros((2, 7, 3))
sent[:, :4] = rng.gaussian((2, 4, 3))
kernels = {2: rng.gaussian((2, 3, 4)), 3: rng.gaussian((3, 3, 4))}
biases = {2: np.zeros(4), 3: np.zeros(4)}
feat, cache = L.textcnn_forward(sent, kernels, biases)
print("sentence features", feat.shape)

# Padding windows all give the same response, which is a tie for the max
# and (with zero bias) a ReLU kink: no derivative exists there. The
# finite-difference check therefore uses sentences without padding.
full = rng.gaussian((2, 7, 3))
feat, cache = L.textcnn_forward(full, kernels, biases)
proj = rng.gaussian(feat.shape)
f = lambda: float((L.textcnn_forward(full, kernels, biases)[0] * proj).sum())
dsent, dk, _ = L.textcnn_backward(proj, cache)
print(f"textcnn dx relative error {rel_error(dsent, numeric_grad(f, full)):.2e}")
print(f"textcnn dk relative error {rel_error(dk[3], numeric_grad(f, kernels[3])):.2e}")
