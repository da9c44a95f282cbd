"""
The gradient reversal layer
===========================

Forward it is the identity. Backward it multiplies the incoming gradient
by ``-lambda``, so the embedding is pushed to *increase* the domain loss
while the domain classifier above it still learns to decrease it.
"""
import numpy as np

from advmm import layers as L
from advmm.data import Sample
from advmm.model import EmbeddingNet, ModelConfig
from advmm.optim import LambdaSchedule
from advmm.tensor import Rng

x = np.array([[1.0, -2.0], [0.5, 3.0]])
print("forward :", L.grl_forward(x).tolist())
print("backward:", L.grl_backward(np.ones_like(x), 0.7).tolist())

# lambda ramps from 0 towards 1 as training progresses
sched = LambdaSchedule(max_steps=100)
for s in (0, 10, 25, 50, 100):
    print(f"step {s:>3}  lambda {sched(s):.6f}")

# In a whole network the embedding gradient is g_c - lambda * g_d,
# where g_c and g_d come from the category and domain heads.
cfg = ModelConfig(d_image_in=6, d_word=3, max_len=5, d_hidden=8, D=4, n_categories=3,
                  widths=(2, 3), n_filters=2, head_hidden=6, dropout=0.0,
                  image_norm="both", text_norm="both")
net = EmbeddingNet(cfg, rng=Rng(1))
r = Rng(2)
batch = net.as_batch(
    [Sample(f"i{k}", "image", r.gaussian((6,)), np.array([1.0, 0.0, 1.0])) for k in range(3)]
    + [Sample(f"t{k}", "text", r.gaussian((5, 3)), np.array([0.0, 1.0, 1.0])) for k in range(3)])
out = net.forward(batch, "train")
g_c, g_d, _, loss_c, loss_d = net.head_gradients(out, batch.labels, batch.domains)
for lam in (0.0, 0.5, 1.0):
    jg = net.backward_joint(out, batch.labels, batch.domains.astype(float), lam)
    gap = np.abs(jg.embedding - (g_c - lam * g_d)).max()
    print(f"lambda {lam}: |dY - (g_c - lambda g_d)| = {gap:.1e}")
print(f"reported loss = loss_c + loss_d = {loss_c:.4f} + {loss_d:.4f}")
