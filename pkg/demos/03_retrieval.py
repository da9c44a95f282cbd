"""
Exact nearest neighbours and recall@K
=====================================

Sentence-to-image search is a kNN query restricted to image rows.
recall@K asks how often the true partner lands in the top K.
"""
import numpy as np

from advmm import evaluation as E
from advmm.tensor import Rng

rng = Rng(0)
n = 200
img = rng.gaussian((n, 16))
txt = img + 0.8 * rng.gaussian((n, 16))  # noisy copies: related pairs

ids = [f"img-{i:03d}" for i in range(n)] + [f"txt-{i:03d}" for i in range(n)]
domains = ["image"] * n + ["text"] * n
pairs = [f"p{i}" for i in range(n)] * 2
index = E.EmbeddingIndex(ids, domains, np.vstack([img, txt]), pair_ids=pairs)

for i, d in E.knn_search(index, txt[7], k=5, restrict_domain="image"):
    print(f"{i}  {d:.4f}")

for direction in E.DIRECTIONS:
    print(direction, E.recall_at_k(index, direction))

# With unrelated embeddings recall@K should sit near K / n.
null = E.EmbeddingIndex(ids, domains, rng.gaussian((2 * n, 16)), pair_ids=pairs)
print("null model", E.recall_at_k(null, "txt2img"), "expected", [k / n for k in (1, 5, 10)])

# Two-dimensional projection for plotting
proj, ratio = E.pca_project(np.vstack([img, txt]))
print("PCA explained variance", ratio.round(4))
