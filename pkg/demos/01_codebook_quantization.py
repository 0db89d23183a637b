"""Codebooks and the discrete<->continuous conversion maps.

Builds the default structured codebook (100 units in 16 dimensions, grouped
into 10 semantic classes), then walks through the two conversion functions
and their robustness: quantization absorbs any perturbation smaller than
half the minimum centroid gap, and k-NN replacement stays inside a unit's
semantic class.

Run:  python demos/01_codebook_quantization.py
"""

import numpy as np

from unitdiff import (
    embed,
    fit_kmeans,
    knn_perturb,
    make_structured_codebook,
    min_centroid_gap,
    quantize,
)

cb = make_structured_codebook(n_classes=10, per_class=10, dim=16, seed=0)
print(f"codebook: K={cb.K} units, D={cb.D} dims, {cb.n_classes} classes")
print(f"min centroid gap: {min_centroid_gap(cb):.3f}")

# embed/quantize round-trip over every unit
units = np.arange(cb.K)
assert np.array_equal(quantize(cb, embed(cb, units)), units)
print("round trip quantize(embed(u)) == u holds for all", cb.K, "units")

# perturbations below half the minimum gap never change the assignment
rng = np.random.default_rng(1)
radius = 0.49 * min_centroid_gap(cb)
x = rng.integers(0, cb.K, size=1000)
noise = rng.standard_normal((1000, cb.D))
noise *= radius / np.linalg.norm(noise, axis=1, keepdims=True)
survived = (quantize(cb, embed(cb, x) + noise) == x).mean()
print(f"perturbation of norm {radius:.2f} (< half gap): {survived:.1%} units unchanged")

# k-NN replacement is semantically local: neighbors share the class
for k in (1, 5, 10, 50):
    out = knn_perturb(cb, x, k, seed=2)
    same_unit = (out == x).mean()
    same_class = (cb.meta_labels[out] == cb.meta_labels[x]).mean()
    print(f"k={k:3d}: same unit {same_unit:5.1%}   same class {same_class:5.1%}")

# the codebook can also be fitted to data with k-means
pts = np.concatenate([
    mean + 0.1 * rng.standard_normal((60, 2))
    for mean in ([0, 0], [8, 0], [0, 8], [8, 8])
])
fitted = fit_kmeans(pts, n_clusters=4, seed=3)
print("k-means on 4 blobs ->", np.round(np.sort(fitted.centroids, axis=0), 2).tolist())
