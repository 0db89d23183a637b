"""K-means unit codebooks and the discrete<->continuous conversion maps.

A codebook is a set of K centroid vectors in R^D. It defines the two maps
used throughout the library:

* ``embed``   -- unit ids to centroid rows (table lookup),
* ``quantize`` -- vectors to the id of the L2-nearest centroid.

Nearest-neighbor search is exact and exhaustive, computed in double
precision, with ties broken to the lowest unit index so that every result
is reproducible bit-for-bit.

``make_structured_codebook`` builds the synthetic codebooks used by the
benchmark: clusters of centroids around well-separated class means, so
that nearby units share a semantic class (``meta_labels``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import derive_seed, generator

__all__ = [
    "Codebook",
    "fit_kmeans",
    "embed",
    "quantize",
    "knn_perturb",
    "make_structured_codebook",
    "min_centroid_gap",
    "save_codebook",
    "load_codebook",
    "DEFAULT_CLASSES",
    "DEFAULT_PER_CLASS",
    "DEFAULT_DIM",
    "DEFAULT_META_SCALE",
    "DEFAULT_INTRA_SCALE",
    "PAPER_SCALE_K",
    "PAPER_SCALE_D",
]

# Desk-scale defaults: K = 100 units in 16 dimensions, 10 semantic classes.
DEFAULT_CLASSES = 10
DEFAULT_PER_CLASS = 10
DEFAULT_DIM = 16
# Scales chosen so that unit-variance Gaussian noise leaves quantization
# intact (min centroid gap ~5) while units of a class stay mutually nearest.
DEFAULT_META_SCALE = 6.0
DEFAULT_INTRA_SCALE = 2.0

# Reference constants for the full-scale speech setting (documented, not
# used as defaults anywhere).
PAPER_SCALE_K = 1000
PAPER_SCALE_D = 768


@dataclass(frozen=True)
class Codebook:
    """K centroids of dimension D, optionally tagged with semantic classes.

    Invariants (checked at construction): centroids are finite and pairwise
    distinct; if ``meta_labels`` is present it has one entry per unit, every
    value lies in [0, C) and every class has at least one member.
    """

    centroids: np.ndarray
    meta_labels: np.ndarray | None = None

    def __post_init__(self):
        cents = np.ascontiguousarray(np.asarray(self.centroids, dtype=np.float64))
        object.__setattr__(self, "centroids", cents)
        if cents.ndim != 2 or cents.shape[0] < 1 or cents.shape[1] < 1:
            raise ValueError(f"centroids must be a K x D matrix, got shape {cents.shape}")
        if not np.all(np.isfinite(cents)):
            raise ValueError("centroids contain non-finite values")
        if _min_gap(cents) <= 0.0:
            raise ValueError("centroid rows must be pairwise distinct")
        if self.meta_labels is not None:
            labels = np.asarray(self.meta_labels, dtype=np.int64)
            object.__setattr__(self, "meta_labels", labels)
            if labels.shape != (cents.shape[0],):
                raise ValueError("meta_labels must have one entry per centroid")
            if labels.min() < 0:
                raise ValueError("meta_labels must be non-negative")
            n_classes = int(labels.max()) + 1
            present = np.bincount(labels, minlength=n_classes)
            if np.any(present == 0):
                raise ValueError("every class in [0, C) needs at least one member")

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def D(self) -> int:
        return self.centroids.shape[1]

    @property
    def n_classes(self) -> int:
        if self.meta_labels is None:
            raise ValueError("codebook has no meta_labels")
        return int(self.meta_labels.max()) + 1


def _min_gap(cents: np.ndarray) -> float:
    d2 = _pairwise_sq_dists(cents, cents)
    np.fill_diagonal(d2, np.inf)
    return float(np.sqrt(max(d2.min(), 0.0)))


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared L2 distances between rows of a (M,D) and b (N,D), as (M,N)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d2 = (a * a).sum(axis=1)[:, None] - 2.0 * (a @ b.T) + (b * b).sum(axis=1)[None, :]
    return np.maximum(d2, 0.0)


def min_centroid_gap(cb: Codebook) -> float:
    """Minimum pairwise L2 distance between centroids."""
    return _min_gap(cb.centroids)


def _check_units(units: np.ndarray, K: int) -> np.ndarray:
    u = np.asarray(units)
    if u.ndim != 1 or u.size < 1:
        raise ValueError("unit sequence must be a non-empty 1-D array")
    if not np.issubdtype(u.dtype, np.integer):
        raise ValueError("unit sequence must be integer-typed")
    u = u.astype(np.int64)
    if u.min() < 0 or u.max() >= K:
        raise ValueError(f"unit id out of range [0, {K})")
    return u


def embed(cb: Codebook, units: np.ndarray) -> np.ndarray:
    """Map unit ids to their centroid vectors: the n x D continuous sequence."""
    u = _check_units(units, cb.K)
    return cb.centroids[u].copy()


def quantize(cb: Codebook, vectors: np.ndarray) -> np.ndarray:
    """Map each row to the id of its L2-nearest centroid (ties -> lowest id)."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim == 1:
        v = v[None, :]
    if v.ndim != 2 or v.shape[1] != cb.D:
        raise ValueError(f"expected vectors with {cb.D} columns, got shape {v.shape}")
    d2 = _pairwise_sq_dists(v, cb.centroids)
    # argmin returns the first (lowest) index on exact ties
    return d2.argmin(axis=1).astype(np.int64)


def knn_perturb(cb: Codebook, units: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Replace each unit by a uniform draw from its k nearest centroids.

    The k-NN set of a unit includes the unit itself, so k=1 is the identity.
    Neighbor lists are computed by exhaustive L2 search with lowest-index
    tie-breaking; draws are deterministic given the seed.
    """
    if not 1 <= k <= cb.K:
        raise ValueError(f"k must be in [1, {cb.K}], got {k}")
    u = _check_units(units, cb.K)
    if k == 1:
        return u.copy()
    d2 = _pairwise_sq_dists(cb.centroids, cb.centroids)
    # stable sort keeps lowest index first among equal distances
    neighbors = np.argsort(d2, axis=1, kind="stable")[:, :k]
    rng = generator(seed, "knn_perturb")
    picks = rng.integers(0, k, size=u.shape[0])
    return neighbors[u, picks].astype(np.int64)


def fit_kmeans(
    points: np.ndarray,
    n_clusters: int,
    max_iters: int = 100,
    seed: int = 0,
    return_history: bool = False,
):
    """Lloyd's algorithm with k-means++ initialization.

    Deterministic for fixed inputs and seed. Empty clusters are re-seeded to
    the point farthest from its currently assigned centroid. Stops early when
    assignments no longer change.

    Returns the fitted ``Codebook``, or ``(Codebook, wcss_history)`` when
    ``return_history`` is set; the history is the within-cluster sum of
    squares after each Lloyd iteration (non-increasing).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be an M x D matrix")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points contain non-finite values")
    M = pts.shape[0]
    if n_clusters < 1 or M < n_clusters:
        raise ValueError(f"need at least n_clusters={n_clusters} points, got {M}")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")

    rng = generator(seed, "kmeans++")
    centers = _kmeanspp_init(pts, n_clusters, rng)

    history: list[float] = []
    prev_assign = None
    for _ in range(max_iters):
        d2 = _pairwise_sq_dists(pts, centers)
        assign = d2.argmin(axis=1)
        # empty-cluster rule: re-seed to the farthest point from its centroid
        counts = np.bincount(assign, minlength=n_clusters)
        if np.any(counts == 0):
            dist_to_own = d2[np.arange(M), assign].copy()
            for c in np.flatnonzero(counts == 0):
                far = int(dist_to_own.argmax())
                centers[c] = pts[far]
                assign[far] = c
                dist_to_own[far] = 0.0
            d2 = _pairwise_sq_dists(pts, centers)
            assign = d2.argmin(axis=1)
        for c in range(n_clusters):
            members = pts[assign == c]
            if len(members):
                centers[c] = members.mean(axis=0)
        wcss = float(_pairwise_sq_dists(pts, centers)[np.arange(M), assign].sum())
        history.append(wcss)
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign

    cb = Codebook(centroids=centers)
    if return_history:
        return cb, history
    return cb


def _kmeanspp_init(pts: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    M = pts.shape[0]
    centers = np.empty((k, pts.shape[1]), dtype=np.float64)
    first = int(rng.integers(0, M))
    centers[0] = pts[first]
    closest = _pairwise_sq_dists(pts, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # all remaining points coincide with chosen centers; pick any
            idx = int(rng.integers(0, M))
        else:
            idx = int(rng.choice(M, p=closest / total))
        centers[i] = pts[idx]
        d_new = _pairwise_sq_dists(pts, centers[i : i + 1])[:, 0]
        closest = np.minimum(closest, d_new)
    return centers


def make_structured_codebook(
    n_classes: int,
    per_class: int,
    dim: int,
    meta_scale: float = DEFAULT_META_SCALE,
    intra_scale: float = DEFAULT_INTRA_SCALE,
    seed: int = 0,
) -> Codebook:
    """Synthetic codebook whose units cluster into semantic classes.

    Class means are drawn from N(0, meta_scale^2 I); each class then gets
    ``per_class`` centroids at N(mean, intra_scale^2 I). Unit ids are grouped
    by class: unit u belongs to class u // per_class. On the measure-zero
    event of duplicate centroids the draw is retried with a derived seed.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if not (meta_scale > intra_scale > 0.0):
        raise ValueError("scales must satisfy meta_scale > intra_scale > 0")
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), per_class)
    attempt_seed = derive_seed(seed, "structured_codebook")
    for attempt in range(100):
        rng = np.random.default_rng(attempt_seed)
        means = rng.standard_normal((n_classes, dim)) * meta_scale
        cents = np.repeat(means, per_class, axis=0)
        cents = cents + rng.standard_normal((n_classes * per_class, dim)) * intra_scale
        if _min_gap(cents) > 0.0:
            return Codebook(centroids=cents, meta_labels=labels)
        attempt_seed = derive_seed(attempt_seed, "resample", attempt)
    raise RuntimeError("could not draw distinct centroids in 100 attempts")


# ---------------------------------------------------------------------------
# Serialization: single JSON document, floats printed with 17 significant
# digits so a reload is bit-faithful in double precision.

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_codebook(cb: Codebook, path: str | Path) -> None:
    rows = [
        "[" + ",".join(_fmt(v) for v in row) + "]" for row in cb.centroids
    ]
    if cb.meta_labels is None:
        labels = "null"
    else:
        labels = "[" + ",".join(str(int(l)) for l in cb.meta_labels) + "]"
    doc = (
        '{"version":1,"K":%d,"D":%d,"centroids":[%s],"meta_labels":%s}'
        % (cb.K, cb.D, ",".join(rows), labels)
    )
    Path(path).write_text(doc + "\n", encoding="utf-8")


def load_codebook(path: str | Path) -> Codebook:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != 1:
        raise ValueError(f"unsupported codebook version: {doc.get('version')!r}")
    cents = np.array(doc["centroids"], dtype=np.float64)
    if cents.shape != (doc["K"], doc["D"]):
        raise ValueError("codebook shape does not match header")
    labels = doc.get("meta_labels")
    meta = None if labels is None else np.array(labels, dtype=np.int64)
    return Codebook(centroids=cents, meta_labels=meta)
