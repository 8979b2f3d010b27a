"""Region-based multi-style fusion.

Segments the content relu4_1 feature map with K-means over channel-
standardized feature vectors augmented with scaled spatial coordinates,
then gives every region exactly one style: the one whose summed
correspondence confidence over the region is highest. A per-position
argmax variant is kept as the discrete baseline.
"""

from dataclasses import dataclass

import numpy as np
import torch

_STANDARDIZE_EPS = 1e-5
_CHUNK = 2048  # points per distance-matrix block, bounds memory


@dataclass
class RegionLabeling:
    """K-means segmentation of a feature grid."""
    labels: np.ndarray      # (H, W) int64 in [0, k)
    k: int
    centroids: np.ndarray   # (k, C + 2) float64


@dataclass
class StyleAssignment:
    """Mutually exclusive region -> style mapping with its vote totals."""
    region_to_style: dict
    totals: np.ndarray      # (k, num_styles) summed confidence


def _squared_distances(points, centroids):
    # Exact (no a^2+b^2-2ab cancellation), chunked to bound memory.
    n = points.shape[0]
    out = np.empty((n, centroids.shape[0]), dtype=np.float64)
    for start in range(0, n, _CHUNK):
        block = points[start:start + _CHUNK]
        diff = block[:, None, :] - centroids[None, :, :]
        out[start:start + _CHUNK] = np.einsum("nkc,nkc->nk", diff, diff)
    return out


def _kmeans_pp_init(points, k, rng):
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(n)]
    d2 = _squared_distances(points, centroids[:1]).ravel()
    for i in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centroids[i] = points[idx]
        d2 = np.minimum(d2, _squared_distances(points, centroids[i:i + 1]).ravel())
    return centroids


def kmeans(points, k, seed=0, max_iter=100):
    """Lloyd iterations with k-means++ seeding; deterministic given seed.

    Stops once the label assignment is stable or after ``max_iter``
    rounds. A cluster that comes up empty is re-seeded to the point
    currently farthest from its assigned centroid, which keeps the
    per-iteration inertia non-increasing. Returns (labels, centroids,
    inertia_history).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"expected (n, dim) points, got shape {points.shape}")
    n = points.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points ({n})")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(points, k, rng)
    labels = None
    history = []
    for _ in range(max_iter):
        d2 = _squared_distances(points, centroids)
        new_labels = d2.argmin(axis=1)
        point_d2 = d2[np.arange(n), new_labels]
        for c in range(k):
            if not (new_labels == c).any():
                farthest = int(point_d2.argmax())
                centroids[c] = points[farthest]
                new_labels[farthest] = c
                point_d2[farthest] = 0.0
        history.append(float(point_d2.sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            centroids[c] = points[labels == c].mean(axis=0)
    return labels, centroids, history


def cluster_content(feat, k=6, pos_weight=1.0, seed=0):
    """Segment a (C,H,W) content feature map into k spatial regions.

    Feature channels are standardized so distance is not dominated by
    high-variance channels; positions enter as pos_weight * (x/W, y/H).
    """
    arr = feat.detach().cpu().numpy() if isinstance(feat, torch.Tensor) else np.asarray(feat)
    if arr.ndim != 3:
        raise ValueError(f"expected a (C,H,W) feature map, got shape {arr.shape}")
    c, h, w = arr.shape
    if k > h * w:
        raise ValueError(f"k={k} exceeds the number of positions ({h * w})")
    arr = arr.astype(np.float64)
    mean = arr.mean(axis=(1, 2), keepdims=True)
    std = arr.std(axis=(1, 2), keepdims=True)
    standardized = (arr - mean) / (std + _STANDARDIZE_EPS)
    vectors = standardized.reshape(c, h * w).T
    ys, xs = np.divmod(np.arange(h * w), w)
    coords = np.stack([xs / w, ys / h], axis=1) * pos_weight
    points = np.concatenate([vectors, coords], axis=1)
    labels, centroids, _ = kmeans(points, k, seed=seed)
    return RegionLabeling(labels=labels.reshape(h, w), k=k, centroids=centroids)


def _confidence_stack(confs, expect_shape=None):
    if not confs:
        raise ValueError("at least one confidence map is required")
    arrays = []
    for i, conf in enumerate(confs):
        a = conf.detach().cpu().numpy() if isinstance(conf, torch.Tensor) else np.asarray(conf)
        if a.ndim != 2:
            raise ValueError(f"confidence map {i} is not 2-D: shape {a.shape}")
        if expect_shape is not None and a.shape != expect_shape:
            raise ValueError(
                f"confidence map {i} shape {a.shape} does not match regions {expect_shape}")
        if arrays and a.shape != arrays[0].shape:
            raise ValueError("confidence maps disagree on shape")
        arrays.append(a.astype(np.float64))
    return np.stack(arrays)


def assign_styles(regions, confs):
    """Pick, per region, the style with the highest summed confidence.

    Ties resolve to the lowest style index. The assignment is mutually
    exclusive by construction: one style per region.
    """
    stack = _confidence_stack(confs, expect_shape=regions.labels.shape)
    k = regions.k
    totals = np.zeros((k, stack.shape[0]), dtype=np.float64)
    flat_labels = regions.labels.ravel()
    flat_confs = stack.reshape(stack.shape[0], -1)
    for r in range(k):
        members = flat_labels == r
        totals[r] = flat_confs[:, members].sum(axis=1)
    mapping = {r: int(totals[r].argmax()) for r in range(k)}
    return StyleAssignment(region_to_style=mapping, totals=totals)


def assign_styles_discrete(confs):
    """Per-position argmax baseline; same lowest-index tie-break."""
    stack = _confidence_stack(confs)
    return stack.argmax(axis=0).astype(np.int64)


def style_index_map(assignment, regions):
    """Expand a region assignment to a per-position style index map."""
    lookup = np.empty(regions.k, dtype=np.int64)
    for r in range(regions.k):
        lookup[r] = assignment.region_to_style[r]
    return lookup[regions.labels]


def compose_positions(style_map, reassembled):
    """Per-position pick from a list of equally shaped (C,H,W) features.

    Every output position is copied verbatim from exactly one source; no
    cross-style blending happens anywhere.
    """
    if not reassembled:
        raise ValueError("at least one reassembled feature is required")
    shapes = {tuple(f.shape) for f in reassembled}
    if len(shapes) != 1:
        raise ValueError(f"reassembled features disagree on shape: {sorted(shapes)}")
    h, w = reassembled[0].shape[-2:]
    style_map = np.asarray(style_map)
    if style_map.shape != (h, w):
        raise ValueError(
            f"style map shape {style_map.shape} does not match features {(h, w)}")
    if style_map.min() < 0 or style_map.max() >= len(reassembled):
        raise ValueError(
            f"style index out of range [0, {len(reassembled)}): "
            f"{int(style_map.min())}..{int(style_map.max())}")
    out = torch.empty_like(reassembled[0])
    index = torch.from_numpy(style_map.astype(np.int64))
    for s, feat in enumerate(reassembled):
        mask = index == s
        if mask.any():
            out[..., mask] = feat[..., mask]
    return out


def compose_hybrid(assignment, regions, reassembled):
    """Compose the hybrid feature: region r contributes style I_R(r)."""
    return compose_positions(style_index_map(assignment, regions), reassembled)
