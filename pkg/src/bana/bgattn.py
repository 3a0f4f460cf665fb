"""Background queries, background attention maps, and background-aware pooling.

The steps implemented here turn a feature map plus box annotations into
per-box foreground descriptors:

1. split the feature grid into N x N cells and average the features of each
   cell over the definite background (the pixels outside all boxes), giving
   one background query per cell that touches the background;
2. score every pixel inside the boxes by its mean truncated cosine
   similarity to those queries -- the attention map A, where high values
   mean "looks like background";
3. pool the features of each box with weights 1 - A, so background-like
   pixels contribute little. With A = 0 this degrades to plain average
   pooling over the box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import BBox, BoxSet, as_feature_map, box_interior_mask

# Below this total weight the pooled feature falls back to the plain mean.
_WEIGHT_EPS = 1e-12


@dataclass
class QuerySet:
    """Background queries: one mask-weighted mean feature per valid cell."""

    vectors: np.ndarray  # (J, C) float64
    cell_ids: np.ndarray  # (J,) int, row-major cell index in [0, N*N)
    grid_size: int

    @property
    def count(self) -> int:
        return int(self.vectors.shape[0])


@dataclass
class PooledFeature:
    """Foreground descriptor of one box plus its total foreground weight."""

    vector: np.ndarray  # (C,)
    foreground_weight: float


def _grid_cells(h: int, w: int, n: int):
    """Row-major (cell_id, row_slice, col_slice) for an n x n partition."""
    for r in range(n):
        y0, y1 = (r * h) // n, ((r + 1) * h) // n
        for c in range(n):
            x0, x1 = (c * w) // n, ((c + 1) * w) // n
            yield r * n + c, slice(y0, y1), slice(x0, x1)


def extract_queries(features: np.ndarray, background_mask: np.ndarray, grid_size: int) -> QuerySet:
    """Mask-weighted mean feature of every grid cell that touches background.

    Cells whose pixels are all covered by boxes carry no information about
    the background and are skipped, so the result may hold fewer than
    ``grid_size**2`` queries -- possibly zero for a fully boxed image.
    """
    f = as_feature_map(features)
    if grid_size < 1:
        raise ValueError(f"grid_size must be >= 1, got {grid_size}")
    m = np.asarray(background_mask)
    if m.shape != f.shape[1:]:
        raise ValueError(f"mask shape {m.shape} does not match feature grid {f.shape[1:]}")
    m = m.astype(np.float64)
    vectors, ids = [], []
    for cell_id, rows, cols in _grid_cells(f.shape[1], f.shape[2], grid_size):
        weight = m[rows, cols].sum()
        if weight <= 0.0:
            continue
        vectors.append((f[:, rows, cols] * m[rows, cols]).sum(axis=(1, 2)) / weight)
        ids.append(cell_id)
    if vectors:
        vec = np.stack(vectors)
    else:
        vec = np.zeros((0, f.shape[0]), dtype=np.float64)
    return QuerySet(vectors=vec, cell_ids=np.asarray(ids, dtype=np.intp), grid_size=grid_size)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    # Zero-norm rows stay zero, which makes their cosine contributions 0.
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0.0)


def attention_map(features: np.ndarray, queries: QuerySet, boxes: BoxSet) -> np.ndarray:
    """Per-pixel background likelihood in [0, 1].

    Outside every box the pixel is definite background and A = 1. Inside,
    A(p) is the mean over queries of ReLU(cos(f(p), q_j)). With no valid
    query (fully boxed image) A = 0 inside the boxes, which turns the
    downstream pooling into a plain box average.
    """
    f = as_feature_map(features)
    c, h, w = f.shape
    inside = box_interior_mask(boxes, h, w).astype(bool)
    if queries.count == 0:
        return np.where(inside, 0.0, 1.0)
    fhat = _unit_rows(f.reshape(c, -1).T)  # (HW, C)
    qhat = _unit_rows(queries.vectors.astype(np.float64))  # (J, C)
    sims = np.maximum(fhat @ qhat.T, 0.0)  # ReLU-truncated cosines
    a = sims.mean(axis=1).reshape(h, w)
    a[~inside] = 1.0
    return a


def bap_pool(features: np.ndarray, attention: np.ndarray, box: BBox) -> PooledFeature:
    """Weighted average of the box features with foreground weights 1 - A.

    If the total weight inside the box is (numerically) zero -- every pixel
    judged background -- the box still needs a descriptor, so the plain
    average over the box is returned with foreground_weight 0.
    """
    f = as_feature_map(features)
    a = np.asarray(attention, dtype=np.float64)
    if a.shape != f.shape[1:]:
        raise ValueError(f"attention shape {a.shape} does not match feature grid {f.shape[1:]}")
    if box.xmax > f.shape[2] or box.ymax > f.shape[1]:
        raise ValueError(f"box {box} exceeds the {f.shape[1]}x{f.shape[2]} feature grid")
    rows, cols = box.slices()
    patch = f[:, rows, cols]
    weights = 1.0 - a[rows, cols]
    total = weights.sum()
    if total <= _WEIGHT_EPS:
        return PooledFeature(vector=patch.mean(axis=(1, 2)), foreground_weight=0.0)
    return PooledFeature(
        vector=(patch * weights).sum(axis=(1, 2)) / total,
        foreground_weight=float(total),
    )
