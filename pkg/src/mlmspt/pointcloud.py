"""Geometric kernels: farthest point sampling, kNN, inverse-distance
interpolation, the three-level sampling pyramid, and training augmentation.

All searches are brute force; clouds here are at most a few thousand points.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .tensor import ContractError, Tensor, as_tensor, matmul

INTERP_EPS = 1e-8


@dataclass
class PointCloud:
    positions: np.ndarray
    attributes: Optional[np.ndarray] = None
    point_labels: Optional[np.ndarray] = None
    shape_label: Optional[int] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ContractError(f"positions must be N x 3, got {self.positions.shape}")
        if self.positions.shape[0] < 1:
            raise ContractError("a point cloud needs at least one point")
        if not np.isfinite(self.positions).all():
            raise ContractError("positions must be finite")
        n = self.positions.shape[0]
        if self.attributes is not None:
            self.attributes = np.asarray(self.attributes)
            if self.attributes.shape[0] != n:
                raise ContractError(f"{self.attributes.shape[0]} attribute rows for {n} points")
        if self.point_labels is not None:
            self.point_labels = np.asarray(self.point_labels, dtype=np.int64)
            if self.point_labels.shape != (n,):
                raise ContractError(f"point_labels must have length {n}, got {self.point_labels.shape}")
            if n and self.point_labels.min() < 0:
                raise ContractError("point labels must be non-negative")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def features(self) -> np.ndarray:
        """Per-point input channels: xyz followed by any extra attributes."""
        if self.attributes is None:
            return self.positions
        return np.concatenate([self.positions, self.attributes], axis=1)


@dataclass
class PyramidState:
    indices: list  # per scale, indices into the original cloud
    positions: list = field(default_factory=list)

    @property
    def sizes(self) -> list:
        return [len(i) for i in self.indices]


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("qsd,qsd->qs", diff, diff)


def _pick(candidates: np.ndarray, points: np.ndarray) -> int:
    """Tie-break: lexicographically smallest coordinates, then smallest index."""
    if len(candidates) == 1:
        return int(candidates[0])
    pts = points[candidates]
    order = np.lexsort(pts.T[::-1])
    return int(candidates[order[0]])


def fps_start(points: np.ndarray) -> int:
    """Index of the point farthest from the centroid."""
    d = np.einsum("ij,ij->i", points - points.mean(axis=0), points - points.mean(axis=0))
    return _pick(np.flatnonzero(d == d.max()), points)


def farthest_point_sample(points, k: int, start: Union[str, int] = "centroid") -> np.ndarray:
    """Greedy max-min selection of ``k`` indices from an M x 3 array.

    ``start`` is ``"centroid"`` (point farthest from the centroid) or an
    explicit first index. Ties on the min-distance are broken by smallest
    coordinates (lexicographic), then smallest index.
    """
    points = np.asarray(points, dtype=np.float64)
    m = points.shape[0]
    if not 1 <= k <= m:
        raise ContractError(f"farthest_point_sample: need 1 <= k <= M, got k={k}, M={m}")
    if start == "centroid":
        first = fps_start(points)
    elif isinstance(start, (int, np.integer)) and 0 <= start < m:
        first = int(start)
    else:
        raise ContractError(f"unknown start rule {start!r}")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = first
    diff = points - points[first]
    mind = np.einsum("ij,ij->i", diff, diff)
    for j in range(1, k):
        best = mind.max()
        nxt = _pick(np.flatnonzero(mind == best), points)
        chosen[j] = nxt
        diff = points - points[nxt]
        np.minimum(mind, np.einsum("ij,ij->i", diff, diff), out=mind)
    return chosen


def knn(queries, sources, k: int) -> np.ndarray:
    """Q x k indices of the nearest sources, ascending distance, ties by index."""
    queries = np.asarray(queries, dtype=np.float64)
    sources = np.asarray(sources, dtype=np.float64)
    if not 1 <= k <= sources.shape[0]:
        raise ContractError(f"knn: need 1 <= k <= S, got k={k}, S={sources.shape[0]}")
    d = _sq_dists(queries, sources)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def interpolation_weights(src_pos, query_pos, k: int = 3) -> np.ndarray:
    """Dense Q x S matrix of normalized inverse-square-distance weights.

    Each row has ``k`` nonzero entries (the nearest sources) summing to 1.
    """
    src_pos = np.asarray(src_pos, dtype=np.float64)
    query_pos = np.asarray(query_pos, dtype=np.float64)
    if src_pos.shape[0] < k:
        raise ContractError(f"interpolate_up needs at least {k} source points, got {src_pos.shape[0]}")
    d = _sq_dists(query_pos, src_pos)
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    rows = np.arange(query_pos.shape[0])[:, None]
    w = 1.0 / (d[rows, idx] + INTERP_EPS)
    w /= w.sum(axis=1, keepdims=True)
    out = np.zeros((query_pos.shape[0], src_pos.shape[0]))
    out[rows, idx] = w
    return out


def interpolate_up(src_pos, src_feat, query_pos) -> Tensor:
    """Upsample S x D features onto query positions (k = 3 inverse distance).

    Differentiable in ``src_feat``; positions are constants.
    """
    src_feat = as_tensor(src_feat)
    w = interpolation_weights(src_pos, query_pos)
    return matmul(Tensor(w.astype(src_feat.dtype)), src_feat)


def build_pyramid(positions, scales: int = 3) -> PyramidState:
    """Chained FPS: scale i+1 samples half the points of scale i."""
    positions = np.asarray(positions)
    n = positions.shape[0]
    if n % (2 ** (scales - 1)):
        raise ContractError(f"number of points {n} must be divisible by {2 ** (scales - 1)}")
    indices = [np.arange(n)]
    for _ in range(1, scales):
        parent = indices[-1]
        local = farthest_point_sample(positions[parent], len(parent) // 2)
        indices.append(parent[local])
    return PyramidState(indices=indices, positions=[positions[i] for i in indices])


@dataclass
class AugmentConfig:
    dropout_prob: float = 0.0
    scale_lo: float = 0.8
    scale_hi: float = 1.25
    shift_lo: float = -0.1
    shift_hi: float = 0.1

    def validate(self) -> None:
        if self.scale_lo > self.scale_hi or self.shift_lo > self.shift_hi:
            raise ContractError(f"augmentation ranges inverted: {self}")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ContractError(f"dropout_prob must be in [0, 1), got {self.dropout_prob}")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0.0, 1.0, 1.0, 0.0, 0.0)


def augment(cloud: PointCloud, rng_seed, cfg: AugmentConfig) -> PointCloud:
    """Point dropout (count-preserving), global scaling, then global shift."""
    cfg.validate()
    rng = np.random.default_rng(rng_seed)
    pos = cloud.positions.copy()
    attrs = None if cloud.attributes is None else cloud.attributes.copy()
    labels = None if cloud.point_labels is None else cloud.point_labels.copy()

    dropped = rng.random(len(pos)) < cfg.dropout_prob
    survivors = np.flatnonzero(~dropped)
    if dropped.any() and len(survivors):
        keep = survivors[0]
        pos[dropped] = pos[keep]
        if attrs is not None:
            attrs[dropped] = attrs[keep]
        if labels is not None:
            labels[dropped] = labels[keep]

    s = rng.uniform(cfg.scale_lo, cfg.scale_hi)
    shift = rng.uniform(cfg.shift_lo, cfg.shift_hi, size=3)
    pos = (pos * s + shift).astype(cloud.positions.dtype, copy=False)
    return PointCloud(pos, attrs, labels, cloud.shape_label)
