"""Labeled point clouds: validation, normalization, normals and downsampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateExtent, EmptyCloud, InsufficientLabels, LabelMismatch, TooFewPoints

log = logging.getLogger(__name__)

NORMAL_TOL = 1e-6


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points in mm with one integer label per point and optional unit normals.

    Arrays are copied on construction and marked read-only.
    """

    points: np.ndarray
    labels: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = _frozen(self.points, np.float64).reshape(-1, 3)
        lab = _frozen(self.labels, np.int64).reshape(-1)
        if len(pts) == 0:
            raise EmptyCloud("point cloud has no points")
        if len(lab) != len(pts):
            raise ValueError(f"{len(pts)} points but {len(lab)} labels")
        if np.any(lab < 0):
            raise ValueError("labels must be non-negative integers")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", lab)
        if self.normals is not None:
            nrm = _frozen(self.normals, np.float64).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise ValueError(f"{len(pts)} points but {len(nrm)} normals")
            dev = np.abs(np.linalg.norm(nrm, axis=1) - 1.0)
            if np.any(dev > NORMAL_TOL):
                raise ValueError(f"normals must have unit length (max deviation {dev.max():.3g})")
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return len(self.points)

    @property
    def label_set(self) -> list[int]:
        return [int(v) for v in np.unique(self.labels)]

    def with_points(self, points, normals=None) -> PointCloud:
        return PointCloud(points, self.labels, normals)

    def subset(self, index) -> PointCloud:
        nrm = None if self.normals is None else self.normals[index]
        return PointCloud(self.points[index], self.labels[index], nrm)

    def merged_labels(self) -> PointCloud:
        """Same cloud with every point relabeled 0 (unlabeled matching)."""
        return PointCloud(self.points, np.zeros(len(self), dtype=np.int64), self.normals)


@dataclass(frozen=True)
class ValidationReport:
    source_labels: list[int]
    target_labels: list[int]
    missing: list[int] = field(default_factory=list)


def validate_pair(
    source: PointCloud, target: PointCloud, allow_label_fallback: bool = False, semantic: bool = True
) -> ValidationReport:
    if len(source) == 0 or len(target) == 0:
        raise EmptyCloud("source and target must be non-empty")
    src, tgt = source.label_set, target.label_set
    missing = sorted(set(src) - set(tgt))
    if semantic:
        if len(set(src) | set(tgt)) < 2:
            raise InsufficientLabels("semantic matching needs at least two distinct labels")
        if missing and not allow_label_fallback:
            raise LabelMismatch(missing)
    return ValidationReport(src, tgt, missing)


def estimate_normals(cloud: PointCloud, k: int = 15) -> PointCloud:
    """Unit normals from PCA of each point's k nearest neighbours (point included).

    The normal is the eigenvector of the smallest covariance eigenvalue, flipped
    to point away from the cloud centroid.
    """
    if k < 3:
        raise ValueError("k must be at least 3")
    pts = cloud.points
    if len(pts) < k + 1:
        raise TooFewPoints(f"need at least {k + 1} points for k={k}, got {len(pts)}")
    _, nbr = cKDTree(pts).query(pts, k=k + 1)
    local = pts[nbr]
    local = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    outward = np.einsum("ni,ni->n", normals, pts - pts.mean(axis=0))
    normals = np.where((outward < 0)[:, None], -normals, normals)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts, cloud.labels, normals)


def _allocate(counts: np.ndarray, n: int) -> np.ndarray:
    # largest-remainder apportionment with a floor of one point per label
    quota = counts * (n / counts.sum())
    alloc = np.maximum(np.floor(quota).astype(np.int64), 1)
    alloc = np.minimum(alloc, counts)
    order = np.argsort(-(quota - np.floor(quota)), kind="stable")
    while alloc.sum() < n:
        for i in order:
            if alloc.sum() >= n:
                break
            if alloc[i] < counts[i]:
                alloc[i] += 1
    while alloc.sum() > n:
        i = int(np.argmax(np.where(alloc > 1, alloc, -1)))
        alloc[i] -= 1
    return alloc


def downsample_stratified(cloud: PointCloud, n: int, seed: int = 0) -> PointCloud:
    """Random subset of at most ``n`` points with label proportions preserved."""
    if len(cloud) <= n:
        return cloud
    labels, counts = np.unique(cloud.labels, return_counts=True)
    if n < len(labels):
        raise ValueError(f"cannot keep {len(labels)} labels with n={n}")
    alloc = _allocate(counts, n)
    rng = np.random.default_rng(seed)
    keep = []
    for lab, m in zip(labels, alloc):
        idx = np.flatnonzero(cloud.labels == lab)
        keep.append(rng.choice(idx, size=int(m), replace=False))
    return cloud.subset(np.sort(np.concatenate(keep)))


@dataclass(frozen=True, eq=False)
class NormalizationMap:
    """Per-axis affine map ``x_n = (x_mm - offset) * scale`` onto [-1, 1]."""

    offset: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "offset", _frozen(self.offset, np.float64).reshape(3))
        object.__setattr__(self, "scale", _frozen(self.scale, np.float64).reshape(3))

    def forward(self, x):
        return (np.asarray(x, dtype=np.float64) - self.offset) * self.scale

    def inverse(self, y):
        return np.asarray(y, dtype=np.float64) / self.scale + self.offset

    @property
    def spacing_mm(self):
        """Physical length of one normalized unit along each axis."""
        return 1.0 / self.scale

    @property
    def isotropic(self) -> bool:
        return bool(np.all(self.scale == self.scale[0]))


def fit_normalization(
    a: PointCloud, b: PointCloud, margin: float = 0.05, isotropic: bool = False, strict: bool = False
) -> NormalizationMap:
    """Map the union bounding box of ``a`` and ``b`` (grown by ``margin`` of its
    extent on each side) onto [-1, 1] per axis.

    With ``isotropic`` every axis shares the scale of the longest one, so
    rotations survive the map. A zero-extent axis falls back to a 1 mm extent
    unless ``strict``.
    """
    if len(a) == 0 or len(b) == 0:
        raise EmptyCloud("cannot normalize an empty cloud")
    if margin < 0:
        raise ValueError("margin must be non-negative")
    pts = np.concatenate([a.points, b.points])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = 0.5 * (lo + hi)
    extent = hi - lo
    flat = extent <= 0
    if np.any(flat):
        if strict:
            raise DegenerateExtent(f"zero extent along axes {np.flatnonzero(flat).tolist()}")
        log.warning("zero extent along axes %s, using 1 mm", np.flatnonzero(flat).tolist())
        extent = np.where(flat, 1.0, extent)
    extent = extent * (1.0 + 2.0 * margin)
    if isotropic:
        extent = np.full(3, extent.max())
    return NormalizationMap(center, 2.0 / extent)
