"""Label-consistent exact nearest-neighbour correspondences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud
from .errors import MissingLabelIndex

# candidates re-ranked with exact arithmetic; covers ties and kd-tree rounding
_CANDIDATES = 4


@dataclass(frozen=True, eq=False)
class _SubIndex:
    tree: cKDTree
    members: np.ndarray  # target indices, ascending
    points: np.ndarray


def _sub_index(points: np.ndarray, members: np.ndarray) -> _SubIndex:
    pts = points[members]
    return _SubIndex(cKDTree(pts), members, pts)


@dataclass(frozen=True, eq=False)
class SemanticIndex:
    per_label: dict
    global_index: _SubIndex | None
    semantic: bool
    size: int

    def query(self, points: np.ndarray, label=None, workers: int = 1):
        """Exact nearest target for each row of ``points`` among targets with ``label``.

        ``label=None`` searches every target point. Returns target indices and
        squared distances; equal distances resolve to the lowest target index.
        """
        sub = self.global_index if label is None else self.per_label[label]
        return _query(sub, points, workers)


def _query(sub: _SubIndex, points: np.ndarray, workers: int):
    k = min(_CANDIDATES, len(sub.members))
    _, cand = sub.tree.query(points, k=k, workers=workers)
    cand = cand.reshape(len(points), k)
    diff = points[:, None, :] - sub.points[cand]
    d2 = (diff * diff).sum(axis=-1)
    glob = sub.members[cand]
    # lexicographic (distance, index) minimum
    dmin = d2.min(axis=1)
    tied = d2 == dmin[:, None]
    best = np.where(tied, glob, np.iinfo(np.int64).max).min(axis=1)
    return best, dmin


def build_index(target: PointCloud, semantic: bool = True) -> SemanticIndex:
    pts = target.points
    per_label = {}
    if semantic:
        for lab in target.label_set:
            per_label[lab] = _sub_index(pts, np.flatnonzero(target.labels == lab))
    glob = _sub_index(pts, np.arange(len(pts)))
    return SemanticIndex(per_label, glob, semantic, len(pts))


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Per source point: matched target index, squared distance, source label."""

    target_index: np.ndarray
    sq_dist: np.ndarray
    source_label: np.ndarray

    def __len__(self):
        return len(self.target_index)


def match(
    index: SemanticIndex,
    source: PointCloud,
    fallback_global: bool = False,
    points: np.ndarray | None = None,
    workers: int = 1,
) -> Correspondences:
    """Match every source point to its nearest same-label target point.

    ``points`` overrides the source positions (e.g. a moved copy) while the
    source labels still drive the label constraint.
    """
    pts = source.points if points is None else np.asarray(points, dtype=np.float64)
    n = len(pts)
    tidx = np.empty(n, dtype=np.int64)
    d2 = np.empty(n, dtype=np.float64)
    if not index.semantic:
        tidx[:], d2[:] = index.query(pts, None, workers)
        return Correspondences(tidx, d2, source.labels.copy())
    missing = sorted(set(source.label_set) - set(index.per_label))
    if missing and not fallback_global:
        raise MissingLabelIndex(missing)
    for lab in source.label_set:
        sel = np.flatnonzero(source.labels == lab)
        key = lab if lab in index.per_label else None
        tidx[sel], d2[sel] = index.query(pts[sel], key, workers)
    return Correspondences(tidx, d2, source.labels.copy())
