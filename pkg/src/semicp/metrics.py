"""Surface distances (HD95, MSD), TRE and deformation regularity (SDLogJ)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud
from .errors import AllCellsFolded, EmptyCloud, LengthMismatch
from .matching import _query, _sub_index


def _pts(x) -> np.ndarray:
    p = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise EmptyCloud("metric undefined for an empty cloud")
    return p


def nearest_distances(p, q) -> np.ndarray:
    """Distance from every point of ``p`` to its nearest point of ``q`` (directed)."""
    p, q = _pts(p), _pts(q)
    _, d2 = _query(_sub_index(q, np.arange(len(q))), p, 1)
    return np.sqrt(d2)


def hd95(p, q) -> float:
    """95th percentile (linear between closest ranks) of directed p->q distances."""
    return float(np.percentile(nearest_distances(p, q), 95))


def msd(p, q) -> float:
    """Mean directed p->q nearest-neighbour distance."""
    return float(nearest_distances(p, q).mean())


def tre(p_warped, q_true) -> float:
    """Mean distance between index-aligned point pairs."""
    p, q = _pts(p_warped), _pts(q_true)
    if len(p) != len(q):
        raise LengthMismatch(f"{len(p)} warped points vs {len(q)} ground-truth points")
    diff = p - q
    return float(np.sqrt((diff * diff).sum(axis=1)).mean())


def cell_jacobians(grid) -> np.ndarray:
    """Jacobian of ``x -> x + d(x)`` at every cell centre, in mm, shape (G-1)^3 x 3 x 3.

    The trilinear field is linear along each axis inside a cell, so the
    derivative at the centre is the mean of the four parallel edge differences.
    """
    D = grid.displacements
    step = grid.step
    grads = []
    for a in range(3):
        hi = [slice(None)] * 3
        lo = [slice(None)] * 3
        hi[a] = slice(1, None)
        lo[a] = slice(None, -1)
        fd = (D[tuple(hi)] - D[tuple(lo)]) / step
        for b in range(3):
            if b == a:
                continue
            s0 = [slice(None)] * 3
            s1 = [slice(None)] * 3
            s0[b] = slice(None, -1)
            s1[b] = slice(1, None)
            fd = 0.5 * (fd[tuple(s0)] + fd[tuple(s1)])
        grads.append(fd)
    # J[..., c, a] = d d_c / d x_a in normalized units
    J = np.stack(grads, axis=-1)
    if grid.normalization is not None:
        s = grid.normalization.scale
        J = J * (s[None, :] / s[:, None])
    return J + np.eye(3)


def sdlogj(grid) -> tuple[float, float]:
    """Standard deviation of log det J over unfolded cells, and the folded fraction."""
    det = np.linalg.det(cell_jacobians(grid)).ravel()
    ok = det > 0
    if not np.any(ok):
        raise AllCellsFolded("every cell has a non-positive Jacobian determinant")
    return float(np.std(np.log(det[ok]))), float(1.0 - ok.mean())


@dataclass
class MetricsReport:
    per_label: dict = field(default_factory=dict)  # label -> {"hd95": .., "msd": .., "tre": ..}
    sdlogj: float | None = None
    folded_cell_fraction: float | None = None
    runtime_s: float | None = None

    @property
    def average(self) -> dict:
        out = {}
        for key in ("hd95", "msd", "tre"):
            vals = [m[key] for m in self.per_label.values() if m.get(key) is not None]
            if vals:
                out[key] = float(np.mean(vals))
        return out

    def to_text(self) -> str:
        lines = []
        for lab in sorted(self.per_label):
            for key, val in self.per_label[lab].items():
                if val is not None:
                    lines.append(f"per_label.{lab}.{key}_mm={val!r}")
        for key, val in self.average.items():
            lines.append(f"average.{key}_mm={val!r}")
        for key in ("sdlogj", "folded_cell_fraction", "runtime_s"):
            val = getattr(self, key)
            if val is not None:
                lines.append(f"{key}={val!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> MetricsReport:
        rep = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, val = line.partition("=")
            parts = key.split(".")
            if parts[0] == "per_label":
                rep.per_label.setdefault(int(parts[1]), {})[parts[2].removesuffix("_mm")] = float(val)
            elif parts[0] in ("sdlogj", "folded_cell_fraction", "runtime_s"):
                setattr(rep, parts[0], float(val))
        return rep


def evaluate(source: PointCloud, target: PointCloud, grid=None, truth: np.ndarray | None = None) -> MetricsReport:
    """Per-label metrics of ``source`` against ``target`` over their shared labels.

    ``truth`` holds the ground-truth position of every source point, enabling TRE.
    """
    if truth is not None and len(truth) != len(source):
        raise LengthMismatch(f"{len(truth)} ground-truth points for {len(source)} source points")
    rep = MetricsReport()
    for lab in sorted(set(source.label_set) & set(target.label_set)):
        ps = source.points[source.labels == lab]
        d = nearest_distances(ps, target.points[target.labels == lab])
        entry = {"hd95": float(np.percentile(d, 95)), "msd": float(d.mean())}
        if truth is not None:
            entry["tre"] = tre(ps, truth[source.labels == lab])
        rep.per_label[lab] = entry
    if grid is not None:
        rep.sdlogj, rep.folded_cell_fraction = sdlogj(grid)
    return rep
