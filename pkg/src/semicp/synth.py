"""Synthetic labeled phantoms, partial-visibility perturbations and warped pairs.

All randomness comes from ``numpy.random.default_rng`` (PCG64) seeded explicitly,
so outputs are reproducible across platforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cloud import PointCloud, _allocate, fit_normalization
from .deform import ControlGrid, GridMeta, ElasticParams, RegWeights, save_grid, warp
from .errors import FoldedGroundTruth
from .metrics import sdlogj
from .plyio import write_ply
from .rigid import EULER_CONVENTION, RigidTransform


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple
    radii: tuple
    label: int
    count: int


@dataclass(frozen=True)
class Tube:
    start: tuple
    end: tuple
    radius: float
    label: int
    count: int


@dataclass(frozen=True)
class PhantomSpec:
    shapes: tuple
    noise_mm: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if len({s.label for s in self.shapes}) < 2:
            raise ValueError("a phantom needs at least two labels")
        for s in self.shapes:
            if s.count < 50:
                raise ValueError("every shape needs at least 50 points")
            radii = s.radii if isinstance(s, Ellipsoid) else (s.radius,)
            if min(radii) <= 0:
                raise ValueError("radii must be positive")


def default_phantom_spec(seed: int = 0, noise_mm: float = 0.0) -> PhantomSpec:
    """Abdominal-scale scene in a 200 mm box: three ellipsoids and a vessel, 8000 points."""
    return PhantomSpec(
        (
            Ellipsoid((-20.0, 10.0, 0.0), (62.0, 45.0, 40.0), 1, 3200),
            Ellipsoid((40.0, -38.0, -12.0), (22.0, 16.0, 32.0), 2, 1400),
            Ellipsoid((58.0, 40.0, 10.0), (28.0, 18.0, 26.0), 3, 1400),
            Tube((12.0, -40.0, -80.0), (12.0, -28.0, 80.0), 8.0, 4, 2000),
        ),
        noise_mm,
        seed,
    )


def _unit_vectors(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_ellipsoid(rng, shape: Ellipsoid):
    r = np.asarray(shape.radii, dtype=np.float64)
    gmax = (1.0 / r).max()
    out = []
    need = shape.count
    # area-uniform by rejection on the sphere parameterization
    while need > 0:
        u = _unit_vectors(rng, 2 * need + 16)
        g = np.linalg.norm(u / r, axis=1)
        u = u[rng.random(len(u)) * gmax < g][:need]
        out.append(u)
        need -= len(u)
    u = np.concatenate(out)
    pts = np.asarray(shape.center) + u * r
    nrm = u / r
    return pts, nrm / np.linalg.norm(nrm, axis=1, keepdims=True)


def _sample_tube(rng, shape: Tube):
    a, b = np.asarray(shape.start, dtype=np.float64), np.asarray(shape.end, dtype=np.float64)
    axis = b - a
    axis_u = axis / np.linalg.norm(axis)
    helper = np.eye(3)[np.argmin(np.abs(axis_u))]
    e1 = np.cross(axis_u, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis_u, e1)
    t = rng.random(shape.count)
    theta = rng.random(shape.count) * 2.0 * np.pi
    nrm = np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2
    return a + t[:, None] * axis + shape.radius * nrm, nrm


def make_phantom(spec: PhantomSpec | None = None) -> PointCloud:
    spec = spec or default_phantom_spec()
    rng = np.random.default_rng(spec.seed)
    pts, nrm, lab = [], [], []
    for shape in spec.shapes:
        sampler = _sample_ellipsoid if isinstance(shape, Ellipsoid) else _sample_tube
        p, n = sampler(rng, shape)
        pts.append(p)
        nrm.append(n)
        lab.append(np.full(len(p), shape.label))
    points = np.concatenate(pts)
    if spec.noise_mm > 0:
        points = points + rng.normal(0.0, spec.noise_mm, points.shape)
    return PointCloud(points, np.concatenate(lab), np.concatenate(nrm))


@dataclass(frozen=True)
class PerturbationSpec:
    visible_ratio: float = 1.0
    theta_max_deg: float = 0.0
    t_max_mm: float = 10.0
    noise_mm: float = 1.0
    replicas: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.visible_ratio <= 1.0:
            raise ValueError("visible_ratio must lie in (0, 1]")
        if self.theta_max_deg < 0 or self.t_max_mm < 0 or self.noise_mm < 0:
            raise ValueError("rotation, translation and noise ranges must be non-negative")
        if self.replicas < 1:
            raise ValueError("replicas must be >= 1")


def crop_halfspace(cloud: PointCloud, ratio: float, direction) -> np.ndarray:
    """Indices of the ``ratio`` share of points lying furthest along ``direction``.

    The cut is made per label (largest-remainder split of the total), so every
    label keeps at least one point and each organ keeps a contiguous patch.
    """
    n = len(cloud)
    keep_total = int(round(ratio * n))
    if keep_total >= n:
        return np.arange(n)
    labels, counts = np.unique(cloud.labels, return_counts=True)
    alloc = _allocate(counts, max(keep_total, len(labels)))
    score = cloud.points @ np.asarray(direction, dtype=np.float64)
    keep = []
    for lab, m in zip(labels, alloc):
        idx = np.flatnonzero(cloud.labels == lab)
        order = np.argsort(-score[idx], kind="stable")
        keep.append(idx[order[:m]])
    return np.sort(np.concatenate(keep))


def perturb(cloud: PointCloud, spec: PerturbationSpec, rng=None):
    """Crop, add noise, and misalign ``cloud``.

    Returns the perturbed cloud and the rigid transform mapping it back onto
    the (cropped, noisy) original positions.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    direction = _unit_vectors(rng, 1)[0]
    part = cloud.subset(crop_halfspace(cloud, spec.visible_ratio, direction))
    points = part.points
    if spec.noise_mm > 0:
        points = points + rng.normal(0.0, spec.noise_mm, points.shape)
    theta = np.deg2rad(spec.theta_max_deg)
    euler = rng.uniform(-theta, theta, 3)
    shift = rng.uniform(-spec.t_max_mm, spec.t_max_mm, 3)
    misalign = RigidTransform(euler, shift)
    moved = misalign.transform_cloud(PointCloud(points, part.labels, part.normals))
    return moved, misalign.inverse()


def _smooth_field(rng, nodes: np.ndarray, wavelength: float, modes: int = 4) -> np.ndarray:
    field = np.zeros(nodes.shape)
    for _ in range(modes):
        k = _unit_vectors(rng, 1)[0] * (2.0 * np.pi / wavelength)
        amp = rng.standard_normal(3)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        field += np.sin(nodes @ k + phase)[..., None] * amp
    return field


@dataclass(frozen=True)
class WarpSpec:
    grid: int = 25
    max_disp_mm: float = 5.0
    smoothness: float = 1.0  # wavelength of the random modes, in normalized units
    margin: float = 0.1


def make_warped_pair(cloud: PointCloud, spec: WarpSpec | None = None, seed: int = 0):
    """Warp ``cloud`` with a smooth random fold-free field.

    Returns ``(source, target, ground_truth_grid)`` where ``target`` is
    ``warp(ground_truth_grid, identity, source)``.
    """
    spec = spec or WarpSpec()
    rng = np.random.default_rng(seed)
    norm = fit_normalization(cloud, cloud, spec.margin)
    grid = ControlGrid.zeros(spec.grid, norm)
    if spec.max_disp_mm > 0:
        nodes = grid.node_positions()
        for _ in range(10):
            mm = _smooth_field(rng, nodes, spec.smoothness)
            mm *= spec.max_disp_mm / np.linalg.norm(mm, axis=-1).max()
            grid = ControlGrid(spec.grid, mm * norm.scale, norm)
            s, folded = sdlogj(grid)
            if folded == 0 and np.isfinite(s):
                break
        else:
            raise FoldedGroundTruth("no fold-free field after 10 attempts")
    return cloud, warp(grid, None, cloud), grid


def write_case(case_dir, source: PointCloud, target: PointCloud, truth: RigidTransform | None = None,
               grid: ControlGrid | None = None, extra: dict | None = None) -> Path:
    """Write ``source.ply``, ``target.ply``, ``gt.json`` and optionally ``gt.grid``.

    ``gt.json`` maps each source point to its true position: the rigid matrix
    first, then the grid when one is given.
    """
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    write_ply(case_dir / "source.ply", source)
    write_ply(case_dir / "target.ply", target)
    truth = truth or RigidTransform.identity()
    doc = {
        "version": 1,
        "euler_convention": EULER_CONVENTION,
        "matrix": truth.matrix.tolist(),
        "grid": None,
    }
    if grid is not None:
        save_grid(case_dir / "gt.grid", grid, GridMeta(ElasticParams(), RegWeights()))
        doc["grid"] = "gt.grid"
    if extra:
        doc.update(extra)
    (case_dir / "gt.json").write_text(json.dumps(doc, indent=2))
    return case_dir
