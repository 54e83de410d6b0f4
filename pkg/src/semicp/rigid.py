"""Rigid initialization: semantic point-to-plane ICP driven by Adam."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .cloud import NormalizationMap, PointCloud, downsample_stratified, estimate_normals, fit_normalization
from .errors import MissingNormals
from .matching import Correspondences, build_index, match
from .optim import AdamState, ConvergencePolicy, EarlyStopping, adam_step

log = logging.getLogger(__name__)

EULER_CONVENTION = "R=Rz(gamma)*Ry(beta)*Rx(alpha)"


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(b):
    c, s = np.cos(b), np.sin(b)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(g):
    c, s = np.cos(g), np.sin(g)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _drx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])


def _dry(b):
    c, s = np.cos(b), np.sin(b)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def _drz(g):
    c, s = np.cos(g), np.sin(g)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def euler_to_matrix(euler) -> np.ndarray:
    a, b, g = euler
    return _rz(g) @ _ry(b) @ _rx(a)


def euler_jacobians(euler):
    """Derivatives of the rotation matrix w.r.t. each of the three angles."""
    a, b, g = euler
    rx, ry, rz = _rx(a), _ry(b), _rz(g)
    return rz @ ry @ _drx(a), rz @ _dry(b) @ rx, _drz(g) @ ry @ rx


def matrix_to_euler(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    sb = -R[2, 0]
    b = np.arcsin(np.clip(sb, -1.0, 1.0))
    if abs(sb) < 1.0 - 1e-12:
        a = np.arctan2(R[2, 1], R[2, 2])
        g = np.arctan2(R[1, 0], R[0, 0])
    else:
        # gimbal lock: only alpha -/+ gamma is defined, put it all in alpha
        g = 0.0
        a = np.arctan2(R[0, 1], R[0, 2]) if sb > 0 else np.arctan2(-R[0, 1], -R[0, 2])
    return np.array([a, b, g])


def _orthonormalize(R):
    u, _, vt = np.linalg.svd(R)
    Q = u @ vt
    if np.linalg.det(Q) < 0:
        u[:, -1] *= -1
        Q = u @ vt
    return Q


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation from XYZ Euler angles (radians) plus a translation."""

    euler_xyz: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "euler_xyz", np.array(self.euler_xyz, dtype=np.float64).reshape(3))
        object.__setattr__(self, "translation", np.array(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_rt(cls, R, t) -> RigidTransform:
        return cls(matrix_to_euler(_orthonormalize(R)), t)

    @classmethod
    def from_matrix(cls, M) -> RigidTransform:
        M = np.asarray(M, dtype=np.float64)
        return cls.from_rt(M[:3, :3], M[:3, 3])

    @property
    def rotation(self) -> np.ndarray:
        return euler_to_matrix(self.euler_xyz)

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self ∘ other``: apply ``other`` first."""
        R = self.rotation
        return RigidTransform.from_rt(R @ other.rotation, R @ other.translation + self.translation)

    def inverse(self) -> RigidTransform:
        R = self.rotation
        return RigidTransform.from_rt(R.T, -R.T @ self.translation)

    def to_mm(self, norm: NormalizationMap) -> RigidTransform:
        """Express a transform estimated in normalized coordinates in mm.

        Exact only for an isotropic map, where conjugation keeps the rotation.
        """
        if not norm.isotropic:
            raise ValueError("rigid transforms convert to mm only through an isotropic normalization")
        R = self.rotation
        c, s = norm.offset, norm.scale[0]
        return RigidTransform(self.euler_xyz, c - R @ c + self.translation / s)

    def transform_cloud(self, cloud: PointCloud) -> PointCloud:
        # rotation keeps unit length to rounding; no renormalization, so identity is bit-exact
        nrm = None if cloud.normals is None else cloud.normals @ self.rotation.T
        return PointCloud(self.apply(cloud.points), cloud.labels, nrm)


def rigid_loss(
    transform: RigidTransform,
    source: PointCloud | np.ndarray,
    correspondences: Correspondences,
    target: PointCloud,
):
    """Sum of absolute point-to-plane residuals and its gradient w.r.t.
    ``(alpha, beta, gamma, tx, ty, tz)``."""
    if target.normals is None:
        raise MissingNormals("point-to-plane loss needs target normals")
    p = source.points if isinstance(source, PointCloud) else np.asarray(source, dtype=np.float64)
    q = target.points[correspondences.target_index]
    m = target.normals[correspondences.target_index]
    R = transform.rotation
    resid = np.einsum("ni,ni->n", p @ R.T + transform.translation - q, m)
    loss = float(np.abs(resid).sum())
    sgn = np.sign(resid)
    grad = np.empty(6)
    weighted = sgn[:, None] * m
    for a, dR in enumerate(euler_jacobians(transform.euler_xyz)):
        grad[a] = np.einsum("ni,ni->", weighted, p @ dR.T)
    grad[3:] = weighted.sum(axis=0)
    return loss, grad


@dataclass(frozen=True)
class RigidConfig:
    lr: float = 1e-3
    max_iter: int = 500
    downsample: int = 1000
    inner_steps: int = 1
    rel_tol: float = 1e-5
    patience: int = 20
    semantic: bool = True
    fallback_global: bool = False
    normal_k: int = 15
    margin: float = 0.05
    seed: int = 0
    workers: int = 1


@dataclass
class RigidResult:
    transform: RigidTransform  # mm
    normalized: RigidTransform
    normalization: NormalizationMap
    trace: list
    iterations: int
    converged: bool


def _prepare(source: PointCloud, target: PointCloud, config: RigidConfig):
    if not config.semantic:
        source, target = source.merged_labels(), target.merged_labels()
    if target.normals is None:
        target = estimate_normals(target, config.normal_k)
    return source, target


def register_rigid(source: PointCloud, target: PointCloud, config: RigidConfig | None = None) -> RigidResult:
    """Estimate the rigid transform taking ``source`` onto ``target`` (mm).

    Each iteration matches the moved source to the target, takes Adam steps on
    a small increment with matches frozen, then composes the increment onto the
    running transform. The best-loss transform is returned.
    """
    cfg = config or RigidConfig()
    source, target = _prepare(source, target, cfg)
    norm = fit_normalization(source, target, cfg.margin, isotropic=True)
    src = downsample_stratified(source, cfg.downsample, cfg.seed)
    tgt = downsample_stratified(target, cfg.downsample, cfg.seed + 1)
    p0 = norm.forward(src.points)
    tgt_n = PointCloud(norm.forward(tgt.points), tgt.labels, tgt.normals)
    index = build_index(tgt_n, cfg.semantic)

    policy = ConvergencePolicy(cfg.max_iter, cfg.rel_tol, cfg.patience)
    stopper = EarlyStopping(policy)
    current = RigidTransform.identity()
    best = current
    state = AdamState.init(np.zeros(6), lr=cfg.lr)
    trace = []
    while True:
        moved = current.apply(p0)
        corr = match(index, src, cfg.fallback_global, points=moved, workers=cfg.workers)
        loss, grad = rigid_loss(RigidTransform.identity(), moved, corr, tgt_n)
        trace.append(loss)
        if stopper.update(loss):
            best = current
        if stopper.done:
            break
        state = replace(state, params=np.zeros(6))
        for k in range(cfg.inner_steps):
            if k:
                delta = RigidTransform(state.params[:3], state.params[3:])
                _, grad = rigid_loss(delta, moved, corr, tgt_n)
            state = adam_step(state, grad)
        delta = RigidTransform(state.params[:3], state.params[3:])
        current = delta.compose(current)
    log.debug("rigid stage: %d iterations, best loss %.6g", len(trace), stopper.best)
    return RigidResult(best.to_mm(norm), best, norm, trace, len(trace), stopper.converged)
