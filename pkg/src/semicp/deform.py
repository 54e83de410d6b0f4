"""Control-grid deformation: trilinear field, elastic regularization, non-rigid stage."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import NormalizationMap, PointCloud, downsample_stratified, fit_normalization
from .errors import FormatError, OutOfGrid
from .matching import Correspondences, build_index, match
from .optim import AdamState, ConvergencePolicy, EarlyStopping, adam_step
from .rigid import EULER_CONVENTION, RigidTransform

log = logging.getLogger(__name__)

ELASTIC_FORMS = ("squared", "as_printed")
_SNAP = 1e-9


@dataclass(frozen=True)
class ElasticParams:
    """Young's modulus ``E`` (Pa) and Poisson's ratio ``nu``; Lamé constants derived."""

    E: float = 1000.0
    nu: float = 0.499

    def __post_init__(self):
        if not self.E > 0:
            raise ValueError("Young's modulus must be positive")
        if not 0.0 < self.nu < 0.5:
            raise ValueError("Poisson's ratio must lie in (0, 0.5)")

    @property
    def lam(self) -> float:
        return self.E * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))

    @property
    def mu(self) -> float:
        return self.E / (2.0 * (1.0 + self.nu))


@dataclass(frozen=True)
class RegWeights:
    alpha: float = 1.0  # elastic energy
    beta: float = 1.0  # displacement magnitude
    gamma: float = 1.0  # finite-difference gradient norm

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"weight {name} must be finite and >= 0")


@dataclass(eq=False)
class ControlGrid:
    """``G``^3 nodes spanning [-1, 1]^3 with one displacement vector per node.

    ``displacements[i, j, k]`` belongs to the node at
    ``(-1 + i*step, -1 + j*step, -1 + k*step)`` in normalized coordinates.
    """

    size: int
    displacements: np.ndarray
    normalization: NormalizationMap | None = None

    def __post_init__(self):
        if self.size < 2:
            raise ValueError("grid needs at least 2 nodes per axis")
        d = np.asarray(self.displacements, dtype=np.float64)
        if d.shape != (self.size,) * 3 + (3,):
            raise ValueError(f"displacements must have shape {(self.size,) * 3 + (3,)}, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("displacements must be finite")
        self.displacements = d

    @classmethod
    def zeros(cls, size: int = 25, normalization: NormalizationMap | None = None) -> ControlGrid:
        return cls(size, np.zeros((size, size, size, 3)), normalization)

    @property
    def step(self) -> float:
        return 2.0 / (self.size - 1)

    @property
    def n_nodes(self) -> int:
        return self.size**3

    def node_positions(self) -> np.ndarray:
        ax = -1.0 + self.step * np.arange(self.size)
        return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)


class TrilinearSampler:
    """Precomputed 8-corner trilinear weights for a fixed set of normalized points."""

    def __init__(self, size: int, points, clamp: bool = False):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        outside = np.any(np.abs(pts) > 1.0, axis=1)
        if np.any(outside):
            if not clamp:
                i = int(np.flatnonzero(outside)[0])
                raise OutOfGrid(i, pts[i])
            pts = np.clip(pts, -1.0, 1.0)
        self.size = size
        step = 2.0 / (size - 1)
        u = (pts + 1.0) / step
        r = np.rint(u)
        u = np.where(np.abs(u - r) < _SNAP, r, u)
        i0 = np.clip(np.floor(u), 0, size - 2).astype(np.int64)
        f = u - i0
        idx = np.empty((len(pts), 8), dtype=np.int64)
        w = np.empty((len(pts), 8))
        for c in range(8):
            bits = ((c >> 2) & 1, (c >> 1) & 1, c & 1)
            wc = np.ones(len(pts))
            flat = np.zeros(len(pts), dtype=np.int64)
            for a, b in enumerate(bits):
                wc = wc * (f[:, a] if b else 1.0 - f[:, a])
                flat = flat * size + i0[:, a] + b
            idx[:, c] = flat
            w[:, c] = wc
        self.index = idx
        self.weights = w

    def sample(self, displacements: np.ndarray) -> np.ndarray:
        flat = displacements.reshape(-1, 3)
        return np.einsum("nc,ncd->nd", self.weights, flat[self.index])

    def scatter(self, point_grads: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`sample`: node gradient from per-point gradients."""
        n = self.size**3
        out = np.empty((n, 3))
        idx = self.index.ravel()
        for d in range(3):
            out[:, d] = np.bincount(idx, weights=(self.weights * point_grads[:, d : d + 1]).ravel(), minlength=n)
        return out.reshape((self.size,) * 3 + (3,))


def interpolate(grid: ControlGrid, points, clamp: bool = False) -> np.ndarray:
    """Trilinear displacement at normalized ``points`` (each inside [-1, 1]^3)."""
    return TrilinearSampler(grid.size, points, clamp).sample(grid.displacements)


def _forward_differences(D: np.ndarray, step: float) -> list[np.ndarray]:
    """Per axis, ``(D[n + e_a] - D[n]) / step``; zero on the max face of that axis."""
    out = []
    for a in range(3):
        fd = np.zeros_like(D)
        hi = [slice(None)] * 3
        lo = [slice(None)] * 3
        hi[a] = slice(1, None)
        lo[a] = slice(None, -1)
        fd[tuple(lo)] = (D[tuple(hi)] - D[tuple(lo)]) / step
        out.append(fd)
    return out


def _difference_adjoint(grads: list[np.ndarray], step: float) -> np.ndarray:
    out = np.zeros_like(grads[0])
    for a, g in enumerate(grads):
        hi = [slice(None)] * 3
        lo = [slice(None)] * 3
        hi[a] = slice(1, None)
        lo[a] = slice(None, -1)
        gl = g[tuple(lo)] / step
        out[tuple(hi)] += gl
        out[tuple(lo)] -= gl
    return out


def reg_elastic(grid: ControlGrid, params: ElasticParams, form: str = "squared"):
    """Linear elastic energy from forward differences, scaled by ``step / n_nodes``.

    ``form="as_printed"`` drops the square on the symmetric strain sum; kept
    only for comparison since that energy is unbounded below.
    """
    if form not in ELASTIC_FORMS:
        raise ValueError(f"elastic form must be one of {ELASTIC_FORMS}")
    step = grid.step
    scale = step / grid.n_nodes
    fd = _forward_differences(grid.displacements, step)
    # J[..., c, a] = dD_c / dx_a
    J = np.stack(fd, axis=-1)
    sym = J + np.swapaxes(J, -1, -2)
    div = np.trace(J, axis1=-2, axis2=-1)
    mu, lam = params.mu, params.lam
    if form == "squared":
        value = scale * ((mu / 4.0) * (sym * sym).sum() + (lam / 2.0) * (div * div).sum())
        dJ = mu * sym
    else:
        value = scale * ((mu / 4.0) * sym.sum() + (lam / 2.0) * (div * div).sum())
        dJ = np.full_like(J, mu / 2.0)
    dJ = dJ + lam * div[..., None, None] * np.eye(3)
    dJ *= scale
    grad = _difference_adjoint([dJ[..., :, a] for a in range(3)], step)
    return float(value), grad


def reg_magnitude(grid: ControlGrid):
    """Mean Euclidean norm of the node displacements."""
    D = grid.displacements
    norm = np.linalg.norm(D, axis=-1, keepdims=True)
    value = float(norm.sum() / grid.n_nodes)
    grad = np.divide(D, norm, out=np.zeros_like(D), where=norm > 0) / grid.n_nodes
    return value, grad


def reg_gradient(grid: ControlGrid):
    """Sum over nodes and axes of the forward-difference vector norm, scaled by ``step / n_nodes``."""
    step = grid.step
    scale = step / grid.n_nodes
    fd = _forward_differences(grid.displacements, step)
    value = 0.0
    grads = []
    for g in fd:
        n = np.linalg.norm(g, axis=-1, keepdims=True)
        value += n.sum()
        grads.append(scale * np.divide(g, n, out=np.zeros_like(g), where=n > 0))
    return float(scale * value), _difference_adjoint(grads, step)


def regularization(grid: ControlGrid, weights: RegWeights, params: ElasticParams, form: str = "squared"):
    value = 0.0
    grad = np.zeros_like(grid.displacements)
    if weights.alpha:
        v, g = reg_elastic(grid, params, form)
        value += weights.alpha * v
        grad += weights.alpha * g
    if weights.beta:
        v, g = reg_magnitude(grid)
        value += weights.beta * v
        grad += weights.beta * g
    if weights.gamma:
        v, g = reg_gradient(grid)
        value += weights.gamma * v
        grad += weights.gamma * g
    return value, grad


def _points(x) -> np.ndarray:
    return x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)


def nonrigid_loss(
    grid: ControlGrid,
    source,
    correspondences: Correspondences,
    target,
    weights: RegWeights | None = None,
    params: ElasticParams | None = None,
    form: str = "squared",
    sampler: TrilinearSampler | None = None,
):
    """Sum of matched-pair Euclidean distances after deformation plus the
    weighted regularizers. ``source``/``target`` are in normalized coordinates."""
    weights = weights or RegWeights()
    params = params or ElasticParams()
    p = _points(source)
    q = _points(target)[correspondences.target_index]
    sampler = sampler or TrilinearSampler(grid.size, p)
    resid = p + sampler.sample(grid.displacements) - q
    dist = np.linalg.norm(resid, axis=1)
    loss = float(dist.sum())
    unit = np.divide(resid, dist[:, None], out=np.zeros_like(resid), where=dist[:, None] > 0)
    grad = sampler.scatter(unit)
    rv, rg = regularization(grid, weights, params, form)
    return loss + rv, grad + rg


@dataclass(frozen=True)
class NonRigidConfig:
    lr: float = 0.01
    max_iter: int = 300
    grid: int = 25
    inner_steps: int = 1
    rel_tol: float = 1e-5
    patience: int = 20
    weights: RegWeights = field(default_factory=RegWeights)
    elastic: ElasticParams = field(default_factory=ElasticParams)
    elastic_form: str = "squared"
    semantic: bool = True
    fallback_global: bool = False
    margin: float = 0.05
    downsample: int | None = None
    clamp: bool = False
    seed: int = 0
    workers: int = 1


@dataclass
class NonRigidResult:
    grid: ControlGrid
    trace: list
    iterations: int
    converged: bool


def register_nonrigid(
    source: PointCloud,
    target: PointCloud,
    init: RigidTransform | None = None,
    config: NonRigidConfig | None = None,
) -> NonRigidResult:
    """Fit control-grid displacements moving the rigidly aligned source onto the target.

    Matches are recomputed from the deformed source every iteration; the grid
    with the lowest loss is returned, with its normalization attached.
    """
    cfg = config or NonRigidConfig()
    init = init or RigidTransform.identity()
    if not cfg.semantic:
        source, target = source.merged_labels(), target.merged_labels()
    moved = PointCloud(init.apply(source.points), source.labels)
    norm = fit_normalization(moved, target, cfg.margin)
    if cfg.downsample:
        moved = downsample_stratified(moved, cfg.downsample, cfg.seed)
        target = downsample_stratified(target, cfg.downsample, cfg.seed + 1)
    p = norm.forward(moved.points)
    tgt_n = PointCloud(norm.forward(target.points), target.labels)
    index = build_index(tgt_n, cfg.semantic)
    sampler = TrilinearSampler(cfg.grid, p, cfg.clamp)

    grid = ControlGrid.zeros(cfg.grid, norm)
    best = grid.displacements.copy()
    stopper = EarlyStopping(ConvergencePolicy(cfg.max_iter, cfg.rel_tol, cfg.patience))
    state = AdamState.init(grid.displacements, lr=cfg.lr)
    trace = []
    while True:
        grid.displacements = state.params
        deformed = p + sampler.sample(state.params)
        corr = match(index, moved, cfg.fallback_global, points=deformed, workers=cfg.workers)
        for k in range(cfg.inner_steps):
            loss, grad = nonrigid_loss(
                grid, p, corr, tgt_n, cfg.weights, cfg.elastic, cfg.elastic_form, sampler
            )
            if k == 0:
                trace.append(loss)
                if stopper.update(loss):
                    best = state.params.copy()
                if stopper.done:
                    break
            state = adam_step(state, grad)
            grid.displacements = state.params
        if stopper.done:
            break
    log.debug("non-rigid stage: %d iterations, best loss %.6g", len(trace), stopper.best)
    return NonRigidResult(ControlGrid(cfg.grid, best, norm), trace, len(trace), stopper.converged)


def warp(grid: ControlGrid, rigid: RigidTransform | None, cloud: PointCloud, clamp: bool = False) -> PointCloud:
    """Apply ``rigid`` then the grid displacement to ``cloud`` (mm in, mm out).

    Normals are rotated by the rigid part only.
    """
    if grid.normalization is None:
        raise ValueError("grid has no normalization attached")
    rigid = rigid or RigidTransform.identity()
    moved = rigid.transform_cloud(cloud)
    norm = grid.normalization
    d = interpolate(grid, norm.forward(moved.points), clamp)
    return PointCloud(moved.points + d / norm.scale, cloud.labels, moved.normals)


# --- field.grid binary layout (all little-endian) ---------------------------
#   8s   magic b"SEMICPGR"
#   I    format version
#   I    G
#   3d   normalization offset (mm)
#   3d   normalization scale (1/mm)
#   32s  Euler convention tag, ASCII, NUL padded
#   d    E (Pa)
#   d    nu
#   3d   alpha, beta, gamma
#   I    elastic form (0 squared, 1 as_printed)
#   G*G*G*3 d   displacements, C order [i][j][k][component], normalized units

GRID_MAGIC = b"SEMICPGR"
GRID_VERSION = 1
_HEADER = struct.Struct("<8sII3d3d32sdd3dI")


@dataclass(frozen=True)
class GridMeta:
    elastic: ElasticParams
    weights: RegWeights
    elastic_form: str = "squared"
    euler_convention: str = EULER_CONVENTION


def save_grid(path, grid: ControlGrid, meta: GridMeta) -> None:
    norm = grid.normalization
    if norm is None:
        raise ValueError("grid has no normalization attached")
    head = _HEADER.pack(
        GRID_MAGIC,
        GRID_VERSION,
        grid.size,
        *norm.offset,
        *norm.scale,
        meta.euler_convention.encode("ascii"),
        meta.elastic.E,
        meta.elastic.nu,
        meta.weights.alpha,
        meta.weights.beta,
        meta.weights.gamma,
        ELASTIC_FORMS.index(meta.elastic_form),
    )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(grid.displacements, dtype="<f8").tobytes())


def load_grid(path) -> tuple[ControlGrid, GridMeta]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated grid header")
    fields = _HEADER.unpack_from(raw)
    magic, version, size = fields[:3]
    if magic != GRID_MAGIC:
        raise FormatError(f"{path}: not a control-grid file")
    if version != GRID_VERSION:
        raise FormatError(f"{path}: grid format version {version}, expected {GRID_VERSION}")
    offset, scale = fields[3:6], fields[6:9]
    tag = fields[9].rstrip(b"\0").decode("ascii")
    E, nu, alpha, beta, gamma, form = fields[10:16]
    if tag != EULER_CONVENTION:
        raise FormatError(f"{path}: Euler convention {tag!r} not supported")
    n = size**3 * 3
    body = raw[_HEADER.size :]
    if len(body) != n * 8:
        raise FormatError(f"{path}: expected {n} displacement values, found {len(body) // 8}")
    D = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape((size,) * 3 + (3,))
    meta = GridMeta(ElasticParams(E, nu), RegWeights(alpha, beta, gamma), ELASTIC_FORMS[form], tag)
    return ControlGrid(size, D, NormalizationMap(offset, scale)), meta
