"""End-to-end registration: validated config, rigid stage, non-rigid stage, metrics."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .cloud import PointCloud, fit_normalization, validate_pair
from .deform import (
    ControlGrid,
    ElasticParams,
    GridMeta,
    NonRigidConfig,
    NonRigidResult,
    RegWeights,
    load_grid,
    register_nonrigid,
    warp,
)
from .errors import FormatError
from .metrics import MetricsReport, evaluate
from .rigid import EULER_CONVENTION, RigidConfig, RigidResult, RigidTransform, register_rigid

RIGID_JSON_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class RigidSection(_Strict):
    enabled: bool = True
    lr: float = Field(1e-3, gt=0)
    max_iter: int = Field(500, ge=1)
    downsample: int = Field(1000, ge=1)
    inner_steps: int = Field(1, ge=1)


class NonRigidSection(_Strict):
    enabled: bool = True
    lr: float = Field(0.01, gt=0)
    max_iter: int = Field(300, ge=1)
    grid: int = Field(25, ge=2)
    inner_steps: int = Field(1, ge=1)
    downsample: int | None = Field(None, ge=1)


class WeightsSection(_Strict):
    alpha: float = Field(1.0, ge=0)
    beta: float = Field(1.0, ge=0)
    gamma: float = Field(1.0, ge=0)


class ElasticitySection(_Strict):
    E_pa: float = Field(1000.0, gt=0)
    nu: float = Field(0.499, gt=0, lt=0.5)
    form: Literal["squared", "as_printed"] = "squared"


class ConvergenceSection(_Strict):
    rel_tol: float = Field(1e-5, ge=0)
    patience: int = Field(20, ge=1)


class NormalsSection(_Strict):
    k: int = Field(15, ge=3)


class RunConfig(_Strict):
    """Every tunable constant of a run; unknown keys are rejected."""

    semantic: bool = True
    fallback_global: bool = False
    rigid: RigidSection = RigidSection()
    nonrigid: NonRigidSection = NonRigidSection()
    weights: WeightsSection = WeightsSection()
    elasticity: ElasticitySection = ElasticitySection()
    convergence: ConvergenceSection = ConvergenceSection()
    normals: NormalsSection = NormalsSection()
    margin: float = Field(0.05, ge=0)
    seed: int = Field(0, ge=0)
    threads: int = Field(1, ge=1)

    @classmethod
    def load(cls, path) -> RunConfig:
        return cls.model_validate_json(Path(path).read_text())

    def dump(self) -> str:
        return json.dumps(self.model_dump(), indent=2, sort_keys=True) + "\n"

    def rigid_config(self) -> RigidConfig:
        r, c = self.rigid, self.convergence
        return RigidConfig(
            lr=r.lr,
            max_iter=r.max_iter,
            downsample=r.downsample,
            inner_steps=r.inner_steps,
            rel_tol=c.rel_tol,
            patience=c.patience,
            semantic=self.semantic,
            fallback_global=self.fallback_global,
            normal_k=self.normals.k,
            margin=self.margin,
            seed=self.seed,
            workers=self.threads,
        )

    def nonrigid_config(self) -> NonRigidConfig:
        n, c = self.nonrigid, self.convergence
        return NonRigidConfig(
            lr=n.lr,
            max_iter=n.max_iter,
            grid=n.grid,
            inner_steps=n.inner_steps,
            rel_tol=c.rel_tol,
            patience=c.patience,
            weights=self.reg_weights(),
            elastic=self.elastic_params(),
            elastic_form=self.elasticity.form,
            semantic=self.semantic,
            fallback_global=self.fallback_global,
            margin=self.margin,
            downsample=n.downsample,
            seed=self.seed,
            workers=self.threads,
        )

    def reg_weights(self) -> RegWeights:
        return RegWeights(self.weights.alpha, self.weights.beta, self.weights.gamma)

    def elastic_params(self) -> ElasticParams:
        return ElasticParams(self.elasticity.E_pa, self.elasticity.nu)

    def grid_meta(self) -> GridMeta:
        return GridMeta(self.elastic_params(), self.reg_weights(), self.elasticity.form)


# --- rigid.json -------------------------------------------------------------


def rigid_to_json(transform: RigidTransform) -> str:
    doc = {
        "version": RIGID_JSON_VERSION,
        "euler_convention": EULER_CONVENTION,
        "units": "mm",
        "matrix": transform.matrix.tolist(),
        "euler_xyz_rad": transform.euler_xyz.tolist(),
        "translation_mm": transform.translation.tolist(),
    }
    return json.dumps(doc, indent=2) + "\n"


def rigid_from_json(text: str, source: str = "rigid.json") -> RigidTransform:
    """Parse a rigid transform document; the Euler angles are preferred so a
    round trip reproduces the transform bit for bit."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{source}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise FormatError(f"{source}: expected a JSON object")
    if doc.get("version") != RIGID_JSON_VERSION:
        raise FormatError(f"{source}: transform version {doc.get('version')!r}, expected {RIGID_JSON_VERSION}")
    if doc.get("euler_convention", EULER_CONVENTION) != EULER_CONVENTION:
        raise FormatError(f"{source}: Euler convention {doc['euler_convention']!r} not supported")
    try:
        if "euler_xyz_rad" in doc and "translation_mm" in doc:
            return RigidTransform(doc["euler_xyz_rad"], doc["translation_mm"])
        M = np.asarray(doc["matrix"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{source}: malformed transform ({exc})") from None
    if M.shape != (4, 4):
        raise FormatError(f"{source}: matrix must be 4x4, got {M.shape}")
    return RigidTransform.from_matrix(M)


def load_truth(path, source: PointCloud) -> np.ndarray:
    """Ground-truth positions of ``source`` from a ``gt.json`` sidecar."""
    path = Path(path)
    doc = json.loads(path.read_text())
    rigid = rigid_from_json(json.dumps({k: v for k, v in doc.items() if k != "grid"}), str(path))
    if doc.get("grid"):
        grid, _ = load_grid(path.parent / doc["grid"])
        return warp(grid, rigid, source, clamp=True).points
    return rigid.apply(source.points)


# --- registration -------------------------------------------------------------


@dataclass
class Registration:
    config: RunConfig
    rigid: RigidResult | None = None
    nonrigid: NonRigidResult | None = None
    transform: RigidTransform = field(default_factory=RigidTransform.identity)
    grid: ControlGrid | None = None
    deformed: PointCloud | None = None
    before: MetricsReport | None = None
    after: MetricsReport | None = None
    runtimes: dict = field(default_factory=dict)


def register_pair(
    source: PointCloud,
    target: PointCloud,
    config: RunConfig | None = None,
    truth: np.ndarray | None = None,
    out: Registration | None = None,
) -> Registration:
    """Rigid then non-rigid registration of ``source`` onto ``target``.

    ``out`` is filled stage by stage, so a caller catching a numerical failure
    still holds whatever finished before it.
    """
    cfg = config or RunConfig()
    reg = out if out is not None else Registration(cfg)
    reg.config = cfg
    validate_pair(source, target, cfg.fallback_global, cfg.semantic)
    t0 = time.perf_counter()
    reg.before = evaluate(source, target, truth=truth)

    t = time.perf_counter()
    if cfg.rigid.enabled:
        reg.rigid = register_rigid(source, target, cfg.rigid_config())
        reg.transform = reg.rigid.transform
    reg.runtimes["rigid_s"] = time.perf_counter() - t

    t = time.perf_counter()
    if cfg.nonrigid.enabled:
        reg.nonrigid = register_nonrigid(source, target, reg.transform, cfg.nonrigid_config())
        reg.grid = reg.nonrigid.grid
    else:
        moved = PointCloud(reg.transform.apply(source.points), source.labels)
        reg.grid = ControlGrid.zeros(cfg.nonrigid.grid, fit_normalization(moved, target, cfg.margin))
    reg.runtimes["nonrigid_s"] = time.perf_counter() - t

    reg.deformed = warp(reg.grid, reg.transform, source)
    reg.runtimes["total_s"] = time.perf_counter() - t0
    reg.after = evaluate(reg.deformed, target, reg.grid, truth)
    reg.after.runtime_s = reg.runtimes["total_s"]
    return reg
