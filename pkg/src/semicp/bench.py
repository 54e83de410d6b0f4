"""Seeded sweeps over synthetic cases: rigid visibility/rotation grids and
regularizer ablations, aggregated to mean/std CSV rows."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .cloud import PointCloud
from .pipeline import RunConfig, register_pair
from .synth import (
    Ellipsoid,
    PerturbationSpec,
    PhantomSpec,
    Tube,
    WarpSpec,
    default_phantom_spec,
    make_phantom,
    make_warped_pair,
    perturb,
    write_case,
)

REG_VARIANTS = {
    "els": (1.0, 0.0, 0.0),
    "mag": (0.0, 1.0, 0.0),
    "grad": (0.0, 0.0, 1.0),
    "all": (1.0, 1.0, 1.0),
    "none": (0.0, 0.0, 0.0),
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ShapeModel(_Strict):
    type: Literal["ellipsoid", "tube"]
    label: int = Field(ge=0)
    count: int
    center: tuple[float, float, float] | None = None
    radii: tuple[float, float, float] | None = None
    start: tuple[float, float, float] | None = None
    end: tuple[float, float, float] | None = None
    radius: float | None = None

    def build(self):
        if self.type == "ellipsoid":
            if self.center is None or self.radii is None:
                raise ValueError("an ellipsoid needs center and radii")
            return Ellipsoid(self.center, self.radii, self.label, self.count)
        if self.start is None or self.end is None or self.radius is None:
            raise ValueError("a tube needs start, end and radius")
        return Tube(self.start, self.end, self.radius, self.label, self.count)


class PhantomModel(_Strict):
    shapes: list[ShapeModel] | None = None  # None: the default multi-organ phantom
    noise_mm: float = Field(0.0, ge=0)
    seed: int = Field(0, ge=0)

    def build(self) -> PhantomSpec:
        if self.shapes is None:
            return default_phantom_spec(self.seed, self.noise_mm)
        return PhantomSpec(tuple(s.build() for s in self.shapes), self.noise_mm, self.seed)


class PerturbationModel(_Strict):
    visible_ratio: float = Field(1.0, gt=0, le=1)
    theta_max_deg: float = Field(0.0, ge=0)
    t_max_mm: float = Field(10.0, ge=0)
    noise_mm: float = Field(1.0, ge=0)

    def build(self, seed: int) -> PerturbationSpec:
        return PerturbationSpec(self.visible_ratio, self.theta_max_deg, self.t_max_mm, self.noise_mm, 1, seed)


class WarpModel(_Strict):
    grid: int = Field(25, ge=2)
    max_disp_mm: float = Field(5.0, ge=0)
    smoothness: float = Field(1.0, gt=0)

    def build(self) -> WarpSpec:
        return WarpSpec(self.grid, self.max_disp_mm, self.smoothness)


class SynthSpec(_Strict):
    """``synth`` input: a phantom, an optional warp and an optional perturbation,
    materialized ``replicas`` times with seeds ``seed, seed+1, ...``."""

    phantom: PhantomModel = PhantomModel()
    warp: WarpModel | None = None
    perturbation: PerturbationModel | None = None
    replicas: int = Field(1, ge=1)
    seed: int = Field(0, ge=0)


def synth_cases(spec: SynthSpec, out_dir) -> list[Path]:
    base = make_phantom(spec.phantom.build())
    dirs = []
    for i in range(spec.replicas):
        seed = spec.seed + i
        source, target, grid, truth = base, base, None, None
        if spec.warp is not None:
            source, target, grid = make_warped_pair(base, spec.warp.build(), seed)
        if spec.perturbation is not None:
            source, truth = perturb(source, spec.perturbation.build(seed))
        extra = {"seed": seed}
        dirs.append(write_case(Path(out_dir) / f"case_{i}", source, target, truth, grid, extra))
    return dirs


# --- sweeps -----------------------------------------------------------------


def rigid_case(seed: int, visibility: float, rotation_deg: float, semantic: bool,
               t_max_mm: float = 10.0, noise_mm: float = 1.0, config: RunConfig | None = None,
               phantom: PointCloud | None = None) -> dict:
    """One rigid-only registration of a perturbed phantom back onto the phantom."""
    phantom = phantom if phantom is not None else make_phantom()
    spec = PerturbationSpec(visibility, rotation_deg, t_max_mm, noise_mm, 1, seed)
    source, truth = perturb(phantom, spec)
    cfg = (config or RunConfig()).model_copy(update={"semantic": semantic})
    cfg = cfg.model_copy(update={"nonrigid": cfg.nonrigid.model_copy(update={"enabled": False})})
    reg = register_pair(source, phantom, cfg, truth=truth.apply(source.points))
    avg = reg.after.average
    return {"tre": avg["tre"], "hd95": avg["hd95"], "msd": avg["msd"], "runtime_s": reg.runtimes["total_s"],
            "tre_before": reg.before.average["tre"]}


def regularizer_case(seed: int, variant: str, max_disp_mm: float = 5.0, noise_mm: float = 1.0,
                     config: RunConfig | None = None) -> dict:
    """Non-rigid-only registration of a noisy warped phantom under one regularizer set."""
    base = make_phantom(default_phantom_spec(noise_mm=noise_mm))
    source, target, _ = make_warped_pair(base, WarpSpec(max_disp_mm=max_disp_mm), seed)
    cfg = config or RunConfig()
    a, b, g = REG_VARIANTS[variant]
    cfg = cfg.model_copy(update={
        "weights": cfg.weights.model_copy(update={"alpha": a, "beta": b, "gamma": g}),
        "rigid": cfg.rigid.model_copy(update={"enabled": False}),
    })
    reg = register_pair(source, target, cfg)
    avg = reg.after.average
    return {"hd95": avg["hd95"], "msd": avg["msd"], "sdlogj": reg.after.sdlogj,
            "folded": reg.after.folded_cell_fraction, "runtime_s": reg.runtimes["total_s"]}


class BenchProtocol(_Strict):
    kind: Literal["rigid", "regularizer"]
    seeds: int | list[int] = 20
    visibility: list[float] = [0.25]
    rotation_deg: list[float] = [5.0]
    modes: list[Literal["semantic", "no-semantic"]] = ["semantic", "no-semantic"]
    t_max_mm: float = Field(10.0, ge=0)
    noise_mm: float = Field(1.0, ge=0)
    variants: list[Literal["els", "mag", "grad", "all", "none"]] = list(REG_VARIANTS)
    max_disp_mm: float = Field(5.0, ge=0)
    config: RunConfig = RunConfig()

    def seed_list(self) -> list[int]:
        return list(range(self.seeds)) if isinstance(self.seeds, int) else list(self.seeds)


def _call(job):
    fn, kwargs = job
    return fn(**kwargs)


def _cells(protocol: BenchProtocol):
    """(row key, case function, kwargs per seed) for every cell of the sweep."""
    p = protocol
    if p.kind == "rigid":
        for vis in p.visibility:
            for rot in p.rotation_deg:
                for mode in p.modes:
                    kw = dict(visibility=vis, rotation_deg=rot, semantic=mode == "semantic",
                              t_max_mm=p.t_max_mm, noise_mm=p.noise_mm, config=p.config)
                    yield {"visibility": vis, "rotation_deg": rot, "mode": mode}, rigid_case, kw
    else:
        for var in p.variants:
            kw = dict(variant=var, max_disp_mm=p.max_disp_mm, noise_mm=p.noise_mm, config=p.config)
            yield {"variant": var}, regularizer_case, kw


def run_protocol(protocol: BenchProtocol, processes: int = 1) -> list[dict]:
    """Run every cell over every seed; one aggregate row (mean/std per metric) per cell."""
    seeds = protocol.seed_list()
    cells = list(_cells(protocol))
    jobs = [(fn, {**kw, "seed": s}) for _, fn, kw in cells for s in seeds]
    if processes > 1:
        with ProcessPoolExecutor(processes) as pool:
            results = list(pool.map(_call, jobs))
    else:
        results = [_call(j) for j in jobs]
    rows = []
    for c, (key, _, _) in enumerate(cells):
        chunk = results[c * len(seeds):(c + 1) * len(seeds)]
        row = dict(key, n=len(chunk))
        for metric in chunk[0]:
            vals = np.array([r[metric] for r in chunk], dtype=np.float64)
            row[f"{metric}_mean"] = float(vals.mean())
            row[f"{metric}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rows.append(row)
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
