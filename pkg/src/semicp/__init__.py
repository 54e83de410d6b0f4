"""Label-aware ICP: labeled point-cloud registration, rigid then control-grid non-rigid."""

__version__ = "0.1.0"

from .cloud import PointCloud, estimate_normals, fit_normalization, validate_pair
from .deform import ControlGrid, ElasticParams, RegWeights, load_grid, register_nonrigid, save_grid, warp
from .metrics import MetricsReport, evaluate, hd95, msd, sdlogj, tre
from .pipeline import RunConfig, register_pair
from .plyio import read_ply, write_ply
from .rigid import RigidTransform, register_rigid

__all__ = [
    "ControlGrid", "ElasticParams", "MetricsReport", "PointCloud", "RegWeights", "RigidTransform", "RunConfig",
    "estimate_normals", "evaluate", "fit_normalization", "hd95", "load_grid", "msd", "read_ply",
    "register_nonrigid", "register_pair", "register_rigid", "save_grid", "sdlogj", "tre", "validate_pair",
    "warp", "write_ply",
]
