"""PLY reading and writing for labeled clouds.

Vertices carry float ``x, y, z``, optional ``nx, ny, nz`` and a required integer
``label``. Any other vertex property is ignored on read.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement

from .cloud import PointCloud
from .errors import FormatError


def read_ply(path) -> PointCloud:
    try:
        ply = PlyData.read(str(path))
    except Exception as exc:  # plyfile raises a variety of parse errors
        raise FormatError(f"{path}: cannot parse PLY ({exc})") from exc
    if "vertex" not in ply:
        raise FormatError(f"{path}: no 'vertex' element")
    vert = ply["vertex"].data
    names = vert.dtype.names or ()
    for prop in ("x", "y", "z"):
        if prop not in names:
            raise FormatError(f"{path}: missing vertex property '{prop}'")
    if "label" not in names:
        raise FormatError(f"{path}: missing required vertex property 'label'")
    if not np.issubdtype(vert["label"].dtype, np.integer):
        raise FormatError(f"{path}: vertex property 'label' must be an integer type")
    points = np.column_stack([vert["x"], vert["y"], vert["z"]]).astype(np.float64)
    normals = None
    if all(n in names for n in ("nx", "ny", "nz")):
        normals = np.column_stack([vert["nx"], vert["ny"], vert["nz"]]).astype(np.float64)
        # float32 storage loses the unit-norm tolerance; renormalize
        norm = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = normals / np.where(norm > 0, norm, 1.0)
    return PointCloud(points, vert["label"].astype(np.int64), normals)


def write_ply(path, cloud: PointCloud, binary: bool = True, double: bool = True) -> None:
    """Write ``cloud``; coordinates are stored as doubles unless ``double`` is off."""
    ftype = "f8" if double else "f4"
    fields = [("x", ftype), ("y", ftype), ("z", ftype)]
    if cloud.normals is not None:
        fields += [("nx", ftype), ("ny", ftype), ("nz", ftype)]
    fields.append(("label", "i4"))
    data = np.empty(len(cloud), dtype=fields)
    data["x"], data["y"], data["z"] = cloud.points.T
    if cloud.normals is not None:
        data["nx"], data["ny"], data["nz"] = cloud.normals.T
    data["label"] = cloud.labels
    el = PlyElement.describe(data, "vertex")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PlyData([el], text=not binary, byte_order="<").write(str(path))
