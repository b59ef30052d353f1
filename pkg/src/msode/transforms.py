"""Transform parameterizations and their realization as dense deformation fields.

Parameter containers are tagged dataclasses; every kind lowers to a pull-back
DeformationField via to_field(). Rotations use Euler order Z*Y*X about the
volume center in mm space. Fields store pull-back (sampling) coordinates:
for forward motion y = R(x - c) + c + t the field maps an output voxel p to
source R^-1(p - c - t) + c.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from .volume import (DeformationField, Volume3D, identity_grid, read_mv01,
                     trilinear_sample, write_mv01)

DEFAULT_CONTROL_SPACING_PX = 15


def _to_vec3(v, name: str) -> torch.Tensor:
    if isinstance(v, torch.Tensor):
        t = v.reshape(-1)
    else:
        t = torch.as_tensor([float(x) for x in v], dtype=torch.float32)
    if t.numel() != 3:
        raise ValueError(f"{name} must have 3 entries, got {t.numel()}")
    if not bool(torch.isfinite(t.detach()).all()):
        raise ValueError(f"{name} must be finite")
    return t


@dataclass
class Rigid6:
    """6-DOF rigid motion: rotations (deg, about z/y/x) and translation (mm).

    Stored as tensors so parameters can stay on an autograd tape.
    """

    angles_deg: torch.Tensor = (0.0, 0.0, 0.0)
    translation_mm: torch.Tensor = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.angles_deg = _to_vec3(self.angles_deg, "angles_deg")
        self.translation_mm = _to_vec3(self.translation_mm, "translation_mm")

    def angles(self) -> tuple[float, float, float]:
        return tuple(float(a) for a in self.angles_deg)

    def translations(self) -> tuple[float, float, float]:
        return tuple(float(t) for t in self.translation_mm)


@dataclass
class BSplineGrid:
    """Cubic B-spline FFD: control displacements in mm on a regular voxel grid.

    Control point k sits at voxel position (k - 1) * control_spacing_px, so the
    grid always extends one point beyond each volume edge.
    """

    displacements_mm: torch.Tensor           # [3, Gz, Gy, Gx]
    control_spacing_px: int = DEFAULT_CONTROL_SPACING_PX

    def __post_init__(self):
        if not isinstance(self.displacements_mm, torch.Tensor):
            self.displacements_mm = torch.as_tensor(np.asarray(self.displacements_mm), dtype=torch.float32)
        if self.displacements_mm.ndim != 4 or self.displacements_mm.shape[0] != 3:
            raise ValueError(f"displacements must be [3, Gz, Gy, Gx], got {tuple(self.displacements_mm.shape)}")
        if int(self.control_spacing_px) < 1:
            raise ValueError("control_spacing_px must be a positive int")
        self.control_spacing_px = int(self.control_spacing_px)

    @property
    def grid_dims(self) -> tuple[int, int, int]:
        return tuple(self.displacements_mm.shape[1:])


@dataclass
class DenseParams:
    """Per-voxel displacement in voxel units."""

    displacement_vox: torch.Tensor           # [3, D, H, W]

    def __post_init__(self):
        if not isinstance(self.displacement_vox, torch.Tensor):
            self.displacement_vox = torch.as_tensor(np.asarray(self.displacement_vox), dtype=torch.float32)
        if self.displacement_vox.ndim != 4 or self.displacement_vox.shape[0] != 3:
            raise ValueError(f"displacement must be [3, D, H, W], got {tuple(self.displacement_vox.shape)}")


@dataclass
class HybridParams:
    """Ordered (rigid, deformable) pair; the rigid motion is applied first."""

    rigid: Rigid6
    deform: "BSplineGrid | DenseParams"

    def __post_init__(self):
        if not isinstance(self.rigid, Rigid6):
            raise ValueError("hybrid rigid part must be Rigid6")
        if not isinstance(self.deform, (BSplineGrid, DenseParams)):
            raise ValueError("hybrid deform part must be BSplineGrid or DenseParams")


TransformParams = Rigid6 | BSplineGrid | DenseParams | HybridParams


def params_tag(p: TransformParams) -> str:
    if isinstance(p, Rigid6):
        return "rigid6"
    if isinstance(p, BSplineGrid):
        return "bspline"
    if isinstance(p, DenseParams):
        return "dense"
    if isinstance(p, HybridParams):
        return "hybrid"
    raise ValueError(f"not a TransformParams: {type(p)!r}")


# ---------------------------------------------------------------------------
# Rigid

def rotation_matrix_xyz(angles_deg) -> np.ndarray:
    """Composite R = Rz @ Ry @ Rx acting on (x, y, z)-ordered column vectors."""
    az, ay, ax = (math.radians(float(a)) for a in angles_deg)
    ca, sa = math.cos(az), math.sin(az)
    cb, sb = math.cos(ay), math.sin(ay)
    cg, sg = math.cos(ax), math.sin(ax)
    rz = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cg, -sg], [0.0, sg, cg]])
    return rz @ ry @ rx


def _rotation_matrix_zyx(angles_deg) -> np.ndarray:
    """Same rotation expressed on (z, y, x)-ordered vectors."""
    return rotation_matrix_xyz(angles_deg)[::-1, ::-1].copy()


def euler_zyx_from_matrix(r_xyz: np.ndarray) -> tuple[float, float, float]:
    """Recover (az, ay, ax) degrees from R = Rz@Ry@Rx; valid away from gimbal lock."""
    ay = math.asin(-float(np.clip(r_xyz[2, 0], -1.0, 1.0)))
    az = math.atan2(float(r_xyz[1, 0]), float(r_xyz[0, 0]))
    ax = math.atan2(float(r_xyz[2, 1]), float(r_xyz[2, 2]))
    return (math.degrees(az), math.degrees(ay), math.degrees(ax))


def rigid_inverse(p: Rigid6) -> Rigid6:
    """Parameters of the inverse motion: R' = R^T, t' = -R^T t."""
    r = rotation_matrix_xyz(p.angles())
    r_inv = r.T
    t_xyz = np.array(p.translations()[::-1])     # (x, y, z)
    t_inv = -r_inv @ t_xyz
    az, ay, ax = euler_zyx_from_matrix(r_inv)
    return Rigid6((az, ay, ax), tuple(float(v) for v in t_inv[::-1]))


def _rotation_matrix_zyx_t(angles_deg: torch.Tensor) -> torch.Tensor:
    """Differentiable R = Rz@Ry@Rx on (z, y, x)-ordered vectors, angles in degrees."""
    az, ay, ax = (angles_deg * math.pi / 180.0).unbind()
    one = torch.ones_like(az)
    zero = torch.zeros_like(az)
    ca, sa = torch.cos(az), torch.sin(az)
    cb, sb = torch.cos(ay), torch.sin(ay)
    cg, sg = torch.cos(ax), torch.sin(ax)
    rz = torch.stack([torch.stack([ca, -sa, zero]),
                      torch.stack([sa, ca, zero]),
                      torch.stack([zero, zero, one])])
    ry = torch.stack([torch.stack([cb, zero, sb]),
                      torch.stack([zero, one, zero]),
                      torch.stack([-sb, zero, cb])])
    rx = torch.stack([torch.stack([one, zero, zero]),
                      torch.stack([zero, cg, -sg]),
                      torch.stack([zero, sg, cg])])
    return (rz @ ry @ rx).flip(0).flip(1)


def rigid_field_from_tensor(theta: torch.Tensor, dims, spacing_mm) -> DeformationField:
    """Pull-back field from a live 6-vector [az, ay, ax, tz, ty, tx]; autograd-safe."""
    if any(d < 1 for d in dims):
        raise ValueError(f"dims must be >= 1, got {dims}")
    theta = theta.reshape(-1)
    if theta.numel() != 6:
        raise ValueError(f"rigid parameter vector must have 6 entries, got {theta.numel()}")
    r_inv = _rotation_matrix_zyx_t(theta[:3]).transpose(0, 1)
    spacing = torch.tensor(spacing_mm, dtype=theta.dtype).view(3, 1)
    center = torch.tensor([(d - 1) / 2.0 * s for d, s in zip(dims, spacing_mm)],
                          dtype=theta.dtype).view(3, 1)
    t = theta[3:].view(3, 1)

    mm = identity_grid(dims, dtype=theta.dtype).reshape(3, -1) * spacing
    src_mm = r_inv @ (mm - center - t) + center
    src_vox = (src_mm / spacing).reshape(3, *dims)
    return DeformationField(src_vox, tuple(spacing_mm))


def rigid_to_field(p: Rigid6, dims, spacing_mm) -> DeformationField:
    """Pull-back field of the rigid motion on a volume of the given dims/spacing."""
    return rigid_field_from_tensor(flatten_params(p), dims, spacing_mm)


# ---------------------------------------------------------------------------
# Cubic B-spline free-form deformation

def cubic_bspline_weights(t: torch.Tensor) -> torch.Tensor:
    """Uniform cubic B-spline basis values [4, ...] at local offsets t in [0, 1)."""
    t2 = t * t
    t3 = t2 * t
    b0 = (1 - t) ** 3 / 6.0
    b1 = (3 * t3 - 6 * t2 + 4) / 6.0
    b2 = (-3 * t3 + 3 * t2 + 3 * t + 1) / 6.0
    b3 = t3 / 6.0
    return torch.stack([b0, b1, b2, b3], dim=0)


def bspline_grid_dims(dims, control_spacing_px: int = DEFAULT_CONTROL_SPACING_PX) -> tuple[int, int, int]:
    """Control grid dims covering a volume with one border point beyond each edge."""
    return tuple(int((d - 1) // control_spacing_px) + 4 for d in dims)


def bspline_to_field(g: BSplineGrid, dims, spacing_mm) -> DeformationField:
    """Evaluate the FFD on the voxel grid; control displacements are mm."""
    need = bspline_grid_dims(dims, g.control_spacing_px)
    if g.grid_dims != need:
        raise ValueError(f"control grid {g.grid_dims} does not cover dims {dims}: "
                         f"expected {need} at spacing {g.control_spacing_px} px")
    ctrl = g.displacements_mm
    delta = float(g.control_spacing_px)

    idx, wts = [], []
    for d in dims:
        u = torch.arange(d, dtype=ctrl.dtype) / delta
        i = torch.floor(u)
        wts.append(cubic_bspline_weights(u - i))      # [4, d]
        idx.append(i.long())                          # base control index per voxel

    # Separable contraction: fold in x, then y, then z.
    acc_x = 0.0
    for c in range(4):
        acc_x = acc_x + ctrl[:, :, :, idx[2] + c] * wts[2][c]
    acc_y = 0.0
    for b in range(4):
        acc_y = acc_y + acc_x[:, :, idx[1] + b, :] * wts[1][b].view(1, 1, -1, 1)
    disp_mm = 0.0
    for a in range(4):
        disp_mm = disp_mm + acc_y[:, idx[0] + a, :, :] * wts[0][a].view(1, -1, 1, 1)

    spacing = torch.tensor(spacing_mm, dtype=ctrl.dtype).view(3, 1, 1, 1)
    mapping = identity_grid(dims, dtype=ctrl.dtype) + disp_mm / spacing
    return DeformationField(mapping, tuple(spacing_mm))


def dense_to_field(d: DenseParams, spacing_mm=(1.0, 1.0, 1.0)) -> DeformationField:
    dims = tuple(d.displacement_vox.shape[1:])
    mapping = identity_grid(dims, dtype=d.displacement_vox.dtype) + d.displacement_vox
    return DeformationField(mapping, tuple(spacing_mm))


def to_field(p: TransformParams, dims, spacing_mm) -> DeformationField:
    """Lower any parameterization to a dense pull-back field at dims/spacing."""
    if isinstance(p, Rigid6):
        return rigid_to_field(p, dims, spacing_mm)
    if isinstance(p, BSplineGrid):
        return bspline_to_field(p, dims, spacing_mm)
    if isinstance(p, DenseParams):
        if tuple(p.displacement_vox.shape[1:]) != tuple(dims):
            raise ValueError(f"dense params dims {tuple(p.displacement_vox.shape[1:])} != {tuple(dims)}")
        return dense_to_field(p, spacing_mm)
    if isinstance(p, HybridParams):
        f_rigid = rigid_to_field(p.rigid, dims, spacing_mm)
        f_deform = to_field(p.deform, dims, spacing_mm)
        return compose(f_deform, f_rigid)    # rigid innermost = applied to the image first
    raise ValueError(f"not a TransformParams: {type(p)!r}")


def compose(outer: DeformationField, inner: DeformationField) -> DeformationField:
    """Field of warp-by-inner-then-outer: result(p) = inner.map(outer.map(p)).

    warp(v, compose(a, b)) matches warp(warp(v, b), a) up to interpolation error.
    """
    if outer.dims != inner.dims:
        raise ValueError(f"field dims differ: {outer.dims} vs {inner.dims}")
    inner_vol = Volume3D(inner.map, inner.spacing_mm)
    sampled = trilinear_sample(inner_vol, outer.map.reshape(3, -1))
    return DeformationField(sampled.reshape(3, *outer.dims), outer.spacing_mm)


def identity_params(tag: str, dims, control_spacing_px: int = DEFAULT_CONTROL_SPACING_PX,
                    dtype=torch.float32) -> TransformParams:
    """Zero (identity-transform) parameters of the given kind for a volume of dims."""
    if tag == "rigid6":
        return Rigid6(torch.zeros(3, dtype=dtype), torch.zeros(3, dtype=dtype))
    if tag == "bspline":
        g = bspline_grid_dims(dims, control_spacing_px)
        return BSplineGrid(torch.zeros(3, *g, dtype=dtype), control_spacing_px)
    if tag == "dense":
        return DenseParams(torch.zeros(3, *dims, dtype=dtype))
    raise ValueError(f"unknown tag {tag!r} (hybrid runs as two cascaded stages)")


# ---------------------------------------------------------------------------
# Flattening (fixed ordering: angles then translations; channel-major grids)

def flatten_params(p: TransformParams) -> torch.Tensor:
    if isinstance(p, Rigid6):
        return torch.cat([p.angles_deg, p.translation_mm])
    if isinstance(p, BSplineGrid):
        return p.displacements_mm.reshape(-1)
    if isinstance(p, DenseParams):
        return p.displacement_vox.reshape(-1)
    if isinstance(p, HybridParams):
        return torch.cat([flatten_params(p.rigid), flatten_params(p.deform)])
    raise ValueError(f"not a TransformParams: {type(p)!r}")


def unflatten_params(vec: torch.Tensor, tag: str, shape=None,
                     control_spacing_px: int = DEFAULT_CONTROL_SPACING_PX,
                     deform_tag: str | None = None) -> TransformParams:
    """Inverse of flatten_params. shape is the [3, ...] tensor shape for grid/dense
    payloads; for hybrid it is the deformable part's shape with deform_tag set."""
    vec = vec.reshape(-1)
    if tag == "rigid6":
        if vec.numel() != 6:
            raise ValueError(f"rigid6 expects 6 values, got {vec.numel()}")
        return Rigid6(vec[:3], vec[3:])
    if tag == "bspline":
        n = int(np.prod(shape))
        if vec.numel() != n:
            raise ValueError(f"bspline grid {shape} expects {n} values, got {vec.numel()}")
        return BSplineGrid(vec.reshape(shape), control_spacing_px)
    if tag == "dense":
        n = int(np.prod(shape))
        if vec.numel() != n:
            raise ValueError(f"dense field {shape} expects {n} values, got {vec.numel()}")
        return DenseParams(vec.reshape(shape))
    if tag == "hybrid":
        if deform_tag not in ("bspline", "dense"):
            raise ValueError("hybrid unflatten needs deform_tag of 'bspline' or 'dense'")
        rigid = unflatten_params(vec[:6], "rigid6")
        deform = unflatten_params(vec[6:], deform_tag, shape, control_spacing_px)
        return HybridParams(rigid, deform)
    raise ValueError(f"unknown tag {tag!r}")


# ---------------------------------------------------------------------------
# Parameter files: JSON with optional MV01 payload alongside

def save_params(p: TransformParams, path) -> None:
    path = str(path)
    doc: dict = {"tag": params_tag(p)}

    def payload_name(suffix):
        base = os.path.basename(path)
        stem = base[:-5] if base.endswith(".json") else base
        return f"{stem}_{suffix}.mv01"

    def write_payload(tensor, suffix):
        name = payload_name(suffix)
        write_mv01(Volume3D(tensor), os.path.join(os.path.dirname(path) or ".", name))
        return name

    if isinstance(p, Rigid6):
        doc["angles_deg"] = list(p.angles())
        doc["translation_mm"] = list(p.translations())
    elif isinstance(p, BSplineGrid):
        doc["grid_dims"] = list(p.grid_dims)
        doc["control_spacing_px"] = p.control_spacing_px
        doc["data_file"] = write_payload(p.displacements_mm, "grid")
    elif isinstance(p, DenseParams):
        doc["data_file"] = write_payload(p.displacement_vox, "dense")
    elif isinstance(p, HybridParams):
        doc["angles_deg"] = list(p.rigid.angles())
        doc["translation_mm"] = list(p.rigid.translations())
        doc["deform_tag"] = params_tag(p.deform)
        if isinstance(p.deform, BSplineGrid):
            doc["grid_dims"] = list(p.deform.grid_dims)
            doc["control_spacing_px"] = p.deform.control_spacing_px
            doc["data_file"] = write_payload(p.deform.displacements_mm, "grid")
        else:
            doc["data_file"] = write_payload(p.deform.displacement_vox, "dense")
    else:
        raise ValueError(f"not a TransformParams: {type(p)!r}")

    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def load_params(path) -> TransformParams:
    path = str(path)
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise FileNotFoundError(f"parameter file not found: {path}") from None

    def read_payload():
        data_path = os.path.join(os.path.dirname(path) or ".", doc["data_file"])
        return read_mv01(data_path).data

    tag = doc.get("tag")
    if tag == "rigid6":
        return Rigid6(tuple(doc["angles_deg"]), tuple(doc["translation_mm"]))
    if tag == "bspline":
        return BSplineGrid(read_payload(), doc.get("control_spacing_px", DEFAULT_CONTROL_SPACING_PX))
    if tag == "dense":
        return DenseParams(read_payload())
    if tag == "hybrid":
        rigid = Rigid6(tuple(doc["angles_deg"]), tuple(doc["translation_mm"]))
        if doc.get("deform_tag") == "bspline":
            deform = BSplineGrid(read_payload(), doc.get("control_spacing_px", DEFAULT_CONTROL_SPACING_PX))
        else:
            deform = DenseParams(read_payload())
        return HybridParams(rigid, deform)
    raise ValueError(f"{path}: unknown transform tag {tag!r}")
