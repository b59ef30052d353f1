"""3D multi-channel volumes: interpolation, warping, pyramids, gradients, file I/O.

Conventions used throughout the package:
  * tensors are [C, D, H, W] with axes ordered (z, y, x), C-order on disk
  * deformation fields store absolute pull-back coordinates in voxel units:
    warped(p) = vol(field.map[:, p])
  * spacing is mm per voxel along (z, y, x)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch


class NumericsError(RuntimeError):
    """Raised when a computation produces non-finite values or fails to converge."""


def _as_tensor(data, dtype=None) -> torch.Tensor:
    if isinstance(data, torch.Tensor):
        t = data
    else:
        t = torch.as_tensor(np.asarray(data))
    if dtype is not None:
        t = t.to(dtype)
    if not t.is_floating_point():
        t = t.float()
    return t


@dataclass
class Volume3D:
    """Multi-channel scalar field on a regular grid with physical voxel spacing."""

    data: torch.Tensor                       # [C, D, H, W]
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: int = 0

    def __post_init__(self):
        self.data = _as_tensor(self.data)
        if self.data.ndim == 3:
            self.data = self.data.unsqueeze(0)
        if self.data.ndim != 4:
            raise ValueError(f"volume data must be [C, D, H, W], got shape {tuple(self.data.shape)}")
        if any(s < 1 for s in self.data.shape):
            raise ValueError(f"all dims must be >= 1, got {tuple(self.data.shape)}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"spacing_mm must be 3 positive values, got {self.spacing_mm}")
        if self.modality < 0:
            raise ValueError(f"modality id must be >= 0, got {self.modality}")
        if not bool(torch.isfinite(self.data.detach()).all()):
            raise NumericsError("volume data contains NaN/Inf")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]


@dataclass
class DeformationField:
    """Dense pull-back map: map[:, z, y, x] is the source coordinate (voxel units)."""

    map: torch.Tensor                        # [3, D, H, W]
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.map = _as_tensor(self.map)
        if self.map.ndim != 4 or self.map.shape[0] != 3:
            raise ValueError(f"field map must be [3, D, H, W], got shape {tuple(self.map.shape)}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"spacing_mm must be 3 positive values, got {self.spacing_mm}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.map.shape[1:])

    def displacement(self) -> torch.Tensor:
        """Displacement in voxel units: map minus the identity grid."""
        return self.map - identity_grid(self.dims, dtype=self.map.dtype)


def identity_grid(dims, dtype=torch.float32) -> torch.Tensor:
    """[3, D, H, W] grid with grid[k, z, y, x] = (z, y, x)[k]."""
    axes = [torch.arange(d, dtype=dtype) for d in dims]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=0)


def identity_field(dims, spacing_mm=(1.0, 1.0, 1.0)) -> DeformationField:
    return DeformationField(identity_grid(dims), spacing_mm)


def trilinear_sample(vol: Volume3D, coords: torch.Tensor, border_value: float = 0.0,
                     border: str = "zero") -> torch.Tensor:
    """Sample vol at fractional voxel coordinates coords [3, N] -> [C, N].

    border="zero": voxels outside the grid contribute border_value.
    border="clamp": coordinates are clamped to the grid before sampling.
    Exact at integer grid coordinates (weights are exactly {0, 1} there).
    """
    coords = _as_tensor(coords)
    if coords.ndim != 2 or coords.shape[0] != 3:
        raise ValueError(f"coords must be [3, N], got shape {tuple(coords.shape)}")
    if not bool(torch.isfinite(coords.detach()).all()):
        raise NumericsError("sampling coordinates contain NaN/Inf")
    if border not in ("zero", "clamp"):
        raise ValueError(f"unknown border mode {border!r}")

    data = vol.data
    dims = vol.dims
    if border == "clamp":
        lims = torch.tensor([d - 1 for d in dims], dtype=coords.dtype).view(3, 1)
        coords = torch.minimum(torch.maximum(coords, torch.zeros_like(lims)), lims)

    i0f = torch.floor(coords)
    frac = coords - i0f                       # in [0, 1)
    i0 = i0f.long()

    # per-axis pieces, combined per corner below (cheaper than [8, 3, N] math)
    strides = (dims[1] * dims[2], dims[2], 1)
    lin_ax, valid_ax, w_ax = [], [], []
    for k in range(3):
        lo = i0[k]
        hi = lo + 1
        lin_ax.append((lo.clamp(0, dims[k] - 1) * strides[k],
                       hi.clamp(0, dims[k] - 1) * strides[k]))
        valid_ax.append(((lo >= 0) & (lo < dims[k]), (hi >= 0) & (hi < dims[k])))
        w_ax.append((1 - frac[k], frac[k]))

    rows_l, rows_v, rows_w = [], [], []
    for bz in (0, 1):
        for by in (0, 1):
            for bx in (0, 1):
                rows_l.append(lin_ax[0][bz] + lin_ax[1][by] + lin_ax[2][bx])
                rows_v.append(valid_ax[0][bz] & valid_ax[1][by] & valid_ax[2][bx])
                rows_w.append(w_ax[0][bz] * w_ax[1][by] * w_ax[2][bx])
    lin = torch.stack(rows_l)                 # [8, N]
    w_eff = torch.stack(rows_w) * torch.stack(rows_v).to(coords.dtype)

    flat = data.reshape(data.shape[0], -1)    # [C, D*H*W]
    vals = torch.index_select(flat, 1, lin.reshape(-1)).reshape(data.shape[0], 8, -1)
    acc = (vals * w_eff.unsqueeze(0)).sum(dim=1)
    if border == "zero" and border_value != 0.0:
        acc = acc + border_value * (1.0 - w_eff.sum(dim=0))
    return acc


def warp(vol: Volume3D, field: DeformationField, border_value: float = 0.0,
         border: str = "zero") -> Volume3D:
    """Pull-back resampling: out[c, p] = trilinear_sample(vol, field.map[:, p])."""
    if field.dims != vol.dims:
        raise ValueError(f"field dims {field.dims} do not match volume dims {vol.dims}")
    coords = field.map.reshape(3, -1)
    sampled = trilinear_sample(vol, coords, border_value=border_value, border=border)
    out = sampled.reshape(vol.n_channels, *field.dims)
    return Volume3D(out, vol.spacing_mm, vol.modality)


def downsample2x(vol: Volume3D) -> Volume3D:
    """2x2x2 average pooling; dims halve (floor), spacing doubles. Odd trailing slices drop."""
    if any(d < 2 for d in vol.dims):
        raise ValueError(f"all spatial dims must be >= 2 to downsample, got {vol.dims}")
    pooled = torch.nn.functional.avg_pool3d(vol.data.unsqueeze(0), kernel_size=2, stride=2).squeeze(0)
    spacing = tuple(2.0 * s for s in vol.spacing_mm)
    return Volume3D(pooled, spacing, vol.modality)


def build_pyramid(vol: Volume3D, levels: int) -> list[Volume3D]:
    """Image pyramid, coarsest first; element levels-1 is vol itself."""
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    pyr = [vol]
    for _ in range(levels - 1):
        if any(d < 2 for d in pyr[0].dims):
            raise ValueError(f"dims {vol.dims} do not support {levels - 1} halvings")
        pyr.insert(0, downsample2x(pyr[0]))
    return pyr


def spatial_gradient(field: DeformationField) -> torch.Tensor:
    """Gradient of the displacement: out[k, a] = d(disp_k)/d(axis a), shape [3, 3, D, H, W].

    Central differences in the interior, one-sided at borders.
    """
    if any(d < 2 for d in field.dims):
        raise ValueError(f"all dims must be >= 2 for gradients, got {field.dims}")
    disp = field.displacement()
    rows = []
    for k in range(3):
        rows.append(torch.stack(torch.gradient(disp[k], dim=(0, 1, 2)), dim=0))
    return torch.stack(rows, dim=0)


# ---------------------------------------------------------------------------
# MV01 container: one JSON header line, then raw little-endian voxels, C-order.

_MV01_DTYPES = {"f32": "<f4", "u8": "<u1"}


def write_mv01(vol: Volume3D, path, dtype: str = "f32") -> None:
    if dtype not in _MV01_DTYPES:
        raise ValueError(f"unsupported MV01 dtype {dtype!r}")
    header = {
        "magic": "MV01",
        "dims": [vol.n_channels, *vol.dims],
        "spacing_mm": list(vol.spacing_mm),
        "modality": vol.modality,
        "dtype": dtype,
    }
    arr = vol.data.detach().cpu().numpy().astype(_MV01_DTYPES[dtype])
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        f.write(arr.tobytes(order="C"))


def read_mv01(path) -> Volume3D:
    try:
        with open(path, "rb") as f:
            header_line = f.readline()
            payload = f.read()
    except FileNotFoundError:
        raise FileNotFoundError(f"MV01 volume not found: {path}") from None
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"{path}: invalid MV01 header: {e}") from None
    if header.get("magic") != "MV01":
        raise ValueError(f"{path}: not an MV01 file (magic={header.get('magic')!r})")
    dims = header["dims"]
    np_dtype = _MV01_DTYPES.get(header.get("dtype"))
    if np_dtype is None:
        raise ValueError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    expected = int(np.prod(dims)) * np.dtype(np_dtype).itemsize
    if len(payload) != expected:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=np_dtype).reshape(dims).astype(np.float32)
    return Volume3D(torch.from_numpy(arr.copy()), tuple(header["spacing_mm"]), int(header["modality"]))
