"""Synthetic multi-contrast phantoms, ground-truth motion, and dataset files.

Phantoms share one anatomy (smooth ellipsoidal blobs inside a head ellipsoid,
one designated lesion blob providing the evaluation mask) rendered into M
modalities by monotone intensity remaps, a smooth multiplicative bias field,
and additive Gaussian noise. Motion is sampled per the evaluation protocol:
uniform per-axis rigid ranges, Gaussian B-spline control displacements, or a
rigid-first hybrid of the two.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .transforms import (BSplineGrid, DenseParams, HybridParams, Rigid6,
                         TransformParams, bspline_grid_dims, load_params,
                         params_tag, save_params, to_field)
from .volume import DeformationField, Volume3D, read_mv01, warp, write_mv01

MOTION_PRESETS = {
    # evaluation ranges: rigid U(-75, 75) deg / U(-20, 20) mm; deformable
    # N(0, (8 mm)^2) control noise; hybrid U(-40, 40) deg / U(-10, 10) mm + 8 mm
    "rigid-full": dict(kind="rigid", rot_range_deg=75.0, trans_range_mm=20.0),
    "deform-8mm": dict(kind="deformable", bspline_sigma_mm=8.0),
    "hybrid": dict(kind="hybrid", rot_range_deg=40.0, trans_range_mm=10.0,
                   bspline_sigma_mm=8.0),
}


@dataclass
class MotionSpec:
    kind: str = "rigid"                     # rigid | deformable | hybrid
    rot_range_deg: float = 0.0
    trans_range_mm: float = 0.0
    bspline_sigma_mm: float = 0.0
    control_spacing_px: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("rigid", "deformable", "hybrid"):
            raise ValueError(f"motion kind must be rigid/deformable/hybrid, got {self.kind!r}")
        if min(self.rot_range_deg, self.trans_range_mm, self.bspline_sigma_mm) < 0:
            raise ValueError("motion ranges must be >= 0")

    @classmethod
    def preset(cls, name: str, seed: int = 0) -> "MotionSpec":
        if name not in MOTION_PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(MOTION_PRESETS)}")
        return cls(seed=seed, **MOTION_PRESETS[name])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "rot_range_deg": self.rot_range_deg,
                "trans_range_mm": self.trans_range_mm,
                "bspline_sigma_mm": self.bspline_sigma_mm,
                "control_spacing_px": self.control_spacing_px, "seed": self.seed}


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (48, 48, 48)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_modalities: int = 2
    n_blobs: int = 6
    noise_std: float = 0.01
    bias_strength: float = 0.15
    seed: int = 0
    style_gammas: list[float] | None = None   # one monotone remap exponent per modality

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if any(d < 16 for d in self.dims):
            raise ValueError(f"phantom dims must be >= 16 per axis, got {self.dims}")
        if self.n_modalities < 2:
            raise ValueError(f"need >= 2 modalities, got {self.n_modalities}")
        if self.style_gammas is not None and len(self.style_gammas) != self.n_modalities:
            raise ValueError("style_gammas must list one exponent per modality")

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "spacing_mm": list(self.spacing_mm),
                "n_modalities": self.n_modalities, "n_blobs": self.n_blobs,
                "noise_std": self.noise_std, "bias_strength": self.bias_strength,
                "seed": self.seed, "style_gammas": self.style_gammas}


def sample_motion(spec: MotionSpec, dims, spacing_mm,
                  rng: np.random.Generator | None = None) -> TransformParams:
    """Draw ground-truth parameters from the evaluation distributions."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)

    def rigid_part():
        angles = rng.uniform(-spec.rot_range_deg, spec.rot_range_deg, size=3)
        trans = rng.uniform(-spec.trans_range_mm, spec.trans_range_mm, size=3)
        return Rigid6(tuple(angles), tuple(trans))

    def deform_part():
        gd = bspline_grid_dims(dims, spec.control_spacing_px)
        disp = rng.normal(0.0, spec.bspline_sigma_mm, size=(3, *gd)) \
            if spec.bspline_sigma_mm > 0 else np.zeros((3, *gd))
        return BSplineGrid(torch.from_numpy(disp.astype(np.float32)),
                           spec.control_spacing_px)

    if spec.kind == "rigid":
        return rigid_part()
    if spec.kind == "deformable":
        return deform_part()
    return HybridParams(rigid_part(), deform_part())


def _blob(grid: torch.Tensor, center, radii) -> torch.Tensor:
    """Smooth unit-peak blob: exp(-r^2) with per-axis radii."""
    r2 = sum(((grid[k] - center[k]) / radii[k]) ** 2 for k in range(3))
    return torch.exp(-r2)


def make_phantom_pair(spec: PhantomSpec):
    """Returns (one Volume3D per modality sharing anatomy, lesion mask)."""
    rng = np.random.default_rng(spec.seed)
    dims = spec.dims
    axes = [torch.arange(d, dtype=torch.float32) for d in dims]
    grid = torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=0)
    center = torch.tensor([(d - 1) / 2.0 for d in dims])

    head_radii = [0.42 * d for d in dims]
    head = _blob(grid, center, head_radii)
    head_mask = (head > 0.37).float()          # fairly sharp skull boundary

    content = 0.35 * torch.ones(dims)
    for _ in range(max(0, spec.n_blobs - 1)):
        c = [center[k] + rng.uniform(-0.22, 0.22) * dims[k] for k in range(3)]
        radii = [rng.uniform(0.06, 0.16) * dims[k] for k in range(3)]
        amp = rng.uniform(-0.3, 0.45)
        content = content + amp * _blob(grid, torch.tensor(c), radii)

    lesion_c = [center[k] + rng.uniform(-0.15, 0.15) * dims[k] for k in range(3)]
    lesion_r = [rng.uniform(0.10, 0.14) * dims[k] for k in range(3)]
    lesion = _blob(grid, torch.tensor(lesion_c), lesion_r)
    content = content + 0.5 * lesion
    content = content.clamp(0.05, 1.0) * head_mask
    mask = Volume3D((lesion > 0.5).float().unsqueeze(0), spec.spacing_mm)

    gammas = spec.style_gammas
    if gammas is None:
        gammas = [0.55 + 1.0 * m / max(1, spec.n_modalities - 1) for m in range(spec.n_modalities)]

    vols = []
    for m in range(spec.n_modalities):
        styled = content.clamp(0, 1) ** gammas[m]
        if spec.bias_strength > 0:
            coarse = torch.from_numpy(rng.uniform(-1, 1, size=(1, 1, 4, 4, 4)).astype(np.float32))
            bias = torch.nn.functional.interpolate(coarse, size=dims, mode="trilinear",
                                                   align_corners=True)[0, 0]
            styled = styled * (1.0 + spec.bias_strength * bias)
        if spec.noise_std > 0:
            styled = styled + torch.from_numpy(
                rng.normal(0, spec.noise_std, size=dims).astype(np.float32))
        styled = (styled * head_mask).clamp(0.0, 1.5)
        vols.append(Volume3D(styled.unsqueeze(0), spec.spacing_mm, modality=m))
    return vols, mask


def apply_motion(vol: Volume3D, params: TransformParams):
    """Realize the motion: returns (moved volume, ground-truth field)."""
    gt_field = to_field(params, vol.dims, vol.spacing_mm)
    return warp(vol, gt_field), gt_field


# ---------------------------------------------------------------------------
# Dataset persistence: index.json + one directory per pair

@dataclass
class RegPair:
    moving: Volume3D
    fixed: Volume3D
    mask_mov: Volume3D
    mask_fix: Volume3D
    gt_params: TransformParams
    gt_field: DeformationField
    moved_gt: Volume3D                     # warp(moving, gt_field): the RMSE(x) target


class Dataset:
    """Lazy reader over a dataset directory written by write_dataset."""

    def __init__(self, root: str, meta: dict):
        self.root = root
        self.meta = meta

    @property
    def n_pairs(self) -> int:
        return len(self.meta["pairs"])

    def pair_dir(self, i: int) -> str:
        return os.path.join(self.root, self.meta["pairs"][i])

    def load_pair(self, i: int) -> RegPair:
        d = self.pair_dir(i)
        if not os.path.isdir(d):
            raise FileNotFoundError(f"dataset pair directory missing: {d}")
        gt_field_vol = read_mv01(os.path.join(d, "gt_field.mv01"))
        return RegPair(
            moving=read_mv01(os.path.join(d, "moving.mv01")),
            fixed=read_mv01(os.path.join(d, "fixed.mv01")),
            mask_mov=read_mv01(os.path.join(d, "mask_mov.mv01")),
            mask_fix=read_mv01(os.path.join(d, "mask_fix.mv01")),
            gt_params=load_params(os.path.join(d, "gt_params.json")),
            gt_field=DeformationField(gt_field_vol.data, gt_field_vol.spacing_mm),
            moved_gt=read_mv01(os.path.join(d, "moved_gt.mv01")),
        )

    def pairs(self):
        for i in range(self.n_pairs):
            yield self.load_pair(i)


def write_dataset(out_dir, pairs, meta: dict | None = None) -> Dataset:
    os.makedirs(out_dir, exist_ok=True)
    index = dict(meta or {})
    index["pairs"] = []
    for i, pair in enumerate(pairs):
        name = f"pair_{i:04d}"
        d = os.path.join(out_dir, name)
        os.makedirs(d, exist_ok=True)
        write_mv01(pair.moving, os.path.join(d, "moving.mv01"))
        write_mv01(pair.fixed, os.path.join(d, "fixed.mv01"))
        write_mv01(pair.mask_mov, os.path.join(d, "mask_mov.mv01"), dtype="u8")
        write_mv01(pair.mask_fix, os.path.join(d, "mask_fix.mv01"), dtype="u8")
        write_mv01(pair.moved_gt, os.path.join(d, "moved_gt.mv01"))
        save_params(pair.gt_params, os.path.join(d, "gt_params.json"))
        write_mv01(Volume3D(pair.gt_field.map, pair.gt_field.spacing_mm),
                   os.path.join(d, "gt_field.mv01"))
        index["pairs"].append(name)
    with open(os.path.join(out_dir, "index.json"), "w") as f:
        json.dump(index, f, indent=1)
    return Dataset(str(out_dir), index)


def read_dataset(root) -> Dataset:
    index_path = os.path.join(root, "index.json")
    try:
        with open(index_path) as f:
            meta = json.load(f)
    except FileNotFoundError:
        raise FileNotFoundError(f"dataset index not found: {index_path}") from None
    if "pairs" not in meta:
        raise ValueError(f"{index_path}: malformed dataset index (no 'pairs' key)")
    return Dataset(str(root), meta)


def _binarize_mask(vol: Volume3D) -> Volume3D:
    return Volume3D((vol.data > 0.5).float(), vol.spacing_mm, vol.modality)


def generate_pair(phantom_spec: PhantomSpec, motion_spec: MotionSpec,
                  pair_seed: int, cross_modal: bool = False) -> RegPair:
    """One registration pair; phantom and motion seeds derive from pair_seed."""
    ph = PhantomSpec(**{**phantom_spec.to_dict(), "seed": phantom_spec.seed + pair_seed})
    vols, mask = make_phantom_pair(ph)
    rng = np.random.default_rng(motion_spec.seed + 7919 * (pair_seed + 1))
    params = sample_motion(motion_spec, ph.dims, ph.spacing_mm, rng)

    if cross_modal:
        a, b = rng.choice(ph.n_modalities, size=2, replace=False)
        a, b = int(a), int(b)
    else:
        a = b = int(rng.integers(ph.n_modalities))
    moving = vols[a]
    fixed, gt_field = apply_motion(vols[b], params)
    moved_gt = warp(moving, gt_field)
    mask_fix = _binarize_mask(warp(mask, gt_field))
    return RegPair(moving=moving, fixed=fixed, mask_mov=_binarize_mask(mask),
                   mask_fix=mask_fix, gt_params=params, gt_field=gt_field,
                   moved_gt=moved_gt)


def generate_dataset(phantom_spec: PhantomSpec, motion_spec: MotionSpec, n_pairs: int,
                     out_dir, cross_modal: bool = False) -> Dataset:
    pairs = (generate_pair(phantom_spec, motion_spec, i, cross_modal)
             for i in range(n_pairs))
    meta = {"phantom": phantom_spec.to_dict(), "motion": motion_spec.to_dict(),
            "cross_modal": cross_modal, "n_pairs": n_pairs}
    return write_dataset(out_dir, pairs, meta)
