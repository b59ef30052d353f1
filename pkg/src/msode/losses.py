"""Registration training objective and the mutual-information baseline metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .i2i import N_SLICES_DEFAULT, content_feature_3d_at, sample_slice_indices
from .transforms import TransformParams, flatten_params, params_tag
from .volume import DeformationField, Volume3D, spatial_gradient

DEFAULT_SIMILARITY_SLICES = 9     # 3 per axis; the per-volume slice count is a config knob


@dataclass
class RegLossWeights:
    lambda_self: float = 1.0
    lambda_reg: float = 0.0

    def __post_init__(self):
        if self.lambda_self < 0 or self.lambda_reg < 0:
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def defaults_for(cls, kind: str) -> "RegLossWeights":
        """lambda_self = 1 everywhere; lambda_reg = 10 dense, 2 B-spline, 0 rigid."""
        reg = {"rigid6": 0.0, "bspline": 2.0, "dense": 10.0}.get(kind)
        if reg is None:
            raise ValueError(f"unknown kind {kind!r}")
        return cls(lambda_self=1.0, lambda_reg=reg)


def similarity_loss(encode_fn, moved: Volume3D, fixed: Volume3D,
                    n: int = DEFAULT_SIMILARITY_SLICES,
                    rng: np.random.Generator | None = None,
                    n_slices: int = N_SLICES_DEFAULT,
                    indices=None) -> torch.Tensor:
    """Mean squared content-feature distance over n paired slice stacks.

    Both volumes are encoded at identical slice locations; each stack
    contributes the squared L2 distance normalized by feature element count.
    """
    if moved.dims != fixed.dims:
        raise ValueError(f"volume dims differ: {moved.dims} vs {fixed.dims}")
    if indices is None:
        if rng is None:
            rng = np.random.default_rng(0)
        indices = sample_slice_indices(moved.dims, n, n_slices, rng)
    f_moved = content_feature_3d_at(encode_fn, moved, indices, n_slices)
    f_fixed = content_feature_3d_at(encode_fn, fixed, indices, n_slices)
    terms = [((fm - ff) ** 2).mean() for fm, ff in zip(f_moved, f_fixed)]
    return torch.stack(terms).mean()


def l2_image_loss(moved: Volume3D, fixed: Volume3D) -> torch.Tensor:
    """Plain mono-modal mean squared intensity difference."""
    if moved.dims != fixed.dims:
        raise ValueError(f"volume dims differ: {moved.dims} vs {fixed.dims}")
    return ((moved.data - fixed.data) ** 2).mean()


def self_supervision_loss(theta_tilde: TransformParams, theta_t: TransformParams) -> torch.Tensor:
    """Mean squared difference of flattened parameters; tags must match."""
    if params_tag(theta_tilde) != params_tag(theta_t):
        raise ValueError(f"parameter tags differ: {params_tag(theta_tilde)} vs {params_tag(theta_t)}")
    a = flatten_params(theta_tilde)
    b = flatten_params(theta_t)
    if a.numel() != b.numel():
        raise ValueError(f"parameter sizes differ: {a.numel()} vs {b.numel()}")
    return ((a - b) ** 2).mean()


def smoothness_loss(field: DeformationField) -> torch.Tensor:
    """Mean of squared spatial-gradient entries of the displacement."""
    return (spatial_gradient(field) ** 2).mean()


def total_registration_loss(sim, self_sup, reg, weights: RegLossWeights) -> torch.Tensor:
    as_t = lambda v: v if isinstance(v, torch.Tensor) else torch.tensor(float(v))
    return as_t(sim) + weights.lambda_self * as_t(self_sup) + weights.lambda_reg * as_t(reg)


# ---------------------------------------------------------------------------
# Mutual information (baseline metric)

def _normalize01(x: torch.Tensor):
    lo, hi = float(x.detach().min()), float(x.detach().max())
    if hi <= lo:
        return None
    return (x - lo) / (hi - lo)


def mutual_information(x: Volume3D, y: Volume3D, bins: int = 32,
                       parzen: bool = False) -> torch.Tensor:
    """Histogram MI in nats, intensities min-max normalized to [0, 1].

    Constant (degenerate) images give 0 by convention. parzen=True replaces the
    hard histogram with Gaussian soft-binning (bandwidth 1/bins), which is
    differentiable and usable as a training loss.
    """
    if x.dims != y.dims:
        raise ValueError(f"volume dims differ: {x.dims} vs {y.dims}")
    if bins < 2:
        raise ValueError(f"need bins >= 2, got {bins}")
    xv = _normalize01(x.data.reshape(-1))
    yv = _normalize01(y.data.reshape(-1))
    if xv is None or yv is None:
        return torch.zeros(())

    if parzen:
        centers = (torch.arange(bins, dtype=xv.dtype) + 0.5) / bins
        sigma = 1.0 / bins
        wx = torch.exp(-0.5 * ((xv.unsqueeze(1) - centers) / sigma) ** 2)
        wy = torch.exp(-0.5 * ((yv.unsqueeze(1) - centers) / sigma) ** 2)
        wx = wx / wx.sum(dim=1, keepdim=True)
        wy = wy / wy.sum(dim=1, keepdim=True)
        joint = wx.t() @ wy / xv.numel()
    else:
        xi = (xv.detach() * bins).long().clamp(max=bins - 1)
        yi = (yv.detach() * bins).long().clamp(max=bins - 1)
        joint = torch.zeros(bins, bins, dtype=torch.float64)
        joint.index_put_((xi, yi), torch.ones(xv.numel(), dtype=torch.float64),
                         accumulate=True)
        joint = joint / xv.numel()

    px = joint.sum(dim=1, keepdim=True)
    py = joint.sum(dim=0, keepdim=True)
    eps = 1e-12
    ratio = joint / (px * py + eps)
    mi = (joint * torch.log(ratio + eps)).sum()
    return mi
