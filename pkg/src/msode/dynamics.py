"""Per-scale velocity networks for rigid, B-spline, and dense parameterizations.

Each network maps (warped moving image, fixed image, normalized time) to a
parameter velocity. The two volumes are channel-concatenated with one extra
constant channel holding t, so input channels = 2 * image channels + 1.
Strided conv stacks shrink to match the table depth for their scale but are
clamped so spatial dims never collapse below 1 voxel at desk-scale inputs.
Output heads are zero-initialized: integration starts at identity velocity.
"""

from __future__ import annotations

import json
import math
import os

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import ckpt
from .transforms import bspline_grid_dims
from .volume import Volume3D

LEAKY_SLOPE = 0.2


def conv_out_dim(d: int, k: int, s: int, p: int) -> int:
    return (d + 2 * p - k) // s + 1


def max_stride2_depth(dims) -> int:
    """How many k4s2p1 convs fit while keeping every spatial dim >= 2.

    Matches the table geometry at paper scale (six convs leave 2-4 voxels per
    axis at 240x240x160) instead of collapsing small inputs to a single voxel.
    """
    d = min(dims)
    n = 0
    while conv_out_dim(d, 4, 2, 1) >= 2:
        d = conv_out_dim(d, 4, 2, 1)
        n += 1
    return n


def _init_hidden(module):
    if isinstance(module, (nn.Conv3d, nn.Linear)):
        nn.init.kaiming_normal_(module.weight, a=LEAKY_SLOPE, mode="fan_in",
                                nonlinearity="leaky_relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def _zero_head(module):
    nn.init.zeros_(module.weight)
    if module.bias is not None:
        nn.init.zeros_(module.bias)


def _stack_inputs(warped: Volume3D, fixed: Volume3D, t: float) -> torch.Tensor:
    if warped.dims != fixed.dims:
        raise ValueError(f"warped/fixed dims differ: {warped.dims} vs {fixed.dims}")
    tchan = torch.full((1, *warped.dims), float(t), dtype=warped.data.dtype)
    return torch.cat([warped.data, fixed.data, tchan], dim=0).unsqueeze(0)


class ResBlock3d(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, 1, 1)
        self.conv2 = nn.Conv3d(channels, channels, 3, 1, 1)

    def forward(self, x):
        return x + self.conv2(F.leaky_relu(self.conv1(x), LEAKY_SLOPE))


class RigidDynamics(nn.Module):
    """Strided conv stack + two FC layers emitting a 6-vector velocity."""

    TABLE_CHANNELS = [16, 32, 64, 128, 128, 128]

    def __init__(self, dims, in_channels: int = 3, table_depth: int = 6):
        super().__init__()
        self.dims = tuple(dims)
        self.in_channels = in_channels
        depth = min(table_depth, max_stride2_depth(dims))
        if depth < 1:
            raise ValueError(f"input dims {dims} too small for the stride stack")
        self.depth = depth
        chans = self.TABLE_CHANNELS[:depth]
        convs = []
        c_in = in_channels
        spatial = list(self.dims)
        for c_out in chans:
            convs.append(nn.Conv3d(c_in, c_out, 4, 2, 1))
            spatial = [conv_out_dim(d, 4, 2, 1) for d in spatial]
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.final_spatial = tuple(spatial)
        flat = c_in * math.prod(spatial)
        self.fc1 = nn.Linear(flat, 128)
        self.fc2 = nn.Linear(128, 6)
        self.apply(_init_hidden)
        _zero_head(self.fc2)

    def forward(self, warped: Volume3D, fixed: Volume3D, t: float) -> torch.Tensor:
        if warped.dims != self.dims:
            raise ValueError(f"network built for dims {self.dims}, got {warped.dims}")
        x = _stack_inputs(warped, fixed, t)
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LEAKY_SLOPE)
        x = x.flatten(1)
        x = F.relu(self.fc1(x))
        return self.fc2(x).squeeze(0)


class BSplineDynamics(nn.Module):
    """Four strided convs, two resblocks, 1x1x1 output conv; averaged onto the
    control grid of this scale. Control velocities are in mm."""

    def __init__(self, dims, in_channels: int = 3, control_spacing_px: int = 15):
        super().__init__()
        self.dims = tuple(dims)
        self.in_channels = in_channels
        self.control_spacing_px = control_spacing_px
        self.grid_dims = bspline_grid_dims(dims, control_spacing_px)
        if min(dims) < 8:
            raise ValueError(f"input dims {dims} too small for the stride stack (need >= 8)")
        self.conv1 = nn.Conv3d(in_channels, 32, 4, 2, 1)
        self.conv2 = nn.Conv3d(32, 64, 4, 2, 1)
        self.conv3 = nn.Conv3d(64, 128, 4, 2, 1)
        self.conv4 = nn.Conv3d(128, 128, 4, 2, 2)
        self.res1 = ResBlock3d(128)
        self.res2 = ResBlock3d(128)
        self.out = nn.Conv3d(128, 3, 1, 1, 0)
        self.apply(_init_hidden)
        _zero_head(self.out)

    def forward(self, warped: Volume3D, fixed: Volume3D, t: float) -> torch.Tensor:
        if warped.dims != self.dims:
            raise ValueError(f"network built for dims {self.dims}, got {warped.dims}")
        x = _stack_inputs(warped, fixed, t)
        for conv in (self.conv1, self.conv2, self.conv3, self.conv4):
            x = F.leaky_relu(conv(x), LEAKY_SLOPE)
        x = self.res2(self.res1(x))
        x = self.out(x)
        x = F.adaptive_avg_pool3d(x, self.grid_dims)
        return x.squeeze(0)


class DenseDynamics(nn.Module):
    """UNet emitting a per-voxel velocity field [3, D, H, W] (voxel units)."""

    DOWN_CHANNELS = [16, 32, 32, 32]

    def __init__(self, dims, in_channels: int = 3, n_down: int = 4):
        super().__init__()
        self.dims = tuple(dims)
        self.in_channels = in_channels
        n_down = min(n_down, max(1, int(math.log2(max(2, min(dims))))))
        self.n_down = n_down
        self.enc1 = nn.Conv3d(in_channels, 8, 5, 1, 2)
        enc_out = [8] + self.DOWN_CHANNELS[:n_down]
        self.enc_down = nn.ModuleList(
            nn.Conv3d(enc_out[i], enc_out[i + 1], 4, 2, 1) for i in range(n_down))
        self.dec_deep = nn.Conv3d(enc_out[-1], 32, 3, 1, 1)
        # after each upsample, concat the encoder output at that depth and
        # reduce back to its channel count
        decs = []
        c_in = 32
        for k in range(n_down - 1, -1, -1):
            decs.append(nn.Conv3d(c_in + enc_out[k], enc_out[k], 3, 1, 1))
            c_in = enc_out[k]
        self.dec_up = nn.ModuleList(decs)
        self.out = nn.Conv3d(8, 3, 3, 1, 1)
        self.apply(_init_hidden)
        _zero_head(self.out)

    def forward(self, warped: Volume3D, fixed: Volume3D, t: float) -> torch.Tensor:
        if warped.dims != self.dims:
            raise ValueError(f"network built for dims {self.dims}, got {warped.dims}")
        x = _stack_inputs(warped, fixed, t)
        mult = 2 ** self.n_down
        pads = []
        for d in reversed(self.dims):            # F.pad wants (x_lo, x_hi, y_lo, y_hi, z_lo, z_hi)
            pads.extend([0, (-d) % mult])
        if any(pads):
            x = F.pad(x, pads)

        skips = [F.leaky_relu(self.enc1(x), LEAKY_SLOPE)]
        h = skips[0]
        for conv in self.enc_down:
            h = F.leaky_relu(conv(h), LEAKY_SLOPE)
            skips.append(h)
        h = F.leaky_relu(self.dec_deep(h), LEAKY_SLOPE)
        for i, conv in enumerate(self.dec_up):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            skip = skips[self.n_down - 1 - i]
            h = F.leaky_relu(conv(torch.cat([h, skip], dim=1)), LEAKY_SLOPE)
        h = self.out(h)
        h = h[:, :, :self.dims[0], :self.dims[1], :self.dims[2]]
        return h.squeeze(0)


_ARCH_TABLE = {"rigid6": "S1", "bspline": "S2", "dense": "S3"}


def _rigid_table_depth(level: int, n_levels: int) -> int:
    return max(4, 6 - (n_levels - 1 - level))


def _dense_table_down(level: int, n_levels: int) -> int:
    return max(2, 4 - (n_levels - 1 - level))


class DynamicsStack(nn.Module):
    """The L per-scale networks of one registration model, coarsest first."""

    def __init__(self, kind: str, level_dims, in_channels: int = 3,
                 control_spacing_px: int = 15):
        super().__init__()
        if kind not in _ARCH_TABLE:
            raise ValueError(f"kind must be one of {sorted(_ARCH_TABLE)}, got {kind!r}")
        self.kind = kind
        self.level_dims = [tuple(d) for d in level_dims]
        self.in_channels = in_channels
        self.control_spacing_px = control_spacing_px
        n = len(self.level_dims)
        nets = []
        for level, dims in enumerate(self.level_dims):
            if kind == "rigid6":
                nets.append(RigidDynamics(dims, in_channels, _rigid_table_depth(level, n)))
            elif kind == "bspline":
                nets.append(BSplineDynamics(dims, in_channels, control_spacing_px))
            else:
                nets.append(DenseDynamics(dims, in_channels, _dense_table_down(level, n)))
        self.nets = nn.ModuleList(nets)

    def __len__(self):
        return len(self.nets)

    def __getitem__(self, i):
        return self.nets[i]

    def __iter__(self):
        return iter(self.nets)

    def save(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        meta = {
            "kind": self.kind,
            "level_dims": [list(d) for d in self.level_dims],
            "in_channels": self.in_channels,
            "control_spacing_px": self.control_spacing_px,
            "files": [],
        }
        for level, net in enumerate(self.nets):
            fname = f"dynamics_s{level}.mc01"
            manifest = {
                "kind": self.kind,
                "scale": level,
                "arch_table": _ARCH_TABLE[self.kind],
                "in_channels": self.in_channels,
                "level_dims": list(self.level_dims[level]),
                "control_spacing_px": self.control_spacing_px,
            }
            ckpt.save_weights(os.path.join(out_dir, fname), net.state_dict(), manifest)
            meta["files"].append(fname)
        with open(os.path.join(out_dir, "dynamics.json"), "w") as f:
            json.dump(meta, f, indent=1)

    @classmethod
    def load(cls, out_dir) -> "DynamicsStack":
        meta_path = os.path.join(out_dir, "dynamics.json")
        try:
            with open(meta_path) as f:
                meta = json.load(f)
        except FileNotFoundError:
            raise FileNotFoundError(f"dynamics checkpoint not found: {meta_path}") from None
        stack = cls(meta["kind"], meta["level_dims"], meta["in_channels"],
                    meta["control_spacing_px"])
        for level, fname in enumerate(meta["files"]):
            manifest, tensors = ckpt.load_weights(os.path.join(out_dir, fname))
            if manifest.get("scale") != level:
                raise ValueError(f"{fname}: scale {manifest.get('scale')} out of order")
            stack.nets[level].load_state_dict(tensors)
        return stack
