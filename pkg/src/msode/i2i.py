"""Multi-slice image-to-image translation GAN and the content similarity encoder.

Volumes are sliced into stacks of adjacent 2D slices (channel dimension) along
the three orthogonal axes. A content encoder maps stacks to a shared feature
space, a style encoder to an 8-dim modality-specific code, and a generator
reconstructs stacks from (content, style, modality). Adversarial training uses
a Wasserstein critic with gradient penalty, a modality classification head, and
a content discriminator pushing content features to be modality-independent.

Only the content encoder is consumed by registration; everything else exists
to train it.
"""

from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import ckpt
from .dynamics import conv_out_dim
from .volume import NumericsError, Volume3D

N_SLICES_DEFAULT = 5
AXES = ("axial", "coronal", "sagittal")    # slice along z, y, x respectively
LEAKY_SLOPE = 0.2

ContentFeature = torch.Tensor              # [256, H/4, W/4]
StyleCode = torch.Tensor                   # [8]


@dataclass
class SliceStack:
    """n adjacent slices of one volume, stacked as channels."""

    data: torch.Tensor                     # [n_slices, Hs, Ws]
    axis: str
    modality: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"slice stack must be [n, H, W], got {tuple(self.data.shape)}")
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}, got {self.axis!r}")


@dataclass
class GanLossWeights:
    rec_x: float = 10.0
    rec_c: float = 1.0
    rec_s: float = 1.0
    cyc: float = 10.0
    adv_cls: float = 1.0
    adv_c: float = 1.0
    gp: float = 10.0

    def __post_init__(self):
        for name in ("rec_x", "rec_c", "rec_s", "cyc", "adv_cls", "adv_c", "gp"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


def sample_multislice(vol: Volume3D, axis: str, center_index: int,
                      n: int = N_SLICES_DEFAULT) -> SliceStack:
    """n adjacent slices around center_index along the given axis."""
    if vol.n_channels != 1:
        raise ValueError("multi-slice sampling expects single-channel volumes")
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    half = (n - 1) // 2
    if n % 2 == 0:
        raise ValueError(f"n must be odd, got {n}")
    dim = vol.dims[AXES.index(axis)]
    if not (half <= center_index <= dim - 1 - half):
        raise ValueError(f"center {center_index} +- {half} out of range for axis "
                         f"{axis} of size {dim}")
    data = vol.data[0]
    sl = slice(center_index - half, center_index + half + 1)
    if axis == "axial":
        stack = data[sl, :, :]
    elif axis == "coronal":
        stack = data[:, sl, :].permute(1, 0, 2)
    else:
        stack = data[:, :, sl].permute(2, 0, 1)
    return SliceStack(stack.contiguous(), axis, vol.modality)


def _one_hot_maps(modality: int, m_total: int, hw, dtype) -> torch.Tensor:
    if not (0 <= modality < m_total):
        raise ValueError(f"modality {modality} outside [0, {m_total})")
    maps = torch.zeros(m_total, *hw, dtype=dtype)
    maps[modality] = 1.0
    return maps


def _as_batch(x) -> torch.Tensor:
    if isinstance(x, SliceStack):
        x = x.data
    return x.unsqueeze(0) if x.ndim == 3 else x


def adain(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
          eps: float = 1e-5) -> torch.Tensor:
    """Re-style x to per-channel std |gamma| and mean beta.

    x is [C, H, W] or [B, C, H, W]; gamma/beta broadcast over the channel axis.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = x.unsqueeze(0)
    mu = x.mean(dim=(2, 3), keepdim=True)
    sigma = torch.sqrt(x.var(dim=(2, 3), unbiased=False, keepdim=True) + eps)
    g = gamma.reshape(-1, x.shape[1], 1, 1) if gamma.ndim <= 2 else gamma
    b = beta.reshape(-1, x.shape[1], 1, 1) if beta.ndim <= 2 else beta
    out = g * (x - mu) / sigma + b
    return out.squeeze(0) if squeeze else out


class ResBlock2d(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)

    def forward(self, x):
        return x + self.conv2(F.leaky_relu(self.conv1(x), LEAKY_SLOPE))


class ContentEncoder(nn.Module):
    """Fully convolutional; output is 256 channels at 1/4 spatial resolution.

    No modality input: content must be usable across contrasts.
    """

    def __init__(self, n_slices: int = N_SLICES_DEFAULT):
        super().__init__()
        self.n_slices = n_slices
        self.conv1 = nn.Conv2d(n_slices, 64, 7, 1, 3)
        self.conv2 = nn.Conv2d(64, 128, 4, 2, 1)
        self.conv3 = nn.Conv2d(128, 256, 4, 2, 1)
        self.blocks = nn.ModuleList(ResBlock2d(256) for _ in range(4))

    def forward(self, x) -> torch.Tensor:
        x = _as_batch(x)
        if x.shape[1] != self.n_slices:
            raise ValueError(f"expected {self.n_slices} slice channels, got {x.shape[1]}")
        pad_h = (-x.shape[2]) % 4
        pad_w = (-x.shape[3]) % 4
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h))
        x = F.leaky_relu(self.conv1(x), LEAKY_SLOPE)
        x = F.leaky_relu(self.conv2(x), LEAKY_SLOPE)
        x = F.leaky_relu(self.conv3(x), LEAKY_SLOPE)
        for block in self.blocks:
            x = block(x)
        return x.squeeze(0)


class StyleEncoder(nn.Module):
    """Five convs, global average pooling, FC to an 8-dim style code."""

    STYLE_DIM = 8

    def __init__(self, n_slices: int = N_SLICES_DEFAULT, m_modalities: int = 4):
        super().__init__()
        self.n_slices = n_slices
        self.m_modalities = m_modalities
        c_in = n_slices + m_modalities
        self.conv1 = nn.Conv2d(c_in, 64, 7, 1, 3)
        self.conv2 = nn.Conv2d(64, 128, 4, 2, 1)
        self.conv3 = nn.Conv2d(128, 256, 4, 2, 1)
        self.conv4 = nn.Conv2d(256, 256, 4, 2, 1)
        self.conv5 = nn.Conv2d(256, 256, 4, 2, 1)
        self.fc = nn.Linear(256, self.STYLE_DIM)

    def forward(self, x, modality: int) -> torch.Tensor:
        x = _as_batch(x)
        squeeze = x.shape[0] == 1
        onehot = _one_hot_maps(modality, self.m_modalities, x.shape[2:], x.dtype)
        x = torch.cat([x, onehot.unsqueeze(0).expand(x.shape[0], -1, -1, -1)], dim=1)
        for conv in (self.conv1, self.conv2, self.conv3, self.conv4, self.conv5):
            x = F.leaky_relu(conv(x), LEAKY_SLOPE)
        x = x.mean(dim=(2, 3))
        x = self.fc(x)
        return x.squeeze(0) if squeeze else x


class AdaInResBlock(nn.Module):
    """Residual block whose two convs are followed by AdaIN driven by a style MLP."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.channels = channels

    @property
    def n_style_params(self) -> int:
        return 4 * self.channels               # gamma/beta for each of the two convs

    def forward(self, x, style_params):
        c = self.channels
        g1, b1, g2, b2 = style_params.split([c, c, c, c], dim=-1)
        h = adain(self.conv1(x), g1, b1)
        h = F.leaky_relu(h, LEAKY_SLOPE)
        h = adain(self.conv2(h), g2, b2)
        return x + h


class Generator(nn.Module):
    """Four AdaIN resblocks on (content + one-hot modality), two 2x upsamplings,
    and a final conv back to n_slices channels (tanh output)."""

    def __init__(self, n_slices: int = N_SLICES_DEFAULT, m_modalities: int = 4):
        super().__init__()
        self.n_slices = n_slices
        self.m_modalities = m_modalities
        c = 256 + m_modalities
        self.blocks = nn.ModuleList(AdaInResBlock(c) for _ in range(4))
        c2 = c // 2
        c4 = c2 // 2
        self.conv1 = nn.Conv2d(c, c2, 5, 1, 2)
        self.conv2 = nn.Conv2d(c2, c4, 5, 1, 2)
        self.conv3 = nn.Conv2d(c4, n_slices, 7, 1, 3)
        n_style = sum(b.n_style_params for b in self.blocks)
        self.mlp = nn.Sequential(nn.Linear(StyleEncoder.STYLE_DIM, 256), nn.ReLU(),
                                 nn.Linear(256, 256), nn.ReLU(),
                                 nn.Linear(256, n_style))

    def forward(self, content, style, modality: int) -> torch.Tensor:
        x = content.unsqueeze(0) if content.ndim == 3 else content
        squeeze = style.ndim == 1
        s = style.unsqueeze(0) if style.ndim == 1 else style
        params = self.mlp(s)
        onehot = _one_hot_maps(modality, self.m_modalities, x.shape[2:], x.dtype)
        x = torch.cat([x, onehot.unsqueeze(0).expand(x.shape[0], -1, -1, -1)], dim=1)
        offset = 0
        for block in self.blocks:
            n = block.n_style_params
            x = block(x, params[:, offset:offset + n])
            offset += n
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = F.leaky_relu(self.conv1(x), LEAKY_SLOPE)
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = F.leaky_relu(self.conv2(x), LEAKY_SLOPE)
        x = torch.tanh(self.conv3(x))
        return x.squeeze(0) if squeeze else x


class Discriminator(nn.Module):
    """Strided conv trunk with a 1x1 source head and an FC modality head.

    Built for fixed slice dims; the conv depth shrinks if the input is too
    small for the table's six stride-2 layers.
    """

    TABLE_CHANNELS = [64, 128, 256, 512, 1024, 2048]

    def __init__(self, slice_dims, n_slices: int = N_SLICES_DEFAULT, m_modalities: int = 4):
        super().__init__()
        self.slice_dims = tuple(slice_dims)
        self.n_slices = n_slices
        self.m_modalities = m_modalities
        depth = 0
        h, w = self.slice_dims
        while depth < 6 and min(conv_out_dim(h, 4, 2, 1), conv_out_dim(w, 4, 2, 1)) >= 2:
            h, w = conv_out_dim(h, 4, 2, 1), conv_out_dim(w, 4, 2, 1)
            depth += 1
        if depth < 1:
            raise ValueError(f"slice dims {slice_dims} too small for the critic")
        chans = self.TABLE_CHANNELS[:depth]
        convs = []
        c_in = n_slices
        for c_out in chans:
            convs.append(nn.Conv2d(c_in, c_out, 4, 2, 1))
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.final_hw = (h, w)
        self.src_head = nn.Conv2d(c_in, 1, 1, 1, 0)
        self.cls_head = nn.Linear(c_in * h * w, m_modalities)

    def forward(self, x):
        x = _as_batch(x)
        if tuple(x.shape[2:]) != self.slice_dims:
            raise ValueError(f"critic built for dims {self.slice_dims}, got {tuple(x.shape[2:])}")
        squeeze = x.shape[0] == 1
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LEAKY_SLOPE)
        src = self.src_head(x)
        cls = self.cls_head(x.flatten(1))
        if squeeze:
            return src.squeeze(0), cls.squeeze(0)
        return src, cls


class ContentDiscriminator(nn.Module):
    """Conv stack + FC classifying which modality a content feature came from."""

    def __init__(self, content_dims, m_modalities: int = 4):
        super().__init__()
        self.content_dims = tuple(content_dims)
        self.m_modalities = m_modalities
        depth = 0
        h, w = self.content_dims
        while depth < 4 and min(conv_out_dim(h, 4, 2, 1), conv_out_dim(w, 4, 2, 1)) >= 2:
            h, w = conv_out_dim(h, 4, 2, 1), conv_out_dim(w, 4, 2, 1)
            depth += 1
        if depth < 1:
            raise ValueError(f"content dims {content_dims} too small")
        self.convs = nn.ModuleList(nn.Conv2d(256, 256, 4, 2, 1) for _ in range(depth))
        self.fc = nn.Linear(256 * h * w, m_modalities)

    def forward(self, c):
        x = c.unsqueeze(0) if c.ndim == 3 else c
        if tuple(x.shape[2:]) != self.content_dims:
            raise ValueError(f"content critic built for dims {self.content_dims}, "
                             f"got {tuple(x.shape[2:])}")
        squeeze = c.ndim == 3
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LEAKY_SLOPE)
        out = self.fc(x.flatten(1))
        return out.squeeze(0) if squeeze else out


class I2IModels:
    """The five trainable components plus the geometry they were built for."""

    def __init__(self, slice_dims, n_slices: int = N_SLICES_DEFAULT, m_modalities: int = 4):
        if slice_dims[0] % 4 or slice_dims[1] % 4:
            raise ValueError(f"slice dims {slice_dims} must be divisible by 4")
        self.slice_dims = tuple(slice_dims)
        self.n_slices = n_slices
        self.m_modalities = m_modalities
        self.content_enc = ContentEncoder(n_slices)
        self.style_enc = StyleEncoder(n_slices, m_modalities)
        self.gen = Generator(n_slices, m_modalities)
        self.disc = Discriminator(slice_dims, n_slices, m_modalities)
        content_dims = (slice_dims[0] // 4, slice_dims[1] // 4)
        self.content_disc = ContentDiscriminator(content_dims, m_modalities)

    _ROLES = ("Ec", "Es", "G", "D", "Dc")

    def _nets(self):
        return {"Ec": self.content_enc, "Es": self.style_enc, "G": self.gen,
                "D": self.disc, "Dc": self.content_disc}

    def gen_params(self):
        return (list(self.content_enc.parameters()) + list(self.style_enc.parameters())
                + list(self.gen.parameters()))

    def disc_params(self):
        return list(self.disc.parameters()) + list(self.content_disc.parameters())

    def save(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        meta = {"slice_dims": list(self.slice_dims), "n_slices": self.n_slices,
                "M": self.m_modalities, "files": {}}
        for role, net in self._nets().items():
            fname = f"i2i_{role}.mc01"
            manifest = {"role": role, "M": self.m_modalities, "n_slices": self.n_slices,
                        "slice_dims": list(self.slice_dims)}
            ckpt.save_weights(os.path.join(out_dir, fname), net.state_dict(), manifest)
            meta["files"][role] = fname
        with open(os.path.join(out_dir, "i2i.json"), "w") as f:
            json.dump(meta, f, indent=1)

    @classmethod
    def load(cls, out_dir) -> "I2IModels":
        meta_path = os.path.join(out_dir, "i2i.json")
        try:
            with open(meta_path) as f:
                meta = json.load(f)
        except FileNotFoundError:
            raise FileNotFoundError(f"i2i checkpoint not found: {meta_path}") from None
        models = cls(tuple(meta["slice_dims"]), meta["n_slices"], meta["M"])
        for role, net in models._nets().items():
            _, tensors = ckpt.load_weights(os.path.join(out_dir, meta["files"][role]))
            net.load_state_dict(tensors)
        return models

    def state_clone(self):
        return {role: copy.deepcopy(net.state_dict()) for role, net in self._nets().items()}

    def load_state_clone(self, state):
        for role, net in self._nets().items():
            net.load_state_dict(state[role])


# ---------------------------------------------------------------------------
# Translation protocol and losses

def translation_round_trip(models: I2IModels, x_a, x_b, a: int, b: int) -> dict:
    """The four translation steps plus mono-modal reconstructions.

    x_a/x_b are SliceStacks or [B, n, H, W] tensors of modality a/b.
    """
    xa = _as_batch(x_a)
    xb = _as_batch(x_b)
    ec, es, g = models.content_enc, models.style_enc, models.gen

    s_a, c_a = es(xa, a), ec(xa)
    s_b, c_b = es(xb, b), ec(xb)
    c_a, c_b = _as_batch(c_a), _as_batch(c_b)
    s_a = s_a.unsqueeze(0) if s_a.ndim == 1 else s_a
    s_b = s_b.unsqueeze(0) if s_b.ndim == 1 else s_b

    x_ab = g(c_a, s_b, b)                     # content of a, style of b
    x_ba = g(c_b, s_a, a)
    s_a_hat, c_a_hat = es(x_ba, a), ec(x_ab)
    s_b_hat, c_b_hat = es(x_ab, b), ec(x_ba)
    x_aba = g(_as_batch(c_a_hat), s_a_hat, a)
    x_bab = g(_as_batch(c_b_hat), s_b_hat, b)
    x_a_rec = g(c_a, s_a, a)
    x_b_rec = g(c_b, s_b, b)
    return {
        "a": a, "b": b, "x_a": xa, "x_b": xb,
        "s_a": s_a, "c_a": c_a, "s_b": s_b, "c_b": c_b,
        "x_ab": _as_batch(x_ab), "x_ba": _as_batch(x_ba),
        "s_a_hat": s_a_hat, "c_a_hat": _as_batch(c_a_hat),
        "s_b_hat": s_b_hat, "c_b_hat": _as_batch(c_b_hat),
        "x_aba": _as_batch(x_aba), "x_bab": _as_batch(x_bab),
        "x_a_rec": _as_batch(x_a_rec), "x_b_rec": _as_batch(x_b_rec),
    }


def classification_loss(logits: torch.Tensor, target: int) -> torch.Tensor:
    """Cross entropy of one modality label; ln(M) for uniform logits."""
    logits = logits.unsqueeze(0) if logits.ndim == 1 else logits
    labels = torch.full((logits.shape[0],), target, dtype=torch.long)
    return F.cross_entropy(logits, labels)


def gradient_penalty(d_src_fn, real: torch.Tensor, fake: torch.Tensor,
                     rng: np.random.Generator | None = None) -> torch.Tensor:
    """WGAN-GP: (||grad D_src|| - 1)^2 on random real/fake interpolates."""
    real = _as_batch(real)
    fake = _as_batch(fake)
    if rng is None:
        eps = torch.rand(real.shape[0], 1, 1, 1, dtype=real.dtype)
    else:
        eps = torch.from_numpy(rng.uniform(size=(real.shape[0], 1, 1, 1))).to(real.dtype)
    interp = (eps * real + (1 - eps) * fake.detach()).requires_grad_(True)
    src = d_src_fn(interp)
    grad = torch.autograd.grad(src.sum(), interp, create_graph=torch.is_grad_enabled())[0]
    norms = grad.flatten(1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def gan_losses(bundle: dict, d, d_content, weights: GanLossWeights,
               rng: np.random.Generator | None = None, compute_gp: bool = True) -> dict:
    """All translation losses and the generator/discriminator totals.

    d(x) -> (src_map, cls_logits); d_content(c) -> cls_logits. Terms average
    the a->b and b->a directions. The totals follow the Wasserstein convention:
    the critic minimizes L_D_total, the generator/encoders minimize L_G_total
    (note the opposite signs on L_adv and the sign flip on L_adv_c).
    compute_gp=False skips the gradient penalty (generator updates do not
    need it) and reports it as 0.
    """
    a, b = bundle["a"], bundle["b"]
    src_ab, cls_ab = d(bundle["x_ab"])
    src_ba, cls_ba = d(bundle["x_ba"])
    src_a, cls_a = d(bundle["x_a"])
    src_b, cls_b = d(bundle["x_b"])

    l_adv = 0.5 * ((src_ab.mean() - src_b.mean()) + (src_ba.mean() - src_a.mean()))
    l_adv_cls = 0.25 * (classification_loss(cls_a, a) + classification_loss(cls_ab, b)
                        + classification_loss(cls_b, b) + classification_loss(cls_ba, a))
    l_adv_c = 0.5 * (classification_loss(d_content(bundle["c_a"]), a)
                     + classification_loss(d_content(bundle["c_b"]), b))

    l1 = lambda u, v: (u - v).abs().mean()
    l_rec_x = 0.5 * (l1(bundle["x_a_rec"], bundle["x_a"]) + l1(bundle["x_b_rec"], bundle["x_b"]))
    l_rec_c = 0.5 * (l1(bundle["c_a_hat"], bundle["c_a"]) + l1(bundle["c_b_hat"], bundle["c_b"]))
    l_rec_s = 0.5 * (l1(bundle["s_a_hat"], bundle["s_a"]) + l1(bundle["s_b_hat"], bundle["s_b"]))
    l_cyc = 0.5 * (l1(bundle["x_aba"], bundle["x_a"]) + l1(bundle["x_bab"], bundle["x_b"]))

    if compute_gp:
        d_src_only = lambda x: d(x)[0]
        l_gp = 0.5 * (gradient_penalty(d_src_only, bundle["x_b"], bundle["x_ab"], rng)
                      + gradient_penalty(d_src_only, bundle["x_a"], bundle["x_ba"], rng))
    else:
        l_gp = torch.zeros(())

    w = weights
    l_g_total = (-l_adv + w.rec_x * l_rec_x + w.rec_c * l_rec_c + w.rec_s * l_rec_s
                 + w.cyc * l_cyc + w.adv_cls * l_adv_cls - w.adv_c * l_adv_c)
    l_d_total = l_adv + w.adv_cls * l_adv_cls + w.gp * l_gp + l_adv_c

    out = {"L_adv": l_adv, "L_adv_cls": l_adv_cls, "L_adv_c": l_adv_c,
           "L_rec_x": l_rec_x, "L_rec_c": l_rec_c, "L_rec_s": l_rec_s,
           "L_cyc": l_cyc, "L_gp": l_gp, "L_G_total": l_g_total, "L_D_total": l_d_total}
    for name, value in out.items():
        if not bool(torch.isfinite(value.detach()).all()):
            raise NumericsError(f"{name} is non-finite")
    return out


# ---------------------------------------------------------------------------
# 3D content features from 2D slices

def valid_center_range(dim: int, n_slices: int) -> tuple[int, int]:
    half = (n_slices - 1) // 2
    if dim < n_slices:
        raise ValueError(f"axis of size {dim} cannot fit {n_slices} slices")
    return (half, dim - 1 - half)


def sample_slice_indices(dims, n: int, n_slices: int,
                         rng: np.random.Generator) -> list[tuple[str, int]]:
    """n (axis, center) pairs: axes round-robin, centers uniform over valid range."""
    if n < 1:
        raise ValueError(f"need n >= 1 slices, got {n}")
    out = []
    for i in range(n):
        axis = AXES[i % 3]
        lo, hi = valid_center_range(dims[AXES.index(axis)], n_slices)
        out.append((axis, int(rng.integers(lo, hi + 1))))
    return out


def content_feature_3d(encode_fn, vol: Volume3D, n: int, rng: np.random.Generator,
                       n_slices: int = N_SLICES_DEFAULT):
    """Encode n randomly placed slice stacks; returns (features, indices).

    The index list lets a paired volume be encoded at identical locations.
    """
    indices = sample_slice_indices(vol.dims, n, n_slices, rng)
    feats = content_feature_3d_at(encode_fn, vol, indices, n_slices)
    return feats, indices


def content_feature_3d_at(encode_fn, vol: Volume3D, indices, n_slices: int = N_SLICES_DEFAULT):
    return [encode_fn(sample_multislice(vol, axis, center, n_slices).data)
            for axis, center in indices]


# ---------------------------------------------------------------------------
# Training

@dataclass
class I2ITrainConfig:
    iters: int = 200
    lr: float = 1e-4
    n_critic: int = 5
    batch: int = 4
    n_slices: int = N_SLICES_DEFAULT
    seed: int = 0
    weights: GanLossWeights = field(default_factory=GanLossWeights)
    out_dir: str | None = None
    checkpoint_every: int = 100
    log_every: int = 10

    @classmethod
    def from_dict(cls, doc: dict) -> "I2ITrainConfig":
        weights = GanLossWeights(**{k[len("lambda_"):]: v for k, v in doc.items()
                                    if k.startswith("lambda_")})
        known = {k: v for k, v in doc.items() if k in
                 ("iters", "lr", "n_critic", "batch", "n_slices", "seed", "out_dir",
                  "checkpoint_every", "log_every")}
        return cls(weights=weights, **known)


def _group_by_modality(volumes):
    groups: dict[int, list[Volume3D]] = {}
    for v in volumes:
        groups.setdefault(v.modality, []).append(v)
    return groups


def _sample_stack_batch(groups, modality, axis, batch, n_slices, rng):
    vols = groups[modality]
    stacks = []
    for _ in range(batch):
        vol = vols[int(rng.integers(len(vols)))]
        lo, hi = valid_center_range(vol.dims[AXES.index(axis)], n_slices)
        center = int(rng.integers(lo, hi + 1))
        stacks.append(sample_multislice(vol, axis, center, n_slices).data)
    return torch.stack(stacks, dim=0)


def train_i2i(volumes, config: I2ITrainConfig):
    """Adversarial training of the translation networks on multi-modal volumes.

    Returns (models, history) where history maps loss names to per-iteration
    values. Aborts with the last good checkpoint if a loss goes non-finite.
    """
    groups = _group_by_modality(volumes)
    if len(groups) < 2:
        raise ValueError(f"training needs >= 2 modalities, got {sorted(groups)}")
    m_total = max(groups) + 1
    dims = volumes[0].dims
    for v in volumes:
        if v.dims != dims:
            raise ValueError("all training volumes must share dims")

    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    # a stack cut along one axis keeps the other two axes' sizes
    slice_dims = (dims[1], dims[2])
    if dims[0] != dims[1] or dims[1] != dims[2]:
        axes_ok = all((dims[(i + 1) % 3], dims[(i + 2) % 3]) == slice_dims for i in range(3))
        if not axes_ok:
            raise ValueError("non-cubic volumes mix slice dims; use cubic training volumes")
    models = I2IModels(slice_dims, config.n_slices, m_total)

    opt_g = torch.optim.Adam(models.gen_params(), lr=config.lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(models.disc_params(), lr=config.lr, betas=(0.5, 0.999))

    history: dict[str, list[float]] = {}
    last_good = models.state_clone()
    modalities = sorted(groups)

    def sample_pair_batch():
        a, b = rng.choice(modalities, size=2, replace=False)
        axis = AXES[int(rng.integers(3))]
        xa = _sample_stack_batch(groups, int(a), axis, config.batch, config.n_slices, rng)
        xb = _sample_stack_batch(groups, int(b), axis, config.batch, config.n_slices, rng)
        return int(a), int(b), xa, xb

    for it in range(config.iters):
        try:
            for _ in range(config.n_critic):
                a, b, xa, xb = sample_pair_batch()
                with torch.no_grad():
                    bundle = translation_round_trip(models, xa, xb, a, b)
                bundle["x_a"] = xa
                bundle["x_b"] = xb
                losses = gan_losses(bundle, models.disc, models.content_disc,
                                    config.weights, rng)
                opt_d.zero_grad()
                losses["L_D_total"].backward()
                opt_d.step()

            a, b, xa, xb = sample_pair_batch()
            bundle = translation_round_trip(models, xa, xb, a, b)
            losses = gan_losses(bundle, models.disc, models.content_disc,
                                config.weights, rng, compute_gp=False)
            opt_g.zero_grad()
            opt_d.zero_grad()
            losses["L_G_total"].backward()
            opt_g.step()
        except NumericsError:
            models.load_state_clone(last_good)
            if config.out_dir:
                models.save(config.out_dir)
            raise NumericsError(f"i2i training diverged at iteration {it}; "
                                "restored last good checkpoint") from None

        for name, value in losses.items():
            history.setdefault(name, []).append(float(value.detach()))
        if (it + 1) % config.checkpoint_every == 0 or it == config.iters - 1:
            last_good = models.state_clone()
            if config.out_dir:
                models.save(config.out_dir)
    if config.out_dir:
        models.save(config.out_dir)
        with open(os.path.join(config.out_dir, "i2i_history.json"), "w") as f:
            json.dump(history, f)
    return models, history
