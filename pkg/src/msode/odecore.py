"""ODE solvers, solver schedules, and the multi-scale integration driver.

The registration state theta follows d(theta)/dt = f(warp(moving, field(theta)),
fixed, t) integrated over [0, T] split into one segment per pyramid level,
coarsest first. Solvers operate on flat tensors; dynamics are any callables
(theta_params...) -> velocity tensor. Gradients are exact for the discrete
solver: each accepted step's network evaluation is checkpointed (inputs kept,
activations recomputed in backward).
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field

import torch
import torch.utils.checkpoint as _ckpt

from . import transforms as tf
from .volume import NumericsError, Volume3D, trilinear_sample, warp

_TINY_REL = 1e-12


@dataclass
class SolverSpec:
    kind: str                 # "fixed" | "adaptive"
    dt: float | None = None   # fixed step size
    tol: float | None = None  # adaptive error tolerance

    def __post_init__(self):
        if self.kind not in ("fixed", "adaptive"):
            raise ValueError(f"solver kind must be 'fixed' or 'adaptive', got {self.kind!r}")
        if self.kind == "fixed":
            if self.dt is None or self.tol is not None:
                raise ValueError("fixed solver takes dt only")
            if self.dt <= 0:
                raise ValueError(f"dt must be positive, got {self.dt}")
        else:
            if self.tol is None or self.dt is not None:
                raise ValueError("adaptive solver takes tol only")
            if self.tol <= 0:
                raise ValueError(f"tol must be positive, got {self.tol}")

    def __str__(self):
        return f"F({self.dt:g})" if self.kind == "fixed" else f"A({self.tol:g})"


@dataclass
class SolverSchedule:
    """One solver per scale, coarsest first; segments tile [0, T] evenly."""

    per_scale: list[SolverSpec]
    T: float

    def __post_init__(self):
        if not self.per_scale:
            raise ValueError("schedule needs at least one solver spec")
        if self.T <= 0:
            raise ValueError(f"T must be positive, got {self.T}")
        self.T = float(self.T)

    @property
    def L(self) -> int:
        return len(self.per_scale)

    def segment(self, level: int) -> tuple[float, float]:
        seg = self.T / self.L
        return (level * seg, (level + 1) * seg if level < self.L - 1 else self.T)

    def __str__(self):
        return "-".join(str(s) for s in self.per_scale)


_SPEC_RE = re.compile(r"([FA])\(([^()]+)\)")
_SCHEDULE_RE = re.compile(r"[FA]\([^()]+\)(-[FA]\([^()]+\))*")


def parse_schedule(s: str, T: float) -> SolverSchedule:
    """Parse strings like "A(1e-3)-A(1e-3)-F(0.1)" into a SolverSchedule."""
    text = s.strip()
    if not _SCHEDULE_RE.fullmatch(text):
        raise ValueError(f"malformed solver schedule {s!r}; expected SPEC(-SPEC)* "
                         "with SPEC = F(dt) or A(tol)")
    specs = []
    for m in _SPEC_RE.finditer(text):
        try:
            value = float(m.group(2))
        except ValueError:
            raise ValueError(f"bad number in solver spec {m.group(0)!r}") from None
        if value <= 0:
            raise ValueError(f"solver spec value must be positive: {m.group(0)!r}")
        if m.group(1) == "F":
            specs.append(SolverSpec("fixed", dt=value))
        else:
            specs.append(SolverSpec("adaptive", tol=value))
    return SolverSchedule(specs, T)


@dataclass
class OdeTrace:
    """Per-run solver accounting."""

    nfe_per_scale: list[int] = field(default_factory=list)
    theta_trajectory: list[tuple[float, torch.Tensor]] | None = None
    wall_time_s: float = 0.0

    def to_json(self) -> dict:
        return {"nfe_per_scale": list(self.nfe_per_scale), "wall_time_s": self.wall_time_s}


def _eval_f(f, theta: torch.Tensor, t: float, use_checkpoint: bool) -> torch.Tensor:
    if use_checkpoint and torch.is_grad_enabled():
        v = _ckpt.checkpoint(lambda th: f(th, t), theta, use_reentrant=False)
    else:
        v = f(theta, t)
    if not bool(torch.isfinite(v.detach()).all()):
        raise NumericsError(f"dynamics returned non-finite values at t={t:g}")
    return v


def euler_solve(f, theta0: torch.Tensor, t0: float, t1: float, dt: float,
                checkpoint: bool = False, trajectory: list | None = None):
    """Forward Euler with the final partial step shortened to land exactly on t1.

    Returns (theta_t1, nfe).
    """
    if not t1 > t0:
        raise ValueError(f"need t1 > t0, got [{t0}, {t1}]")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    tiny = _TINY_REL * (t1 - t0)
    theta, t, nfe = theta0, float(t0), 0
    while t < t1 - tiny:
        h = min(dt, t1 - t)
        v = _eval_f(f, theta, t, checkpoint)
        nfe += 1
        theta = theta + h * v
        t = t1 if t + h >= t1 - tiny else t + h
        if trajectory is not None:
            trajectory.append((t, theta.detach().reshape(-1).clone()))
    return theta, nfe


def heun_solve(f, theta0: torch.Tensor, t0: float, t1: float, dt: float,
               checkpoint: bool = False):
    """Fixed-step Heun (trapezoidal predictor-corrector); used for order checks."""
    if not t1 > t0:
        raise ValueError(f"need t1 > t0, got [{t0}, {t1}]")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    tiny = _TINY_REL * (t1 - t0)
    theta, t, nfe = theta0, float(t0), 0
    while t < t1 - tiny:
        h = min(dt, t1 - t)
        k1 = _eval_f(f, theta, t, checkpoint)
        k2 = _eval_f(f, theta + h * k1, t + h, checkpoint)
        nfe += 2
        theta = theta + (h / 2.0) * (k1 + k2)
        t = t1 if t + h >= t1 - tiny else t + h
    return theta, nfe


def heun_adaptive_solve(f, theta0: torch.Tensor, t0: float, t1: float, tol: float,
                        checkpoint: bool = False, trajectory: list | None = None,
                        max_nfe: int = 100_000):
    """Embedded Heun(2)/Euler(1) pair with standard step control.

    Error estimate e = max|theta_heun - theta_euler| / (1 + max|theta|); a step
    is accepted when e <= tol (equivalently, raw error <= tol * (1 + max|theta|))
    and the step size is updated as h <- 0.9 * h * clip(sqrt(tol / e), 0.2, 2),
    so h tracks the acceptance boundary. Lands exactly on t1.
    Returns (theta_t1, nfe).
    """
    if not t1 > t0:
        raise ValueError(f"need t1 > t0, got [{t0}, {t1}]")
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    span = t1 - t0
    tiny = _TINY_REL * span
    h_min = 1e-6 * span
    theta, t, nfe = theta0, float(t0), 0
    h = span                            # first trial: the whole segment
    k1 = None
    while t < t1 - tiny:
        if h < h_min:
            raise NumericsError(f"adaptive step size underflow at t={t:g} (h={h:.3e}); "
                                "dynamics too stiff for the requested tolerance")
        h = min(h, t1 - t)
        if k1 is None:
            k1 = _eval_f(f, theta, t, checkpoint)
            nfe += 1
        theta_euler = theta + h * k1
        k2 = _eval_f(f, theta_euler, t + h, checkpoint)
        nfe += 1
        if nfe > max_nfe:
            raise NumericsError(f"adaptive solver exceeded {max_nfe} function evaluations")
        theta_heun = theta + (h / 2.0) * (k1 + k2)

        scale = 1.0 + float(theta.detach().abs().max())
        err = float((theta_heun - theta_euler).detach().abs().max()) / scale
        if err <= tol:
            theta = theta_heun
            t = t1 if t + h >= t1 - tiny else t + h
            k1 = None
            if trajectory is not None:
                trajectory.append((t, theta.detach().reshape(-1).clone()))
        factor = 2.0 if err == 0.0 else min(2.0, max(0.2, (tol / err) ** 0.5))
        h = 0.9 * h * factor
    return theta, nfe


# ---------------------------------------------------------------------------
# Parameter plumbing between scales

def _theta_tensor(params: tf.TransformParams) -> torch.Tensor:
    if isinstance(params, tf.Rigid6):
        return tf.flatten_params(params)
    if isinstance(params, tf.BSplineGrid):
        return params.displacements_mm
    if isinstance(params, tf.DenseParams):
        return params.displacement_vox
    raise ValueError("msodenet integrates rigid6, bspline, or dense parameters; "
                     "run hybrid transforms as two cascaded stages")


def _theta_params(tag: str, theta: torch.Tensor, control_spacing_px: int) -> tf.TransformParams:
    if tag == "rigid6":
        return tf.unflatten_params(theta.reshape(-1), "rigid6")
    if tag == "bspline":
        return tf.BSplineGrid(theta, control_spacing_px)
    if tag == "dense":
        return tf.DenseParams(theta)
    raise ValueError(f"unknown tag {tag!r}")


def _upsample_theta(tag: str, theta: torch.Tensor, from_dims, to_dims,
                    control_spacing_px: int) -> torch.Tensor:
    """Carry theta from one pyramid level to the next finer one.

    Rigid parameters are resolution-free. Grid/dense displacements are
    trilinearly resampled; values stay in mm for B-spline controls, while dense
    voxel displacements are doubled (voxel size halves).
    """
    if tag == "rigid6":
        return theta
    if tag == "dense":
        up = torch.nn.functional.interpolate(theta.unsqueeze(0), size=tuple(to_dims),
                                             mode="trilinear", align_corners=False).squeeze(0)
        return up * 2.0
    if tag == "bspline":
        g_new = tf.bspline_grid_dims(to_dims, control_spacing_px)
        delta = float(control_spacing_px)
        # New control k sits at voxel (k-1)*delta on the fine level; the fine
        # voxel p corresponds to coarse voxel (p - 0.5) / 2 (2x average pooling),
        # hence coarse control-grid index ((p - 0.5) / 2) / delta + 1.
        axes = []
        for g in g_new:
            pos_fine = (torch.arange(g, dtype=theta.dtype) - 1.0) * delta
            axes.append(((pos_fine - 0.5) / 2.0) / delta + 1.0)
        grid = torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=0)
        ctrl_vol = Volume3D(theta)
        sampled = trilinear_sample(ctrl_vol, grid.reshape(3, -1), border="clamp")
        return sampled.reshape(3, *g_new)
    raise ValueError(f"unknown tag {tag!r}")


def make_field_fn(tag: str, dims, spacing_mm, control_spacing_px: int = tf.DEFAULT_CONTROL_SPACING_PX):
    """Returns theta_tensor -> DeformationField for one pyramid level."""
    if tag == "rigid6":
        return lambda th: tf.rigid_field_from_tensor(th, dims, spacing_mm)
    if tag == "bspline":
        return lambda th: tf.bspline_to_field(tf.BSplineGrid(th, control_spacing_px), dims, spacing_mm)
    if tag == "dense":
        return lambda th: tf.dense_to_field(tf.DenseParams(th), spacing_mm)
    raise ValueError(f"unknown tag {tag!r}")


def msodenet_forward(pyr_mov, pyr_fix, theta0: tf.TransformParams, schedule: SolverSchedule,
                     dynamics, control_spacing_px: int = tf.DEFAULT_CONTROL_SPACING_PX,
                     checkpoint: bool = True, record_trajectory: bool = False):
    """Integrate the parameter ODE across all pyramid levels, coarsest first.

    dynamics is a list of L callables (warped: Volume3D, fixed: Volume3D,
    t_norm: float) -> velocity tensor shaped like theta at that level; t_norm
    is solver time normalized to [0, 1]. theta0 must be parameterized for the
    coarsest level. Returns (theta_T as TransformParams at the finest level,
    OdeTrace).
    """
    L = schedule.L
    if not (len(pyr_mov) == len(pyr_fix) == L):
        raise ValueError(f"pyramids must have L={L} levels, got {len(pyr_mov)}/{len(pyr_fix)}")
    if len(dynamics) != L:
        raise ValueError(f"need {L} dynamics, got {len(dynamics)}")
    for mov, fix in zip(pyr_mov, pyr_fix):
        if mov.dims != fix.dims:
            raise ValueError(f"moving/fixed dims differ at a level: {mov.dims} vs {fix.dims}")

    tag = tf.params_tag(theta0)
    theta = _theta_tensor(theta0)
    trajectory = [] if record_trajectory else None
    trace = OdeTrace(theta_trajectory=trajectory)

    start = time.perf_counter()
    for level in range(L):
        mov, fix = pyr_mov[level], pyr_fix[level]
        field_fn = make_field_fn(tag, mov.dims, mov.spacing_mm, control_spacing_px)
        net = dynamics[level]

        def f(th, t, _net=net, _mov=mov, _fix=fix, _field_fn=field_fn):
            warped = warp(_mov, _field_fn(th))
            return _net(warped, _fix, t / schedule.T)

        t_lo, t_hi = schedule.segment(level)
        spec = schedule.per_scale[level]
        if spec.kind == "fixed":
            theta, nfe = euler_solve(f, theta, t_lo, t_hi, spec.dt,
                                     checkpoint=checkpoint, trajectory=trajectory)
        else:
            theta, nfe = heun_adaptive_solve(f, theta, t_lo, t_hi, spec.tol,
                                             checkpoint=checkpoint, trajectory=trajectory)
        trace.nfe_per_scale.append(nfe)

        if level < L - 1:
            theta = _upsample_theta(tag, theta, pyr_mov[level].dims,
                                    pyr_mov[level + 1].dims, control_spacing_px)
    trace.wall_time_s = time.perf_counter() - start
    return _theta_params(tag, theta, control_spacing_px), trace


def loss_gradient(loss_fn, run, params):
    """Exact gradients of the discrete solver computation.

    run() performs an integration (e.g. a msodenet_forward closure) and returns
    (theta_T, trace); loss_fn(theta_T) returns a scalar tensor. Returns
    (loss value, gradient list aligned with params, trace). Gradients are
    produced by backpropagating through the solver's accepted steps, with
    per-step activations recomputed from the checkpointed theta values.
    """
    params = list(params)
    theta_T, trace = run()
    loss = loss_fn(theta_T)
    if not bool(torch.isfinite(loss.detach()).all()):
        raise NumericsError("loss is non-finite; integration diverged")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = []
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        if not bool(torch.isfinite(g).all()):
            raise NumericsError("non-finite gradient; training diverged")
        out.append(g)
    return loss.detach(), out, trace
