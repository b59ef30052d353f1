"""Unsupervised training of the multi-scale registration ODE, plus inference.

Each step samples a training pair: either a dataset pair (moving, fixed) scored
by the configured image metric, or a self-supervision pair (x, x o phi_tilde)
built from a random perturbation drawn from the dataset's motion distribution,
scored additionally by the parameter-space L2 loss. Ground-truth fields from
the simulator are never used for training, only for evaluation.

Hybrid motion trains two models sequentially: a rigid stage, then a deformable
stage on rigid-corrected pairs.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np
import torch

from . import transforms as tf
from .dynamics import DynamicsStack
from .i2i import I2IModels, sample_slice_indices
from .losses import (RegLossWeights, l2_image_loss, mutual_information,
                     self_supervision_loss, similarity_loss, smoothness_loss,
                     total_registration_loss)
from .odecore import SolverSchedule, loss_gradient, msodenet_forward, parse_schedule
from .synth import Dataset, MotionSpec, sample_motion
from .volume import NumericsError, Volume3D, build_pyramid, warp

_KIND_ALIASES = {"rigid": "rigid6", "rigid6": "rigid6", "bspline": "bspline",
                 "dense": "dense", "hybrid": "hybrid"}

DEFAULT_SCHEDULES = {
    # solver schedules used in the experiments: adaptive Heun at the coarse
    # scales for rigid, fixed-step Euler everywhere for the deformable kinds
    "rigid6": "A(1e-3)-A(1e-3)-F(0.1)",
    "bspline": "F(0.2)-F(0.2)-F(0.25)",
    "dense": "F(0.2)-F(0.2)-F(0.5)",
}


@dataclass
class RegTrainConfig:
    kind: str = "rigid"
    schedule: str | None = None            # None -> kind default
    T: float = 3.0
    L: int = 3
    lr: float = 1e-3
    iters: int = 300
    batch: int = 1
    lambda_self: float | None = None       # None -> kind default (1.0)
    lambda_reg: float | None = None        # None -> kind default (0 / 2 / 10)
    metric: str = "l2"                     # content | mi | l2
    encoder_ckpt: str | None = None
    seed: int = 0
    out_dir: str | None = None
    self_pair_fraction: float = 0.5
    n_similarity_slices: int = 9
    mi_bins: int = 16
    checkpoint_every: int = 100
    log_every: int = 25
    val_pairs: int = 0                     # held-out pairs taken from the dataset tail
    eval_every: int = 100
    resume_from: str | None = None         # stage dir containing train_state.pt
    grad_clip: float = 2.0                 # global grad-norm clip; 0 disables

    def __post_init__(self):
        if self.kind not in _KIND_ALIASES:
            raise ValueError(f"kind must be one of {sorted(_KIND_ALIASES)}, got {self.kind!r}")
        if self.metric not in ("content", "mi", "l2"):
            raise ValueError(f"metric must be content/mi/l2, got {self.metric!r}")
        if not (0.0 <= self.self_pair_fraction <= 1.0):
            raise ValueError("self_pair_fraction must be in [0, 1]")

    @property
    def tag(self) -> str:
        return _KIND_ALIASES[self.kind]

    def schedule_for(self, tag: str) -> str:
        return self.schedule if self.schedule is not None else DEFAULT_SCHEDULES[tag]

    @classmethod
    def from_dict(cls, doc: dict) -> "RegTrainConfig":
        doc = dict(doc)
        if "n_slices_N" in doc:                # documented alias
            doc["n_similarity_slices"] = doc.pop("n_slices_N")
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(doc) - {name for name in known}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class RegModel:
    """One or two (hybrid) trained dynamics stacks plus their solver schedules."""

    def __init__(self, kind: str, stacks, schedules, T: float,
                 control_spacing_px: int = tf.DEFAULT_CONTROL_SPACING_PX,
                 self_floor: float | None = None):
        self.kind = kind
        self.stacks = list(stacks)
        self.schedules = list(schedules)
        self.T = T
        self.control_spacing_px = control_spacing_px
        # largest parameter norm seen when registering held-out volumes to
        # themselves; a calibration constant for "did it move at all" checks
        self.self_floor = self_floor

    @property
    def L(self) -> int:
        return len(self.stacks[0])

    def register(self, moving: Volume3D, fixed: Volume3D, schedule: str | None = None):
        """Returns (params list, total field at full resolution, traces, moved)."""
        params_out, traces = [], []
        field_total = None
        current = moving
        for stack, sched_str in zip(self.stacks, self.schedules):
            sched = parse_schedule(schedule or sched_str, self.T)
            if sched.L != len(stack):
                raise ValueError(f"schedule has {sched.L} segments but model has "
                                 f"{len(stack)} scales")
            pyr_mov = build_pyramid(current, len(stack))
            pyr_fix = build_pyramid(fixed, len(stack))
            theta0 = tf.identity_params(stack.kind, pyr_mov[0].dims, self.control_spacing_px)
            with torch.no_grad():
                theta_t, trace = msodenet_forward(pyr_mov, pyr_fix, theta0, sched,
                                                  list(stack), self.control_spacing_px)
            stage_field = tf.to_field(theta_t, moving.dims, moving.spacing_mm)
            field_total = stage_field if field_total is None else \
                tf.compose(stage_field, field_total)
            current = warp(moving, field_total)
            params_out.append(theta_t)
            traces.append(trace)
        return params_out, field_total, traces, current

    def registrar(self, schedule: str | None = None):
        def run(moving, fixed):
            _, field_total, traces, _ = self.register(moving, fixed, schedule)
            trace = traces[0] if len(traces) == 1 else _merge_traces(traces)
            return field_total, trace
        return run

    def measure_self_floor(self, volumes) -> float:
        """Max over volumes of ||theta_T|| when registering a volume to itself."""
        worst = 0.0
        for vol in volumes:
            params, _, _, _ = self.register(vol, vol)
            norm = max(float(tf.flatten_params(p).norm()) for p in params)
            worst = max(worst, norm)
        self.self_floor = worst
        return worst

    def save(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        meta = {"kind": self.kind, "schedules": self.schedules, "T": self.T,
                "control_spacing_px": self.control_spacing_px,
                "stages": [s.kind for s in self.stacks],
                "self_floor": self.self_floor}
        with open(os.path.join(out_dir, "model.json"), "w") as f:
            json.dump(meta, f, indent=1)
        for i, stack in enumerate(self.stacks):
            stack.save(os.path.join(out_dir, f"stage_{i}"))

    @classmethod
    def load(cls, out_dir) -> "RegModel":
        meta_path = os.path.join(out_dir, "model.json")
        try:
            with open(meta_path) as f:
                meta = json.load(f)
        except FileNotFoundError:
            raise FileNotFoundError(f"registration model not found: {meta_path}") from None
        stacks = [DynamicsStack.load(os.path.join(out_dir, f"stage_{i}"))
                  for i in range(len(meta["stages"]))]
        return cls(meta["kind"], stacks, meta["schedules"], meta["T"],
                   meta["control_spacing_px"], meta.get("self_floor"))


class _SimpleTrace:
    def __init__(self, nfe):
        self.nfe_per_scale = nfe


def _merge_traces(traces):
    nfe = []
    for t in traces:
        nfe.extend(t.nfe_per_scale)
    return _SimpleTrace(nfe)


def _motion_spec_for_stage(meta_motion: dict, tag: str) -> MotionSpec:
    """Perturbation distribution for self pairs: the dataset's motion ranges,
    restricted to the component this stage estimates."""
    spec = MotionSpec(**meta_motion)
    if tag == "rigid6":
        return replace(spec, kind="rigid", bspline_sigma_mm=0.0)
    return replace(spec, kind="deformable", rot_range_deg=0.0, trans_range_mm=0.0)


class _PairCache:
    def __init__(self, dataset: Dataset, limit: int = 256):
        self.dataset = dataset
        self.limit = limit
        self._cache = {}

    def get(self, i: int):
        if i not in self._cache:
            if len(self._cache) >= self.limit:
                self._cache.pop(next(iter(self._cache)))
            pair = self.dataset.load_pair(i)
            self._cache[i] = (pair.moving, pair.fixed)
        return self._cache[i]


def _make_metric(config: RegTrainConfig, rng: np.random.Generator):
    if config.metric == "l2":
        return lambda moved, fixed: l2_image_loss(moved, fixed)
    if config.metric == "mi":
        return lambda moved, fixed: -mutual_information(moved, fixed,
                                                        bins=config.mi_bins, parzen=True)
    if not config.encoder_ckpt:
        raise ValueError("metric 'content' needs encoder_ckpt pointing at trained i2i weights")
    models = I2IModels.load(config.encoder_ckpt)
    encoder = models.content_enc
    for p in encoder.parameters():
        p.requires_grad_(False)
    n_slices = models.n_slices

    def content_metric(moved, fixed):
        indices = sample_slice_indices(moved.dims, config.n_similarity_slices,
                                       n_slices, rng)
        return similarity_loss(encoder, moved, fixed, rng=None,
                               n_slices=n_slices, indices=indices)
    return content_metric


def _train_stage(dataset: Dataset, config: RegTrainConfig, tag: str,
                 preprocess=None, stage_label: str = "stage"):
    """One dynamics stack trained to convergence; returns (stack, history)."""
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)

    sample_pair = dataset.load_pair(0)
    dims = sample_pair.moving.dims
    spacing = sample_pair.moving.spacing_mm
    n_channels = sample_pair.moving.n_channels
    csp = tf.DEFAULT_CONTROL_SPACING_PX

    schedule = parse_schedule(config.schedule_for(tag), config.T)
    if schedule.L != config.L:
        raise ValueError(f"schedule {config.schedule_for(tag)!r} has {schedule.L} "
                         f"segments but config.L = {config.L}")
    level_dims = [p.dims for p in build_pyramid(sample_pair.moving, config.L)]
    stack = DynamicsStack(tag, level_dims, in_channels=2 * n_channels + 1,
                          control_spacing_px=csp)
    params = [p for p in stack.parameters()]
    opt = torch.optim.Adam(params, lr=config.lr)

    weights = RegLossWeights.defaults_for(tag)
    if config.lambda_self is not None:
        weights.lambda_self = config.lambda_self
    if config.lambda_reg is not None:
        weights.lambda_reg = config.lambda_reg

    motion_spec = _motion_spec_for_stage(dataset.meta.get("motion", {}), tag)
    metric_fn = _make_metric(config, rng)

    n_train = dataset.n_pairs - config.val_pairs
    if n_train < 1:
        raise ValueError(f"dataset has {dataset.n_pairs} pairs but val_pairs="
                         f"{config.val_pairs} leaves none for training")
    cache = _PairCache(dataset)

    history: dict[str, list] = {"loss": [], "sim": [], "self": [], "reg": [], "val_rmse_phi": []}
    last_good = None
    start_iter = 0
    if config.resume_from:
        state_path = os.path.join(config.resume_from, "train_state.pt")
        try:
            state = torch.load(state_path, weights_only=False)
        except FileNotFoundError:
            raise FileNotFoundError(f"no training state at {state_path}") from None
        stack.load_state_dict(state["stack"])
        opt.load_state_dict(state["opt"])
        rng.bit_generator.state = state["np_rng"]
        torch.set_rng_state(state["torch_rng"])
        start_iter = state["iter"]

    def save_train_state(stage_dir, it):
        torch.save({"stack": stack.state_dict(), "opt": opt.state_dict(),
                    "np_rng": rng.bit_generator.state,
                    "torch_rng": torch.get_rng_state(), "iter": it},
                   os.path.join(stage_dir, "train_state.pt"))

    def one_example():
        """Returns (loss tensor closure pieces) for a sampled training example."""
        idx = int(rng.integers(n_train))
        moving, fixed = cache.get(idx)
        if preprocess is not None:
            moving = preprocess(moving, fixed)
        use_self = rng.uniform() < config.self_pair_fraction
        theta_tilde = None
        if use_self:
            theta_tilde = sample_motion(motion_spec, dims, spacing, rng)
            fixed = warp(moving, tf.to_field(theta_tilde, dims, spacing))

        pyr_mov = build_pyramid(moving, config.L)
        pyr_fix = build_pyramid(fixed, config.L)
        theta0 = tf.identity_params(tag, pyr_mov[0].dims, csp)

        def run():
            return msodenet_forward(pyr_mov, pyr_fix, theta0, schedule, list(stack), csp)

        def loss_fn(theta_t):
            field_fine = tf.to_field(theta_t, dims, spacing)
            moved = warp(moving, field_fine)
            sim = metric_fn(moved, fixed)
            self_l = self_supervision_loss(theta_tilde, theta_t) if theta_tilde is not None \
                else torch.zeros(())
            reg = smoothness_loss(field_fine) if weights.lambda_reg > 0 else torch.zeros(())
            parts["sim"] = float(sim.detach())
            parts["self"] = float(self_l.detach())
            parts["reg"] = float(reg.detach())
            return total_registration_loss(sim, self_l, reg, weights)

        parts = {}
        loss, grads, _ = loss_gradient(loss_fn, run, params)
        return float(loss), grads, parts

    from .evalm import rmse_field

    def val_metric():
        if config.val_pairs == 0:
            return None
        model = RegModel(tag, [stack], [config.schedule_for(tag)], config.T, csp)
        vals = []
        for i in range(n_train, min(n_train + min(config.val_pairs, 8), dataset.n_pairs)):
            pair = dataset.load_pair(i)
            _, est_field, _, _ = model.register(pair.moving, pair.fixed)
            vals.append(rmse_field(est_field, pair.gt_field))
        return float(np.median(vals))

    for it in range(start_iter, config.iters):
        try:
            opt.zero_grad()
            batch_loss, batch_parts = 0.0, {"sim": 0.0, "self": 0.0, "reg": 0.0}
            for _ in range(config.batch):
                loss_val, grads, parts = one_example()
                for p, g in zip(params, grads):
                    p.grad = g / config.batch if p.grad is None else p.grad + g / config.batch
                batch_loss += loss_val / config.batch
                for k in batch_parts:
                    batch_parts[k] += parts[k] / config.batch
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            opt.step()
        except NumericsError:
            if last_good is not None:
                stack.load_state_dict(last_good)
                if config.out_dir:
                    stack.save(os.path.join(config.out_dir, stage_label))
            raise NumericsError(f"registration training diverged at iteration {it}; "
                                "restored last good checkpoint") from None

        history["loss"].append(batch_loss)
        for k in ("sim", "self", "reg"):
            history[k].append(batch_parts[k])
        if (it + 1) % config.checkpoint_every == 0 or it == config.iters - 1:
            last_good = {k: v.detach().clone() for k, v in stack.state_dict().items()}
            if config.out_dir:
                stage_dir = os.path.join(config.out_dir, stage_label)
                stack.save(stage_dir)
                save_train_state(stage_dir, it + 1)
        if config.val_pairs and ((it + 1) % config.eval_every == 0 or it == config.iters - 1):
            history["val_rmse_phi"].append((it + 1, val_metric()))
    return stack, history


def train_registration(dataset: Dataset, config: RegTrainConfig):
    """Full training entry point; returns (RegModel, history dict).

    Hybrid motion runs the rigid stage first, freezes it, then trains the
    deformable stage on rigid-corrected moving images.
    """
    csp = tf.DEFAULT_CONTROL_SPACING_PX
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        with open(os.path.join(config.out_dir, "config.json"), "w") as f:
            json.dump(config.to_dict(), f, indent=1)

    if config.tag != "hybrid":
        stack, history = _train_stage(dataset, config, config.tag, stage_label="stage_0")
        model = RegModel(config.tag, [stack], [config.schedule_for(config.tag)],
                         config.T, csp)
    else:
        rigid_cfg = replace(config, kind="rigid")
        rigid_stack, rigid_hist = _train_stage(dataset, rigid_cfg, "rigid6",
                                               stage_label="stage_0")
        rigid_model = RegModel("rigid6", [rigid_stack], [rigid_cfg.schedule_for("rigid6")],
                               config.T, csp)
        for p in rigid_stack.parameters():
            p.requires_grad_(False)

        def rigid_correct(moving, fixed):
            with torch.no_grad():
                _, field_total, _, moved = rigid_model.register(moving, fixed)
            return moved

        deform_kind = "bspline" if config.kind == "hybrid" else config.tag
        deform_cfg = replace(config, kind=deform_kind, seed=config.seed + 1)
        deform_stack, deform_hist = _train_stage(dataset, deform_cfg, deform_cfg.tag,
                                                 preprocess=rigid_correct,
                                                 stage_label="stage_1")
        model = RegModel("hybrid", [rigid_stack, deform_stack],
                         [rigid_cfg.schedule_for("rigid6"),
                          deform_cfg.schedule_for(deform_cfg.tag)], config.T, csp)
        history = {"rigid": rigid_hist, "deform": deform_hist}

    # self-registration floor from the dataset tail (held-out when val_pairs > 0)
    floor_vols = [dataset.load_pair(i).moving
                  for i in range(max(0, dataset.n_pairs - 4), dataset.n_pairs)]
    if floor_vols:
        model.measure_self_floor(floor_vols)

    if config.out_dir:
        model.save(os.path.join(config.out_dir, "model"))
        with open(os.path.join(config.out_dir, "history.json"), "w") as f:
            json.dump(history, f)
    return model, history
