"""Evaluation metrics and benchmark reporting (CSV + JSON + figures).

Aggregates report mean and population standard deviation. Timing covers the
registrar call only, via an injectable clock, so data loading never counts.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .volume import DeformationField, Volume3D, identity_field, warp


@dataclass
class PairResult:
    dice: float
    rmse_x: float
    rmse_phi_mm: float
    time_s: float
    nfe_per_scale: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 <= self.dice <= 1.0):
            raise ValueError(f"dice must be in [0, 1], got {self.dice}")
        if min(self.rmse_x, self.rmse_phi_mm, self.time_s) < 0:
            raise ValueError("rmse and time must be >= 0")

    def to_dict(self) -> dict:
        return {"dice": self.dice, "rmse_x": self.rmse_x,
                "rmse_phi_mm": self.rmse_phi_mm, "time_s": self.time_s,
                "nfe_per_scale": list(self.nfe_per_scale)}


def _mask_tensor(m) -> torch.Tensor:
    t = m.data if isinstance(m, Volume3D) else torch.as_tensor(m)
    vals = torch.unique(t.detach())
    if not bool(((vals == 0) | (vals == 1)).all()):
        raise ValueError("masks must be binary (values 0/1)")
    return t > 0.5


def dice(a, b) -> float:
    """2|A n B| / (|A| + |B|); two empty masks count as perfectly overlapping."""
    ta, tb = _mask_tensor(a), _mask_tensor(b)
    if ta.shape != tb.shape:
        raise ValueError(f"mask shapes differ: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    na, nb = int(ta.sum()), int(tb.sum())
    if na + nb == 0:
        return 1.0
    inter = int((ta & tb).sum())
    return 2.0 * inter / (na + nb)


def rmse_image(a: Volume3D, b: Volume3D) -> float:
    if a.dims != b.dims:
        raise ValueError(f"volume dims differ: {a.dims} vs {b.dims}")
    return float(torch.sqrt(((a.data - b.data) ** 2).mean()))


def rmse_field(f: DeformationField, g: DeformationField, spacing_mm=None) -> float:
    """Root mean squared 3-vector displacement difference, in mm."""
    if f.dims != g.dims:
        raise ValueError(f"field dims differ: {f.dims} vs {g.dims}")
    spacing = torch.tensor(spacing_mm if spacing_mm is not None else f.spacing_mm,
                           dtype=f.map.dtype).view(3, 1, 1, 1)
    diff_mm = (f.map - g.map) * spacing
    return float(torch.sqrt((diff_mm ** 2).sum(dim=0).mean()))


def identity_registrar(moving: Volume3D, fixed: Volume3D):
    """Baseline that reports no motion."""
    return identity_field(moving.dims, moving.spacing_mm), None


def _binary(vol: Volume3D) -> Volume3D:
    return Volume3D((vol.data > 0.5).float(), vol.spacing_mm, vol.modality)


def evaluate_pair(pair, est_field: DeformationField, time_s: float,
                  nfe_per_scale=None) -> PairResult:
    moved = warp(pair.moving, est_field)
    moved_mask = _binary(warp(pair.mask_mov, est_field))
    return PairResult(
        dice=dice(moved_mask, pair.mask_fix),
        rmse_x=rmse_image(moved, pair.moved_gt),
        rmse_phi_mm=rmse_field(est_field, pair.gt_field),
        time_s=time_s,
        nfe_per_scale=list(nfe_per_scale or []),
    )


def aggregate(results: list[PairResult]) -> dict:
    """Mean and population std per metric (ddof = 0, documented in reports)."""
    out = {}
    for name in ("dice", "rmse_x", "rmse_phi_mm", "time_s"):
        vals = np.array([getattr(r, name) for r in results], dtype=float)
        if len(vals) == 0:
            out[f"{name}_mean"] = float("nan")
            out[f"{name}_std"] = float("nan")
        else:
            out[f"{name}_mean"] = float(vals.mean())
            out[f"{name}_std"] = float(vals.std(ddof=0))
    out["n_pairs"] = len(results)
    return out


def benchmark(dataset, registrar, method: str = "msodenet", motion: str = "unknown",
              clock=time.perf_counter, pair_indices=None) -> dict:
    """Run a registrar over dataset pairs and collect PairResults.

    registrar(moving, fixed) -> (DeformationField, trace-or-None); only that
    call is timed. Failures are recorded and excluded from aggregates.
    """
    results: list[PairResult] = []
    failures: list[dict] = []
    indices = range(dataset.n_pairs) if pair_indices is None else pair_indices
    for i in indices:
        pair = dataset.load_pair(i)
        try:
            t0 = clock()
            est_field, trace = registrar(pair.moving, pair.fixed)
            elapsed = clock() - t0
            nfe = trace.nfe_per_scale if trace is not None else []
            results.append(evaluate_pair(pair, est_field, elapsed, nfe))
        except Exception as e:   # registration failure: record, keep going
            failures.append({"pair": i, "error": f"{type(e).__name__}: {e}"})
    return {
        "method": method,
        "motion": motion,
        "rows": [r.to_dict() for r in results],
        "aggregate": aggregate(results),
        "n_failed": len(failures),
        "failures": failures,
    }


CSV_COLUMNS = ["method", "motion", "dice_mean", "dice_std", "rmse_x_mean", "rmse_x_std",
               "rmse_phi_mean", "rmse_phi_std", "time_mean", "time_std",
               "n_pairs", "n_failed"]


def write_report(reports, out_csv, out_json) -> None:
    """One CSV row per (method, motion) report plus a JSON with per-pair rows."""
    if isinstance(reports, dict):
        reports = [reports]
    os.makedirs(os.path.dirname(os.path.abspath(out_csv)) or ".", exist_ok=True)
    with open(out_csv, "w", newline="") as f:
        f.write("# std convention: population (ddof=0)\n")
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for rep in reports:
            agg = rep["aggregate"]
            writer.writerow({
                "method": rep["method"], "motion": rep["motion"],
                "dice_mean": agg["dice_mean"], "dice_std": agg["dice_std"],
                "rmse_x_mean": agg["rmse_x_mean"], "rmse_x_std": agg["rmse_x_std"],
                "rmse_phi_mean": agg["rmse_phi_mm_mean"], "rmse_phi_std": agg["rmse_phi_mm_std"],
                "time_mean": agg["time_s_mean"], "time_std": agg["time_s_std"],
                "n_pairs": agg["n_pairs"], "n_failed": rep["n_failed"],
            })
    with open(out_json, "w") as f:
        json.dump(reports, f, indent=1)
