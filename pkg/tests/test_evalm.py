import csv
import json

import numpy as np
import pytest
import torch

from msode.evalm import (PairResult, aggregate, benchmark, dice, identity_registrar,
                         rmse_field, rmse_image, write_report)
from msode.synth import MotionSpec, PhantomSpec, generate_dataset
from msode.volume import Volume3D, identity_field


def mk_mask(*on_voxels, dims=(4, 4, 4)):
    data = torch.zeros(1, *dims)
    for z, y, x in on_voxels:
        data[0, z, y, x] = 1.0
    return Volume3D(data)


class TestDice:
    def test_identical_nonempty(self):
        m = mk_mask((0, 0, 0), (1, 1, 1))
        assert dice(m, m) == 1.0

    def test_disjoint(self):
        a = mk_mask((0, 0, 0))
        b = mk_mask((3, 3, 3))
        assert dice(a, b) == 0.0

    def test_half_overlap(self):
        a = mk_mask((0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 0, 3))
        b = mk_mask((0, 0, 2), (0, 0, 3), (1, 0, 0), (1, 0, 1))
        assert dice(a, b) == 0.5

    def test_both_empty_is_one(self):
        assert dice(mk_mask(), mk_mask()) == 1.0

    def test_symmetry(self):
        a = mk_mask((0, 0, 0), (2, 2, 2))
        b = mk_mask((2, 2, 2), (3, 1, 0))
        assert dice(a, b) == dice(b, a)

    def test_non_binary_rejected(self):
        bad = Volume3D(torch.full((1, 2, 2, 2), 0.5))
        with pytest.raises(ValueError, match="binary"):
            dice(bad, bad)


class TestRmse:
    def test_identical_zero(self):
        v = Volume3D(torch.rand(1, 4, 4, 4))
        assert rmse_image(v, v) == 0.0

    def test_constant_offset(self):
        a = Volume3D(torch.zeros(1, 4, 4, 4))
        b = Volume3D(torch.full((1, 4, 4, 4), 0.1))
        assert rmse_image(a, b) == pytest.approx(0.1, rel=1e-5)

    def test_field_constant_offset_mm(self):
        f = identity_field((4, 4, 4), (1.0, 1.0, 1.0))
        g = identity_field((4, 4, 4), (1.0, 1.0, 1.0))
        g.map[2] += 2.0
        assert rmse_field(f, g) == pytest.approx(2.0, abs=1e-6)

    def test_field_spacing_conversion(self):
        f = identity_field((4, 4, 4), (1.0, 1.0, 2.0))
        g = identity_field((4, 4, 4), (1.0, 1.0, 2.0))
        g.map[2] += 1.0                      # one voxel at 2 mm spacing
        assert rmse_field(f, g) == pytest.approx(2.0, abs=1e-6)

    def test_identity_zero_and_monotone_offsets(self):
        f = identity_field((4, 4, 4))
        assert rmse_field(f, f) == 0.0
        vals = []
        for off in (0.5, 1.0, 2.0):
            g = identity_field((4, 4, 4))
            g.map += off
            vals.append(rmse_field(f, g))
        assert vals[0] < vals[1] < vals[2]

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            rmse_image(Volume3D(torch.zeros(1, 4, 4, 4)), Volume3D(torch.zeros(1, 5, 4, 4)))


class TestAggregate:
    def test_mean_and_population_std(self):
        rows = [PairResult(1.0, 1.0, 1.0, 1.0), PairResult(1.0, 3.0, 3.0, 3.0)]
        agg = aggregate(rows)
        assert agg["rmse_x_mean"] == pytest.approx(2.0)
        assert agg["rmse_x_std"] == pytest.approx(1.0)      # population convention
        assert agg["n_pairs"] == 2

    def test_pair_result_validation(self):
        with pytest.raises(ValueError):
            PairResult(dice=1.5, rmse_x=0, rmse_phi_mm=0, time_s=0)
        with pytest.raises(ValueError):
            PairResult(dice=0.5, rmse_x=-1, rmse_phi_mm=0, time_s=0)


def unmoved_dataset(tmp_path, n=2):
    spec = PhantomSpec(dims=(20, 20, 20), noise_std=0.0, bias_strength=0.0, seed=11)
    motion = MotionSpec(kind="rigid", rot_range_deg=0.0, trans_range_mm=0.0, seed=0)
    return generate_dataset(spec, motion, n, tmp_path / "unmoved")


class TestBenchmark:
    def test_identity_registrar_on_unmoved_pairs(self, tmp_path):
        ds = unmoved_dataset(tmp_path)
        report = benchmark(ds, identity_registrar, method="identity", motion="none")
        agg = report["aggregate"]
        assert agg["dice_mean"] == pytest.approx(1.0)
        assert agg["rmse_x_mean"] == pytest.approx(0.0, abs=1e-6)
        assert agg["rmse_phi_mm_mean"] == pytest.approx(0.0, abs=1e-6)
        assert report["n_failed"] == 0

    def test_timing_uses_injected_clock(self, tmp_path):
        ds = unmoved_dataset(tmp_path)
        ticks = []

        def fake_clock():
            # data loading happens outside the timed window: each pair advances
            # the clock exactly once between the two reads
            ticks.append(len(ticks))
            return float(len(ticks))

        report = benchmark(ds, identity_registrar, clock=fake_clock)
        for row in report["rows"]:
            assert row["time_s"] == 1.0

    def test_failures_excluded_with_count(self, tmp_path):
        ds = unmoved_dataset(tmp_path)
        calls = {"n": 0}

        def flaky(moving, fixed):
            calls["n"] += 1
            if calls["n"] == 1:
                raise RuntimeError("synthetic failure")
            return identity_registrar(moving, fixed)

        report = benchmark(ds, flaky)
        assert report["n_failed"] == 1
        assert report["aggregate"]["n_pairs"] == ds.n_pairs - 1
        assert "synthetic failure" in report["failures"][0]["error"]

    def test_report_files(self, tmp_path):
        ds = unmoved_dataset(tmp_path)
        r1 = benchmark(ds, identity_registrar, method="identity", motion="none")
        r2 = benchmark(ds, identity_registrar, method="identity2", motion="rigid")
        out_csv = tmp_path / "report.csv"
        out_json = tmp_path / "report.json"
        write_report([r1, r2], out_csv, out_json)

        with open(out_csv) as f:
            comment = f.readline()
            assert "population" in comment
            rows = list(csv.DictReader(f))
        assert len(rows) == 2                 # methods x motion types
        assert rows[0]["method"] == "identity"
        assert float(rows[0]["dice_mean"]) == 1.0

        doc = json.loads(out_json.read_text())
        assert len(doc) == 2
        assert len(doc[0]["rows"]) == ds.n_pairs

    def test_metric_figure(self, tmp_path):
        from msode.plots import plot_metric_distributions
        ds = unmoved_dataset(tmp_path)
        report = benchmark(ds, identity_registrar)
        out = plot_metric_distributions(report, tmp_path / "metrics.png")
        assert (tmp_path / "metrics.png").stat().st_size > 0

    def test_loss_curve_figure(self, tmp_path):
        from msode.plots import plot_loss_curves
        out = plot_loss_curves({"loss": [3.0, 2.0, 1.0]}, tmp_path / "loss.png")
        assert (tmp_path / "loss.png").stat().st_size > 0
