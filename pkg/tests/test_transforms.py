import math

import numpy as np
import pytest
import torch

from msode.transforms import (BSplineGrid, DenseParams, HybridParams, Rigid6,
                              bspline_grid_dims, bspline_to_field, compose,
                              cubic_bspline_weights, dense_to_field, flatten_params,
                              identity_params, load_params, params_tag,
                              rigid_inverse, rigid_to_field, save_params, to_field,
                              unflatten_params)
from msode.volume import identity_field, identity_grid


def pullback_matrix(angles_deg, trans_mm, dims, spacing):
    """Independent homogeneous-matrix oracle on (z, y, x) voxel coordinates."""
    az, ay, ax = (math.radians(a) for a in angles_deg)
    rz = np.array([[math.cos(az), -math.sin(az), 0], [math.sin(az), math.cos(az), 0], [0, 0, 1.0]])
    ry = np.array([[math.cos(ay), 0, math.sin(ay)], [0, 1.0, 0], [-math.sin(ay), 0, math.cos(ay)]])
    rx = np.array([[1.0, 0, 0], [0, math.cos(ax), -math.sin(ax)], [0, math.sin(ax), math.cos(ax)]])
    r_xyz = rz @ ry @ rx
    r = r_xyz[::-1, ::-1]                       # on (z, y, x)-ordered vectors
    s = np.diag(spacing)
    c = np.array([(d - 1) / 2.0 * sp for d, sp in zip(dims, spacing)])
    t = np.asarray(trans_mm, dtype=float)
    # forward: y_mm = R (x_mm - c) + c + t; pull-back: x_mm = R^T (p_mm - c - t) + c
    m = np.eye(4)
    m[:3, :3] = np.linalg.inv(s) @ r.T @ s
    m[:3, 3] = np.linalg.inv(s) @ (r.T @ (-c - t) + c)
    return m


def field_from_matrix(m, dims):
    grid = identity_grid(dims).reshape(3, -1).numpy()
    hom = np.vstack([grid, np.ones((1, grid.shape[1]))])
    return (m @ hom)[:3].reshape(3, *dims)


class TestRigid:
    def test_zero_is_identity(self):
        f = rigid_to_field(Rigid6(), (5, 6, 7), (1.0, 1.0, 1.0))
        assert torch.allclose(f.map, identity_grid((5, 6, 7)), atol=1e-6)

    def test_pure_translation_pullback(self):
        f = rigid_to_field(Rigid6((0, 0, 0), (0, 0, 2.0)), (5, 5, 5), (1.0, 1.0, 1.0))
        expected = identity_grid((5, 5, 5))
        expected[2] -= 2.0
        assert torch.allclose(f.map, expected, atol=1e-5)

    def test_translation_respects_spacing(self):
        f = rigid_to_field(Rigid6((0, 0, 0), (0, 0, 2.0)), (5, 5, 5), (1.0, 1.0, 2.0))
        expected = identity_grid((5, 5, 5))
        expected[2] -= 1.0                      # 2 mm at 2 mm spacing = 1 voxel
        assert torch.allclose(f.map, expected, atol=1e-5)

    def test_180deg_about_z(self):
        dims = (3, 5, 7)
        f = rigid_to_field(Rigid6((180.0, 0, 0), (0, 0, 0)), dims, (1.0, 1.0, 1.0))
        g = identity_grid(dims)
        expected = torch.stack([g[0], dims[1] - 1 - g[1], dims[2] - 1 - g[2]])
        assert torch.allclose(f.map, expected, atol=1e-4)

    def test_matches_matrix_oracle(self):
        dims = (9, 9, 9)
        spacing = (1.0, 1.5, 2.0)
        angles, trans = (20.0, -10.0, 35.0), (1.0, -2.0, 0.5)
        f = rigid_to_field(Rigid6(angles, trans), dims, spacing)
        expected = field_from_matrix(pullback_matrix(angles, trans, dims, spacing), dims)
        assert np.allclose(f.map.numpy(), expected, atol=1e-4)

    def test_rigid_inverse_roundtrip(self):
        p = Rigid6((10.0, -14.0, 22.0), (3.0, -1.0, 2.0))
        q = rigid_inverse(p)
        m = pullback_matrix(p.angles(), p.translations(), (9, 9, 9), (1.0, 1.0, 1.0))
        mi = pullback_matrix(q.angles(), q.translations(), (9, 9, 9), (1.0, 1.0, 1.0))
        assert np.allclose(m @ mi, np.eye(4), atol=1e-6)

    def test_inverse_composition_near_identity(self):
        dims = (11, 11, 11)
        p = Rigid6((2.0, -1.5, 1.0), (0.5, -0.4, 0.3))
        f = rigid_to_field(p, dims, (1.0, 1.0, 1.0))
        fi = rigid_to_field(rigid_inverse(p), dims, (1.0, 1.0, 1.0))
        comp = compose(f, fi)
        ident = identity_grid(dims)
        interior = (slice(None), slice(2, -2), slice(2, -2), slice(2, -2))
        err = float((comp.map[interior] - ident[interior]).abs().max())
        assert err <= 0.05


class TestBSpline:
    def test_grid_dims(self):
        assert bspline_grid_dims((48, 48, 48), 15) == (7, 7, 7)
        assert bspline_grid_dims((16, 16, 16), 15) == (5, 5, 5)
        assert bspline_grid_dims((46, 46, 46), 15) == (7, 7, 7)

    def test_basis_partition_of_unity(self):
        t = torch.linspace(0, 0.999, 37)
        w = cubic_bspline_weights(t)
        assert torch.allclose(w.sum(0), torch.ones_like(t), atol=1e-6)
        assert torch.allclose(cubic_bspline_weights(torch.tensor(0.0)),
                              torch.tensor([1 / 6, 4 / 6, 1 / 6, 0.0]), atol=1e-7)

    def test_zero_grid_identity(self):
        dims = (20, 20, 20)
        g = BSplineGrid(torch.zeros(3, *bspline_grid_dims(dims, 15)), 15)
        f = bspline_to_field(g, dims, (1.0, 1.0, 1.0))
        assert torch.allclose(f.map, identity_grid(dims), atol=1e-6)

    def test_constant_grid_partition_of_unity(self):
        dims = (33, 21, 17)
        gd = bspline_grid_dims(dims, 15)
        c = torch.tensor([1.5, -2.0, 3.0]).view(3, 1, 1, 1)
        g = BSplineGrid(c.expand(3, *gd).clone(), 15)
        f = bspline_to_field(g, dims, (1.0, 1.0, 1.0))
        disp = f.map - identity_grid(dims)
        assert float((disp - c).abs().max()) <= 1e-5

    def test_single_control_center_weight(self):
        dims = (31, 31, 31)
        delta = 10
        gd = bspline_grid_dims(dims, delta)
        ctrl = torch.zeros(3, *gd)
        # control (2, 2, 2) sits at voxel (k - 1) * delta = 10 on each axis
        ctrl[2, 2, 2, 2] = 1.0
        f = bspline_to_field(BSplineGrid(ctrl, delta), dims, (1.0, 1.0, 1.0))
        disp_x = (f.map - identity_grid(dims))[2]
        assert disp_x[10, 10, 10].item() == pytest.approx((2 / 3) ** 3, abs=1e-6)

    def test_insufficient_coverage(self):
        with pytest.raises(ValueError, match="cover"):
            bspline_to_field(BSplineGrid(torch.zeros(3, 3, 3, 3), 15), (48, 48, 48), (1, 1, 1))

    def test_mm_to_voxel_conversion(self):
        dims = (17, 17, 17)
        gd = bspline_grid_dims(dims, 15)
        c = torch.zeros(3, 1, 1, 1)
        c[2] = 3.0                               # 3 mm along x
        g = BSplineGrid(c.expand(3, *gd).clone(), 15)
        f = bspline_to_field(g, dims, (1.0, 1.0, 2.0))
        disp = f.map - identity_grid(dims)
        assert float((disp[2] - 1.5).abs().max()) <= 1e-5

    def test_smoothness_bound(self):
        rng = np.random.default_rng(7)
        dims = (32, 32, 32)
        delta = 8
        gd = bspline_grid_dims(dims, delta)
        ctrl = torch.from_numpy(rng.normal(0, 4.0, size=(3, *gd)).astype(np.float32))
        f = bspline_to_field(BSplineGrid(ctrl, delta), dims, (1.0, 1.0, 1.0))
        disp = f.map - identity_grid(dims)
        max_ctrl = float(ctrl.abs().max())
        for axis in (1, 2, 3):
            diffs = disp.diff(dim=axis).abs().max()
            assert float(diffs) <= 2.0 * max_ctrl / delta


class TestDense:
    def test_zero_identity(self):
        d = DenseParams(torch.zeros(3, 4, 4, 4))
        assert torch.allclose(dense_to_field(d).map, identity_grid((4, 4, 4)))

    def test_constant_shift(self):
        disp = torch.zeros(3, 4, 4, 4)
        disp[2] = 1.0
        f = dense_to_field(DenseParams(disp))
        assert torch.allclose(f.map[2], identity_grid((4, 4, 4))[2] + 1.0)

    def test_roundtrip_displacement(self):
        rng = np.random.default_rng(8)
        disp = torch.from_numpy(rng.normal(size=(3, 5, 5, 5)).astype(np.float32))
        f = dense_to_field(DenseParams(disp))
        assert torch.allclose(f.map - identity_grid((5, 5, 5)), disp, atol=1e-6)


class TestCompose:
    def test_identity_sides(self):
        dims = (8, 8, 8)
        f = rigid_to_field(Rigid6((5.0, 0, 0), (1.0, 0, 0)), dims, (1, 1, 1))
        i = identity_field(dims)
        interior = (slice(None), slice(1, -1), slice(1, -1), slice(1, -1))
        left = compose(i, f)
        assert torch.allclose(left.map[interior], f.map[interior], atol=1e-5)
        right = compose(f, i)
        assert torch.allclose(right.map[interior], f.map[interior], atol=1e-5)

    def test_translation_algebra(self):
        dims = (8, 8, 8)
        f1 = identity_field(dims)
        f1.map[2] += 1.25
        f2 = identity_field(dims)
        f2.map[1] += 0.5
        comp = compose(f1, f2)
        expected = identity_grid(dims)
        expected[2] += 1.25
        expected[1] += 0.5
        # region where the outer coords keep the inner stencil fully in bounds
        interior = (slice(None), slice(None), slice(None, -2), slice(None, -3))
        assert torch.allclose(comp.map[interior], expected[interior], atol=1e-5)

    def test_rigid_composition_matrix_oracle(self):
        dims = (13, 13, 13)
        spacing = (1.0, 1.0, 1.0)
        p1 = Rigid6((8.0, -3.0, 5.0), (0.8, -0.5, 0.4))
        p2 = Rigid6((-4.0, 6.0, -7.0), (0.2, 0.7, -0.3))
        f1 = rigid_to_field(p1, dims, spacing)
        f2 = rigid_to_field(p2, dims, spacing)
        comp = compose(f1, f2)                   # p2 applied to the image first
        m = pullback_matrix(p2.angles(), p2.translations(), dims, spacing) @ \
            pullback_matrix(p1.angles(), p1.translations(), dims, spacing)
        expected = torch.from_numpy(field_from_matrix(m, dims).astype(np.float32))
        interior = (slice(None), slice(2, -2), slice(2, -2), slice(2, -2))
        assert float((comp.map[interior] - expected[interior]).abs().max()) < 0.02

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            compose(identity_field((4, 4, 4)), identity_field((5, 4, 4)))


class TestFlatten:
    def test_rigid_roundtrip(self):
        p = Rigid6((1.0, 2.0, 3.0), (4.0, 5.0, 6.0))
        v = flatten_params(p)
        assert v.shape == (6,)
        assert torch.equal(v, torch.tensor([1.0, 2, 3, 4, 5, 6]))
        q = unflatten_params(v, "rigid6")
        assert torch.equal(q.angles_deg, p.angles_deg)
        assert torch.equal(q.translation_mm, p.translation_mm)

    def test_bspline_roundtrip(self):
        g = BSplineGrid(torch.randn(3, 2, 2, 2), 15)
        v = flatten_params(g)
        assert v.numel() == 24
        q = unflatten_params(v, "bspline", (3, 2, 2, 2), 15)
        assert torch.equal(q.displacements_mm, g.displacements_mm)
        assert q.control_spacing_px == 15

    def test_dense_roundtrip(self):
        d = DenseParams(torch.randn(3, 4, 5, 6))
        v = flatten_params(d)
        q = unflatten_params(v, "dense", (3, 4, 5, 6))
        assert torch.equal(q.displacement_vox, d.displacement_vox)

    def test_hybrid_roundtrip(self):
        h = HybridParams(Rigid6((1, 2, 3), (4, 5, 6)), BSplineGrid(torch.randn(3, 2, 2, 2), 15))
        v = flatten_params(h)
        assert v.numel() == 30
        q = unflatten_params(v, "hybrid", (3, 2, 2, 2), 15, deform_tag="bspline")
        assert torch.equal(flatten_params(q), v)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            unflatten_params(torch.zeros(5), "rigid6")
        with pytest.raises(ValueError):
            unflatten_params(torch.zeros(10), "bspline", (3, 2, 2, 2))

    def test_random_roundtrip_all_tags(self):
        rng = np.random.default_rng(9)
        for _ in range(5):
            p = Rigid6(tuple(rng.normal(size=3)), tuple(rng.normal(size=3)))
            assert torch.equal(flatten_params(unflatten_params(flatten_params(p), "rigid6")),
                               flatten_params(p))


class TestIdentityParams:
    def test_shapes(self):
        assert params_tag(identity_params("rigid6", (8, 8, 8))) == "rigid6"
        b = identity_params("bspline", (48, 48, 48), 15)
        assert b.grid_dims == (7, 7, 7)
        d = identity_params("dense", (8, 9, 10))
        assert d.displacement_vox.shape == (3, 8, 9, 10)
        with pytest.raises(ValueError):
            identity_params("hybrid", (8, 8, 8))


class TestHybridField:
    def test_rigid_first_ordering(self):
        from msode.volume import Volume3D, warp
        dims = (16, 16, 16)
        g = identity_grid(dims)
        c = torch.tensor([8.0, 8.0, 8.0]).view(3, 1, 1, 1)
        vol = Volume3D(torch.exp(-((g - c) ** 2).sum(0) / 18.0).unsqueeze(0))
        rigid = Rigid6((0, 0, 0), (0, 0, 2.0))
        gd = bspline_grid_dims(dims, 15)
        ctrl = torch.zeros(3, *gd)
        ctrl[1] = 1.5
        hyb = HybridParams(rigid, BSplineGrid(ctrl, 15))
        f = to_field(hyb, dims, (1.0, 1.0, 1.0))
        moved_once = warp(vol, f)
        moved_twice = warp(warp(vol, rigid_to_field(rigid, dims, (1, 1, 1))),
                           bspline_to_field(hyb.deform, dims, (1, 1, 1)))
        interior = (slice(None), slice(3, -3), slice(3, -3), slice(3, -3))
        assert float((moved_once.data[interior] - moved_twice.data[interior]).abs().max()) < 0.03


class TestParamsIO:
    def test_rigid_roundtrip(self, tmp_path):
        p = Rigid6((1.0, -2.0, 3.0), (0.5, 0.25, -0.125))
        save_params(p, tmp_path / "p.json")
        q = load_params(tmp_path / "p.json")
        assert torch.equal(flatten_params(q), flatten_params(p))

    def test_bspline_roundtrip(self, tmp_path):
        g = BSplineGrid(torch.randn(3, 4, 5, 6), 12)
        save_params(g, tmp_path / "g.json")
        q = load_params(tmp_path / "g.json")
        assert torch.equal(q.displacements_mm, g.displacements_mm)
        assert q.control_spacing_px == 12

    def test_dense_roundtrip(self, tmp_path):
        d = DenseParams(torch.randn(3, 4, 4, 4))
        save_params(d, tmp_path / "d.json")
        q = load_params(tmp_path / "d.json")
        assert torch.equal(q.displacement_vox, d.displacement_vox)

    def test_hybrid_roundtrip(self, tmp_path):
        h = HybridParams(Rigid6((1, 2, 3), (4, 5, 6)), DenseParams(torch.randn(3, 4, 4, 4)))
        save_params(h, tmp_path / "h.json")
        q = load_params(tmp_path / "h.json")
        assert torch.equal(flatten_params(q), flatten_params(h))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="absent.json"):
            load_params(tmp_path / "absent.json")
