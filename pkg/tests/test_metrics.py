from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foldless import metrics
from foldless.dataio import fold_band_field
from foldless.ndtensor import ShapeError
from foldless.stn import identity_grid

GOLDEN = Path(__file__).parent / "golden"


def linear_field(A, dims):
    g = identity_grid(dims).astype(np.float64)
    return np.tensordot(A, g, axes=1)


def dice_oracle(a, b, label):
    A = {p for p in np.ndindex(a.shape) if a[p] == label}
    B = {p for p in np.ndindex(b.shape) if b[p] == label}
    if not A and not B:
        return 1.0
    return 2 * len(A & B) / (len(A) + len(B))


class TestJacobian:
    @pytest.mark.parametrize("dims", [(5, 6), (4, 5, 6)])
    def test_zero_field(self, dims):
        det = metrics.jacobian_det_map(np.zeros((len(dims),) + dims))
        np.testing.assert_array_equal(det, 1.0)
        assert metrics.folding_fraction(det) == 0.0

    @pytest.mark.parametrize("d", [2, 3])
    def test_linear_field_gives_det_of_I_plus_A(self, d):
        rng = np.random.default_rng(d)
        dims = (8,) * d
        for _ in range(10):
            A = rng.uniform(-0.5, 0.5, (d, d))
            det = metrics.jacobian_det_map(linear_field(A, dims).astype(np.float32))
            np.testing.assert_allclose(det, np.linalg.det(np.eye(d) + A), rtol=1e-5)

    def test_fold_band(self):
        u = fold_band_field((32, 32), (10, 14), (8, 20))
        det = metrics.jacobian_det_map(u)
        expected = np.ones((32, 32))
        expected[10:14, 8:20] = -1.0
        np.testing.assert_array_equal(det, expected)
        assert metrics.folding_fraction(det) == 48 / 1024

    def test_zero_det_is_not_folding(self):
        assert metrics.folding_fraction(np.array([0.0, 1.0, -0.0])) == 0.0

    def test_report(self):
        rep = metrics.jacobian_report(fold_band_field((16, 16), (4, 6)))
        assert rep.voxel_count == 256 and rep.min_det == -1.0
        assert rep.folding_fraction == 32 / 256

    def test_bad_field(self):
        with pytest.raises(ShapeError):
            metrics.jacobian_det_map(np.zeros((2, 4, 4, 4)))
        with pytest.raises(ShapeError):
            metrics.jacobian_det_map(np.zeros((2, 1, 4)))


class TestDice:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31), st.sampled_from([(5,), (6, 7), (4, 3, 5)]), st.integers(0, 3))
    def test_matches_set_oracle(self, seed, shape, label):
        rng = np.random.default_rng(seed)
        a, b = rng.integers(0, 3, shape), rng.integers(0, 3, shape)
        assert metrics.dice(a, b, label) == dice_oracle(a, b, label)

    def test_edge_cases(self):
        a = np.array([[1, 1], [0, 0]])
        assert metrics.dice(a, a, 1) == 1.0
        assert metrics.dice(a, 1 - a, 1) == 0.0
        assert metrics.dice(a, a, 7) == 1.0
        with pytest.raises(ShapeError):
            metrics.dice(a, np.zeros((3, 3)), 1)


class TestEvalReport:
    def test_statistics(self, tmp_path):
        rep = metrics.EvalReport([0.0, 0.02], [0.5, -1.0], [{1: 1.0, 2: 0.5}, {1: 0.5}])
        assert rep.mean_P == pytest.approx(0.01)
        assert rep.std_P == pytest.approx(0.01)  # population, not sample
        assert rep.mean_dice_per_label() == {1: 0.75, 2: 0.5}
        assert rep.mean_dice == pytest.approx((0.75 + 0.5) / 2)
        rep.write_csv(tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "pair,P,min_det,dice_1,dice_2"
        assert lines[2].endswith(",")
        assert rep.summary()["pairs"] == 2


class TestRender:
    def test_zero_grid_golden(self):
        img = metrics.render_grid(np.zeros((2, 64, 64)), None, 8)
        expected = np.full((64, 64), 255, np.uint8)
        expected[::8] = 0
        expected[:, ::8] = 0
        np.testing.assert_array_equal(img, expected)
        np.testing.assert_array_equal(metrics.read_pnm(GOLDEN / "zero_grid_64x64_s8.pgm"), img)

    def test_zero_grid_golden_bytes(self, tmp_path):
        metrics.write_pgm(tmp_path / "g.pgm", metrics.render_grid(np.zeros((2, 64, 64)), None, 8))
        assert (tmp_path / "g.pgm").read_bytes() == (GOLDEN / "zero_grid_64x64_s8.pgm").read_bytes()

    def test_zero_det_golden_bytes(self, tmp_path):
        img = metrics.render_det(metrics.jacobian_det_map(np.zeros((2, 64, 64))))
        assert (img == 128).all()
        metrics.write_ppm(tmp_path / "d.ppm", img)
        assert (tmp_path / "d.ppm").read_bytes() == (GOLDEN / "zero_det_64x64.ppm").read_bytes()

    def test_3d_slice_golden(self, tmp_path):
        metrics.write_pgm(tmp_path / "g.pgm", metrics.render_grid(np.zeros((3, 16, 16, 16)), "1:5", 4))
        assert (tmp_path / "g.pgm").read_bytes() == (GOLDEN / "zero_grid_16cube_slice1-5_s4.pgm").read_bytes()

    def test_fold_band_red_exactly_on_negative_mask(self):
        det = metrics.jacobian_det_map(fold_band_field((32, 32), (10, 14), (8, 20)))
        img = metrics.render_det(det)
        red = (img[..., 0] == 255) & (img[..., 1] == 0) & (img[..., 2] == 0)
        np.testing.assert_array_equal(red, det < 0)

    def test_det_gray_mapping(self):
        img = metrics.render_det(np.array([[0.0, 1.0, 2.0, 5.0]]))
        assert img[0, :, 0].tolist() == [0, 128, 255, 255]

    def test_grid_moves_with_translation(self):
        u = np.zeros((2, 32, 32))
        u[0] = 2.0
        img = metrics.render_grid(u, None, 8)
        assert (img[2, :] == 0).all() and (img[10, 1:] == 0).all()

    def test_slice_errors(self):
        with pytest.raises(ValueError):
            metrics.render_grid(np.zeros((3, 8, 8, 8)))
        with pytest.raises(IndexError):
            metrics.render_grid(np.zeros((3, 8, 8, 8)), "1:8")
        with pytest.raises(ValueError):
            metrics.parse_slice("x", 3)

    def test_pnm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
        metrics.write_ppm(tmp_path / "a.ppm", img)
        np.testing.assert_array_equal(metrics.read_pnm(tmp_path / "a.ppm"), img)
