import numpy as np
import pytest

from foldless import ndtensor as nt
from foldless.losses import (LossConfig, baseline_terms, box_sum, cc_loss, cycle_loss, cycle_terms,
                             smoothness_loss)
from foldless.ndtensor import Tape, Tensor
from foldless.stn import warp


def cc_oracle(I, J, window, eps):
    """Per-voxel loop over the in-domain part of each window."""
    r = window // 2
    vals = []
    for p in np.ndindex(I.shape):
        sl = tuple(slice(max(i - r, 0), i + r + 1) for i in p)
        a, b = I[sl].ravel(), J[sl].ravel()
        a, b = a - a.mean(), b - b.mean()
        cross = (a * b).sum()
        vals.append(cross ** 2 / ((a * a).sum() * (b * b).sum() + eps))
    return -np.mean(vals)


def f64(a):
    with nt.precision(64):
        return Tensor(a)


class TestBoxSum:
    def test_matches_loop(self):
        a = np.random.default_rng(0).random((5, 7))
        out = box_sum(a, 3)
        assert out[0, 0] == pytest.approx(a[:2, :2].sum())
        assert out[2, 3] == pytest.approx(a[1:4, 2:5].sum())

    def test_count_of_ones(self):
        out = box_sum(np.ones((4, 4, 4)), 3)
        assert out[0, 0, 0] == 8 and out[1, 1, 1] == 27


class TestCC:
    @pytest.mark.parametrize("window", [3, 5, 9])
    def test_matches_per_window_oracle(self, window):
        rng = np.random.default_rng(window)
        I, J = rng.random((1, 7, 8)), rng.random((1, 7, 8))
        got = cc_loss(f64(I), f64(J), window, 1e-5).item()
        assert got == pytest.approx(cc_oracle(I[0], J[0], window, 1e-5), rel=1e-10)

    def test_3d_oracle(self):
        rng = np.random.default_rng(9)
        I, J = rng.random((4, 5, 3)), rng.random((4, 5, 3))
        assert cc_loss(f64(I), f64(J), 3).item() == pytest.approx(cc_oracle(I, J, 3, 1e-5), rel=1e-10)

    def test_self_similarity_near_minus_one(self):
        I = np.random.default_rng(1).random((1, 16, 16))
        assert cc_loss(f64(I), f64(I)).item() == pytest.approx(-1.0, abs=1e-3)

    def test_affine_invariance(self):
        rng = np.random.default_rng(2)
        I, J = rng.random((1, 12, 12)), rng.random((1, 12, 12))
        base = cc_loss(f64(I), f64(J)).item()
        assert cc_loss(f64(I), f64(3.0 * J + 7.0)).item() == pytest.approx(base, rel=1e-3)
        assert cc_loss(f64(I), f64(-J)).item() == pytest.approx(base, rel=1e-3)

    def test_constant_image_gives_zero(self):
        I = np.random.default_rng(3).random((1, 10, 10))
        assert cc_loss(f64(I), f64(np.full((1, 10, 10), 0.4))).item() == 0.0

    def test_range(self):
        rng = np.random.default_rng(4)
        v = cc_loss(Tensor(rng.random((1, 20, 20))), Tensor(rng.random((1, 20, 20)))).item()
        assert -1.0 <= v <= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(nt.ShapeError):
            cc_loss(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 4, 5))))


class TestSmoothness:
    def test_single_step_example(self):
        u = np.zeros((2, 2, 2))
        u[0, 1, :] = 1.0  # two axis-0 differences of 1 out of 8 difference entries
        assert smoothness_loss(Tensor(u)).item() == pytest.approx(0.25)

    def test_constant_field_is_zero(self):
        assert smoothness_loss(Tensor(np.full((3, 4, 4, 4), 2.5))).item() == 0.0

    def test_quadratic_homogeneity(self):
        u = np.random.default_rng(5).standard_normal((2, 6, 6))
        base = smoothness_loss(f64(u)).item()
        assert smoothness_loss(f64(3.0 * u)).item() == pytest.approx(9.0 * base, rel=1e-12)

    def test_linear_field_value(self):
        g = np.stack(np.meshgrid(np.arange(5.0), np.arange(5.0), indexing="ij"))
        u = 0.5 * g[::-1]  # u0 = 0.5 * col, u1 = 0.5 * row
        # per component, one axis has differences 0.5 and the other 0
        assert smoothness_loss(f64(u)).item() == pytest.approx(0.125)


class TestComposite:
    def test_baseline_terms_sum(self):
        rng = np.random.default_rng(6)
        x, y = rng.random((1, 12, 12)), rng.random((1, 12, 12))
        u = rng.uniform(-1, 1, (2, 12, 12))
        t = baseline_terms(f64(x), f64(y), f64(u), LossConfig(lam=2.0))
        assert t.total.item() == pytest.approx(t.cc.item() + 2.0 * t.smooth.item(), rel=1e-12)

    def test_lambda_zero_is_pure_similarity(self):
        rng = np.random.default_rng(7)
        x, y, u = rng.random((1, 10, 10)), rng.random((1, 10, 10)), rng.standard_normal((2, 10, 10))
        t = baseline_terms(f64(x), f64(y), f64(u), LossConfig(lam=0.0))
        assert t.total.item() == t.cc.item()

    def test_cycle_identical_images_zero_fields(self):
        x = np.random.default_rng(8).random((1, 16, 16))
        z = np.zeros((2, 16, 16))
        val = cycle_loss(f64(x), f64(x), f64(z), f64(x), f64(z)).item()
        assert val == pytest.approx(-2.0, abs=2e-3)

    def test_cycle_reuses_forward_warp(self):
        rng = np.random.default_rng(9)
        x, y = rng.random((1, 10, 10)), rng.random((1, 10, 10))
        uf, ub = rng.uniform(-1, 1, (2, 10, 10)), rng.uniform(-1, 1, (2, 10, 10))
        with nt.precision(64):
            yt = warp(Tensor(x), Tensor(uf))
            xt = warp(yt, Tensor(ub))
            a = cycle_terms(Tensor(x), Tensor(y), Tensor(uf), xt, Tensor(ub))
            b = cycle_terms(Tensor(x), Tensor(y), Tensor(uf), xt, Tensor(ub), y_tilde=yt)
        assert a.total.item() == b.total.item()

    def test_cycle_gradient_reaches_forward_field_through_backward_warp(self):
        rng = np.random.default_rng(10)
        x = rng.random((1, 10, 10))
        uf = Tensor(rng.uniform(0.1, 0.9, (2, 10, 10)), requires_grad=True)
        ub = Tensor(rng.uniform(0.1, 0.9, (2, 10, 10)))
        with Tape() as tape:
            yt = warp(Tensor(x), uf)
            xt = warp(yt, ub)
            # only the backward similarity term depends on uf via y_tilde
            loss = cc_loss(Tensor(x), xt)
        tape.backward(loss)
        assert np.abs(uf.grad).max() > 0

    @pytest.mark.parametrize("kw", [{"lam": -1.0}, {"cc_window": 4}, {"cc_window": 1}, {"cc_epsilon": 0.0}])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            LossConfig(**kw)


def test_positive_affine_copy_is_minus_one():
    y = np.random.default_rng(11).random((1, 16, 16))
    assert cc_loss(f64(y), f64(0.5 * y + 0.1)).item() == pytest.approx(-1.0, abs=1e-3)


def test_constant_field_has_no_smoothness_cost():
    rng = np.random.default_rng(12)
    x, y = rng.random((1, 12, 12)), rng.random((1, 12, 12))
    u = np.full((2, 12, 12), 1.0)
    t = baseline_terms(f64(x), f64(y), f64(u), LossConfig(lam=4.0))
    with nt.precision(64):
        expected = cc_loss(Tensor(y), warp(Tensor(x), Tensor(u))).item()
    assert t.smooth.item() == 0.0 and t.total.item() == pytest.approx(expected, rel=1e-12)


def test_cycle_with_inverse_translations():
    g = np.meshgrid(np.arange(24.0), np.arange(24.0), indexing="ij")
    x = np.sin(g[0] / 2.5)[None] + np.cos(g[1] / 3.0)[None]
    uf = np.stack([np.full((24, 24), 1.0), np.zeros((24, 24))])
    with nt.precision(64):
        y = warp(Tensor(x), Tensor(uf))
        yt = warp(Tensor(x), Tensor(uf))
        xt = warp(yt, Tensor(-uf))
        t = cycle_terms(Tensor(x), y, Tensor(uf), xt, Tensor(-uf), LossConfig(), y_tilde=yt)
    assert t.cc.item() == pytest.approx(-2.0, abs=0.05)
