"""Finite-difference verification of every differentiable operation.

Each check builds a scalar objective from random 64-bit inputs, runs the tape
backward, and compares against central differences with step ``h``. Inputs
for the warp are kept away from integer sample positions, where the
interpolation is only piecewise smooth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ndtensor as nt
from .losses import LossConfig, baseline_loss, cc_loss, cycle_loss, smoothness_loss
from .nets import ArchConfig, deformation_forward, init_params, refine_forward
from .stn import warp

__all__ = ["CheckResult", "check_names", "relative_error", "finite_difference", "check_op", "run_gradcheck"]

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    op: str
    max_rel_error: float
    passed: bool

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.op:<22} max_rel_err={self.max_rel_error:.3e}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` is ``1e-6 * max|n|`` so entries that are zero up to round-off do
    not dominate.
    """
    floor = 1e-6 * float(np.abs(numeric).max()) + 1e-12
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def finite_difference(fn: Callable[..., nt.Tensor], arrays: list[np.ndarray], which: int, h: float = STEP):
    base = [a.copy() for a in arrays]
    target = base[which]
    grad = np.zeros_like(target)
    for idx in np.ndindex(target.shape):
        old = target[idx]
        target[idx] = old + h
        fp = fn(*[nt.Tensor(a) for a in base]).item()
        target[idx] = old - h
        fm = fn(*[nt.Tensor(a) for a in base]).item()
        target[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def check_op(name: str, fn, arrays: list[np.ndarray], corrupt: bool = False) -> CheckResult:
    """Compare tape gradients of ``fn(*arrays)`` against central differences."""
    with nt.precision(64):
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        tensors = [nt.Tensor(a, requires_grad=True) for a in arrays]
        with nt.Tape() as tape:
            out = fn(*tensors)
        tape.backward(out)
        worst = 0.0
        for i, t in enumerate(tensors):
            analytic = t.grad
            if corrupt:
                analytic = analytic * 1.01 + 1e-3
            worst = max(worst, relative_error(analytic, finite_difference(fn, arrays, i)))
    return CheckResult(name, worst, worst < TOLERANCE)


def _weighted(rng, shape):
    """Fixed random weights so a vector output becomes a generic scalar objective."""
    w = nt.Tensor(rng.standard_normal(shape))
    return lambda t: nt.sum_(nt.mul(t, w))


def _fractional_field(rng, dims, span=2.0):
    """Displacements whose sample points sit strictly between grid nodes."""
    whole = rng.integers(-int(span), int(span) + 1, size=(len(dims),) + dims)
    return whole + rng.uniform(0.15, 0.85, size=(len(dims),) + dims)


def _build_checks(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    checks = {}
    x = rng.standard_normal((2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    checks["conv_nd"] = (lambda x, k, b: nt.mean(nt.square(nt.conv_nd(x, k, b))), [x, k, b])
    checks["conv_nd_stride2"] = (lambda x, k, b: nt.mean(nt.square(nt.conv_nd(x, k, b, stride=2))), [x, k, b])
    x3 = rng.standard_normal((2, 4, 4, 4))
    k3 = rng.standard_normal((2, 2, 3, 3, 3))
    checks["conv_nd_3d"] = (lambda x, k: nt.mean(nt.square(nt.conv_nd(x, k, stride=2))), [x3, k3])

    a = rng.standard_normal((3, 4, 4))
    a[np.abs(a) < 0.05] = 0.5
    w = _weighted(rng, (3, 4, 4))
    checks["leaky_relu"] = (lambda a: w(nt.leaky_relu(a, 0.2)), [a])
    wu = _weighted(rng, (2, 6, 6))
    checks["upsample_nearest"] = (lambda a: wu(nt.upsample_nearest(a, 2)), [rng.standard_normal((2, 3, 3))])
    p, q = rng.standard_normal((2, 3, 3)), rng.standard_normal((2, 3, 3))
    wc = _weighted(rng, (4, 3, 3))
    checks["concat_channels"] = (lambda p, q: wc(nt.concat_channels(p, q)), [p, q])
    wm = _weighted(rng, (2, 3, 3))
    checks["add_sub_mul"] = (lambda p, q: wm(nt.mul(nt.add(p, q), nt.sub(p, nt.scalar_mul(q, 0.5)))), [p, q])
    checks["square_mean_sum"] = (lambda p: nt.add(nt.mean(nt.square(p)), nt.sum_(p)), [p])

    dims = (6, 7)
    img = rng.random((1,) + dims)
    u = _fractional_field(rng, dims)
    ww = _weighted(rng, (1,) + dims)
    checks["warp_image"] = (lambda im: ww(warp(im, nt.Tensor(u))), [img])
    checks["warp_field"] = (lambda f: ww(warp(nt.Tensor(img), f)), [u])
    img3 = rng.random((1, 4, 4, 4))
    u3 = _fractional_field(rng, (4, 4, 4), span=1.0)
    ww3 = _weighted(rng, (1, 4, 4, 4))
    checks["warp_3d"] = (lambda im, f: ww3(warp(im, f)), [img3, u3])

    y, yh = rng.random((1, 8, 9)), rng.random((1, 8, 9))
    checks["cc_loss"] = (lambda y, yh: cc_loss(y, yh, window=5), [y, yh])
    checks["smoothness_loss"] = (lambda f: smoothness_loss(f), [rng.standard_normal((2, 5, 6))])

    cfg = LossConfig(lam=2.0, cc_window=3)
    xs, ys = rng.random((1, 8, 8)), rng.random((1, 8, 8))
    uf = _fractional_field(rng, (8, 8), span=1.0)
    ub = _fractional_field(rng, (8, 8), span=1.0)
    checks["baseline_loss"] = (lambda f: baseline_loss(nt.Tensor(xs), nt.Tensor(ys), f, cfg), [uf])

    def cyc(f, g):
        x_t, y_t = nt.Tensor(xs), nt.Tensor(ys)
        y_tilde = warp(x_t, f)
        return cycle_loss(x_t, y_t, f, warp(y_tilde, g), g, cfg, y_tilde=y_tilde)

    checks["cycle_loss"] = (cyc, [uf, ub])

    arch = ArchConfig(ndim=2, levels=1, base_channels=2, refine=True, refine_hidden=3)
    with nt.precision(64):
        params = init_params(int(rng.integers(1 << 31)), arch)
    for group in (params.deformation, params.refine):
        for t in group.values():
            t.data[...] = rng.standard_normal(t.shape) * 0.5
    pair = rng.random((2, 4, 4))
    wd = _weighted(rng, (2, 4, 4))
    enc = params.deformation["enc1.w"].data.copy()

    def unet(hw):
        params.deformation["enc1.w"] = hw
        return wd(deformation_forward(params, nt.Tensor(pair)))

    checks["deformation_forward"] = (unet, [enc])
    r1 = params.refine["r1.w"].data.copy()
    field = rng.standard_normal((2, 4, 4))

    def refine(rw, f):
        params.refine["r1.w"] = rw
        return wd(refine_forward(params.refine, f))

    checks["refine_forward"] = (refine, [r1, field])
    return checks


def check_names() -> list[str]:
    with nt.precision(64):
        return list(_build_checks(np.random.default_rng(0)))


def run_gradcheck(seed: int = 0, corrupt: str | None = None) -> list[CheckResult]:
    """All registered checks; ``corrupt`` names one op whose gradient is perturbed (test hook)."""
    rng = np.random.default_rng(seed)
    with nt.precision(64):
        checks = _build_checks(rng)
    if corrupt is not None and corrupt not in checks:
        raise KeyError(f"unknown op {corrupt!r}; known: {sorted(checks)}")
    return [check_op(name, fn, arrays, corrupt=(name == corrupt)) for name, (fn, arrays) in checks.items()]
