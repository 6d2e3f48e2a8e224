"""Similarity and smoothness terms, and the three training objectives built from them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .ndtensor import ShapeError, Tensor, add, as_tensor, record, scalar_mul
from .stn import warp

__all__ = [
    "LossConfig",
    "LossTerms",
    "box_sum",
    "cc_loss",
    "smoothness_loss",
    "baseline_terms",
    "baseline_loss",
    "cycle_terms",
    "cycle_loss",
]


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    cc_window: int = 9
    cc_epsilon: float = 1e-5

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.cc_window < 3 or self.cc_window % 2 == 0:
            raise ValueError(f"cc_window must be odd and >= 3, got {self.cc_window}")
        if self.cc_epsilon <= 0:
            raise ValueError(f"cc_epsilon must be > 0, got {self.cc_epsilon}")


class LossTerms(NamedTuple):
    total: Tensor
    cc: Tensor
    smooth: Tensor


def box_sum(a: np.ndarray, window: int) -> np.ndarray:
    """Sum over the centred ``window``-cube at every voxel, zero outside the array.

    Computed in float64 with running sums along each axis.
    """
    r = window // 2
    out = np.asarray(a, dtype=np.float64)
    for ax in range(out.ndim):
        pad = [(0, 0)] * out.ndim
        pad[ax] = (r + 1, r)
        c = np.cumsum(np.pad(out, pad), axis=ax)
        n = out.shape[ax]
        out = np.take(c, np.arange(window, window + n), axis=ax) - np.take(c, np.arange(n), axis=ax)
    return out


def cc_loss(y, y_hat, window: int = 9, eps: float = 1e-5) -> Tensor:
    """Negative mean squared local normalised cross-correlation.

    Window statistics use only voxels inside the image, so a window that is
    constant inside the domain has zero variance and contributes 0. The value
    lies in ``[-1, 0]``.
    """
    y, y_hat = as_tensor(y), as_tensor(y_hat)
    if y.shape != y_hat.shape:
        raise ShapeError(f"cc_loss: shape mismatch {y.shape} vs {y_hat.shape}")
    dtype = y_hat.dtype
    # CC ignores a global shift; anchoring each image at one of its own values
    # keeps the running sums small and makes constant inputs exactly zero.
    I = y.data.astype(np.float64)
    J = y_hat.data.astype(np.float64)
    I = I - I.flat[0]
    J = J - J.flat[0]
    n = box_sum(np.ones(I.shape), window)
    sI, sJ = box_sum(I, window), box_sum(J, window)
    sII, sJJ, sIJ = box_sum(I * I, window), box_sum(J * J, window), box_sum(I * J, window)
    cross = sIJ - sI * sJ / n
    vI_raw = sII - sI * sI / n
    vJ_raw = sJJ - sJ * sJ / n
    vI, vJ = np.maximum(vI_raw, 0.0), np.maximum(vJ_raw, 0.0)
    den = vI * vJ + eps
    cc = cross * cross / den
    count = cc.size
    value = np.asarray(-cc.mean(), dtype=dtype)

    def backward(g):
        # d(-mean cc)/d(window statistics), then adjoint of the symmetric box sum
        gcc = -float(np.asarray(g).item()) / count
        g_cross = gcc * 2 * cross / den
        g_vI = np.where(vI_raw > 0, -gcc * cross * cross * vJ / den ** 2, 0.0)
        g_vJ = np.where(vJ_raw > 0, -gcc * cross * cross * vI / den ** 2, 0.0)
        out = []
        for t, X, Y, sX, sY, g_vX in ((y, I, J, sI, sJ, g_vI), (y_hat, J, I, sJ, sI, g_vJ)):
            if not t.requires_grad:
                out.append(None)
                continue
            g_s = -g_cross * sY / n - 2 * g_vX * sX / n
            grad = box_sum(g_s, window) + 2 * X * box_sum(g_vX, window) + Y * box_sum(g_cross, window)
            grad.flat[0] -= grad.sum()  # adjoint of the anchoring shift
            out.append(grad.astype(t.dtype))
        return out

    return record("cc_loss", (y, y_hat), value, backward)


def smoothness_loss(u) -> Tensor:
    """Mean squared forward difference over all components, axes and valid positions."""
    u = as_tensor(u)
    d = u.ndim - 1
    diffs = [np.diff(u.data, axis=ax) for ax in range(1, d + 1)]
    count = sum(df.size for df in diffs)
    value = np.asarray(sum(float((df.astype(np.float64) ** 2).sum()) for df in diffs) / count, dtype=u.dtype)

    def backward(g):
        grad = np.zeros(u.shape, dtype=u.dtype)
        scale = u.dtype.type(2 * float(np.asarray(g).item()) / count)
        for ax, df in zip(range(1, d + 1), diffs):
            hi = [slice(None)] * u.ndim
            lo = [slice(None)] * u.ndim
            hi[ax] = slice(1, None)
            lo[ax] = slice(None, -1)
            grad[tuple(hi)] += scale * df
            grad[tuple(lo)] -= scale * df
        return (grad,)

    return record("smoothness_loss", (u,), value, backward)


def baseline_terms(x, y, u, cfg: LossConfig = LossConfig()) -> LossTerms:
    y_tilde = warp(x, u)
    cc = cc_loss(y, y_tilde, cfg.cc_window, cfg.cc_epsilon)
    smooth = smoothness_loss(u)
    return LossTerms(add(cc, scalar_mul(smooth, cfg.lam)), cc, smooth)


def baseline_loss(x, y, u, cfg: LossConfig = LossConfig()) -> Tensor:
    """``CC(y, warp(x, u)) + lam * ||Du||``."""
    return baseline_terms(x, y, u, cfg).total


def cycle_terms(x, y, u_fwd, x_tilde, u_bwd, cfg: LossConfig = LossConfig(),
                y_tilde=None) -> LossTerms:
    """Forward and backward similarity plus both smoothness terms.

    ``y_tilde`` may be passed to reuse the forward warp already computed by the caller.
    """
    if y_tilde is None:
        y_tilde = warp(x, u_fwd)
    cc = add(cc_loss(y, y_tilde, cfg.cc_window, cfg.cc_epsilon),
             cc_loss(x, x_tilde, cfg.cc_window, cfg.cc_epsilon))
    smooth = add(smoothness_loss(u_fwd), smoothness_loss(u_bwd))
    return LossTerms(add(cc, scalar_mul(smooth, cfg.lam)), cc, smooth)


def cycle_loss(x, y, u_fwd, x_tilde, u_bwd, cfg: LossConfig = LossConfig(), y_tilde=None) -> Tensor:
    return cycle_terms(x, y, u_fwd, x_tilde, u_bwd, cfg, y_tilde).total
