"""Sampling unit of the spatial transformer.

A displacement field ``u`` has shape ``[d, *dims]`` in voxel units; component
``c`` moves along array axis ``c``. Warping samples the source at ``p + u(p)``,
so ``warp(x, u)`` approximates ``x o phi^-1`` with ``phi^-1 = Id + u``.
"""

from __future__ import annotations

import itertools

import numpy as np

from .ndtensor import ShapeError, Tensor, as_tensor, record

__all__ = ["identity_grid", "warp", "warp_labels", "sample_positions"]


def identity_grid(dims) -> np.ndarray:
    """Coordinates ``[d, *dims]`` with ``grid[:, p] == p``."""
    dims = tuple(int(n) for n in dims)
    if len(dims) not in (2, 3):
        raise ShapeError(f"identity_grid: expected 2 or 3 spatial dims, got {dims}")
    if any(n < 2 for n in dims):
        raise ShapeError(f"identity_grid: every extent must be >= 2, got {dims}")
    return np.stack(np.meshgrid(*[np.arange(n) for n in dims], indexing="ij"))


def _check_field(u: np.ndarray, dims: tuple[int, ...], what: str) -> None:
    if u.ndim != len(dims) + 1 or u.shape[0] != len(dims) or u.shape[1:] != dims:
        raise ShapeError(f"{what}: field of shape {u.shape} does not match image dims {dims}")


def sample_positions(u: np.ndarray) -> np.ndarray:
    """Absolute sampling coordinates ``p + u(p)``, unclamped."""
    return identity_grid(u.shape[1:]).astype(u.dtype) + u


def _cells(q: np.ndarray, dims: tuple[int, ...]):
    """Lower cell corner and fractional offset of each clamped sample.

    Integer sample points use the cell to their right, except on the last
    index where only the left cell exists.
    """
    i0s, ts, inside = [], [], []
    for a, n in enumerate(dims):
        qa = q[a]
        inside.append((qa >= 0) & (qa <= n - 1))
        qc = np.nan_to_num(np.clip(qa, 0, n - 1), nan=0.0)
        i0 = np.minimum(np.floor(qc).astype(np.intp), n - 2)
        i0s.append(i0)
        ts.append(qc - i0)
    return i0s, ts, inside


def warp(image, u) -> Tensor:
    """Multi-linear resampling of ``image`` at ``p + u(p)`` with border clamping.

    ``image`` is ``[C, *dims]`` or ``dims``; the result has the same layout.
    Differentiable with respect to both the image and the field.
    """
    image, u = as_tensor(image), as_tensor(u)
    d = u.shape[0] if u.ndim else 0
    dims = tuple(u.shape[1:])
    if d not in (2, 3):
        raise ShapeError(f"warp: field must have 2 or 3 components, got shape {u.shape}")
    squeeze = image.ndim == d
    if image.shape[image.ndim - d:] != dims or image.ndim not in (d, d + 1):
        raise ShapeError(f"warp: image dims {image.shape} do not match field dims {u.shape}")
    _check_field(u.data, dims, "warp")
    img = image.data[None] if squeeze else image.data
    n_ch = img.shape[0]
    dtype = img.dtype

    q = sample_positions(u.data)
    i0s, ts, inside = _cells(q, dims)
    one = dtype.type(1)
    corners = list(itertools.product((0, 1), repeat=d))
    out = np.zeros(img.shape, dtype=dtype)
    gathered = []
    for c in corners:
        idx = tuple(i0 + b for i0, b in zip(i0s, c))
        w = np.ones(dims, dtype=dtype)
        for b, t in zip(c, ts):
            w = w * (t if b else one - t)
        vals = img[(slice(None),) + idx]
        gathered.append((idx, vals))
        out += w * vals
    bad = ~np.isfinite(q).all(axis=0)
    if bad.any():
        out[:, bad] = np.nan  # let the caller's finiteness checks see it

    def backward(g):
        if squeeze:
            g = g[None]
        g_img = g_u = None
        if image.requires_grad:
            flat = np.zeros((n_ch, int(np.prod(dims))), dtype=np.float64)
            for c, (idx, _) in zip(corners, gathered):
                w = np.ones(dims, dtype=dtype)
                for b, t in zip(c, ts):
                    w = w * (t if b else one - t)
                lin = np.ravel_multi_index(idx, dims).ravel()
                for ch in range(n_ch):
                    flat[ch] += np.bincount(lin, weights=(w * g[ch]).ravel(), minlength=flat.shape[1])
            g_img = flat.astype(dtype).reshape(img.shape)
            if squeeze:
                g_img = g_img[0]
        if u.requires_grad:
            g_u = np.zeros(u.shape, dtype=dtype)
            for a in range(d):
                acc = np.zeros(img.shape, dtype=dtype)
                for c, (_, vals) in zip(corners, gathered):
                    w = np.ones(dims, dtype=dtype)
                    for b, (cb, t) in enumerate(zip(c, ts)):
                        if b == a:
                            w = w * (one if cb else -one)
                        else:
                            w = w * (t if cb else one - t)
                    acc += w * vals
                g_u[a] = (g * acc).sum(axis=0) * inside[a]
        return g_img, g_u

    return record("warp", (image, u), out[0] if squeeze else out, backward)


def warp_labels(mask, u) -> np.ndarray:
    """Nearest-neighbour warp of an integer label map; ties round half up."""
    mask = np.asarray(mask)
    u = np.asarray(u.data if isinstance(u, Tensor) else u)
    dims = mask.shape
    _check_field(u, dims, "warp_labels")
    if not np.isfinite(u).all():
        raise ValueError("warp_labels: field contains non-finite values")
    q = sample_positions(u.astype(np.float64))
    idx = tuple(np.clip(np.floor(q[a] + 0.5).astype(np.intp), 0, n - 1) for a, n in enumerate(dims))
    return mask[idx]
