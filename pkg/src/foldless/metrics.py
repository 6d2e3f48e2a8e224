"""Deformation quality: Jacobian determinants, folding fraction, Dice, rasters."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ndtensor import ShapeError, Tensor

__all__ = [
    "JacobianReport",
    "EvalReport",
    "jacobian_det_map",
    "folding_fraction",
    "jacobian_report",
    "dice",
    "evaluate",
    "parse_slice",
    "grid_polylines",
    "render_grid",
    "render_det",
    "write_pgm",
    "write_ppm",
    "read_pnm",
]


def _field_array(u) -> np.ndarray:
    u = np.asarray(u.data if isinstance(u, Tensor) else u)
    d = u.shape[0]
    if d not in (2, 3) or u.ndim != d + 1:
        raise ShapeError(f"expected a displacement field [d, *dims] with d in (2, 3), got {u.shape}")
    return u


def jacobian_det_map(u) -> np.ndarray:
    """``det(I + Du)`` per voxel.

    Forward differences; the last index along each axis reuses the preceding
    difference so the map covers every voxel.
    """
    u = _field_array(u)
    d = u.shape[0]
    if any(n < 2 for n in u.shape[1:]):
        raise ShapeError(f"every extent must be >= 2, got {u.shape[1:]}")
    # J[c][a] = delta_ca + du_c/dp_a
    J = [[None] * d for _ in range(d)]
    for a in range(d):
        df = np.diff(u, axis=a + 1)
        df = np.concatenate([df, np.take(df, [-1], axis=a + 1)], axis=a + 1)
        for c in range(d):
            J[c][a] = df[c] + (1.0 if c == a else 0.0)
    if d == 2:
        return J[0][0] * J[1][1] - J[0][1] * J[1][0]
    return (J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1])
            - J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0])
            + J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]))


def folding_fraction(det_map) -> float:
    """Fraction of voxels with strictly negative determinant."""
    det_map = np.asarray(det_map)
    return float(np.count_nonzero(det_map < 0)) / det_map.size


@dataclass
class JacobianReport:
    det_map: np.ndarray
    folding_fraction: float
    min_det: float
    voxel_count: int


def jacobian_report(u) -> JacobianReport:
    det = jacobian_det_map(u)
    return JacobianReport(det, folding_fraction(det), float(det.min()), int(det.size))


def dice(a, b, label: int) -> float:
    """``2|A n B| / (|A| + |B|)`` for ``A = {a == label}``, ``B = {b == label}``.

    Two empty masks score 1.0.
    """
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"dice: shape mismatch {a.shape} vs {b.shape}")
    A, B = a == label, b == label
    total = int(A.sum()) + int(B.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(A & B)) / total


@dataclass
class EvalReport:
    folding: list[float]
    min_det: list[float]
    dice: list[dict[int, float]] = field(default_factory=list)

    @property
    def mean_P(self) -> float:
        return float(np.mean(self.folding))

    @property
    def std_P(self) -> float:
        """Population standard deviation."""
        return float(np.std(self.folding))

    @property
    def labels(self) -> list[int]:
        return sorted({k for row in self.dice for k in row})

    def mean_dice_per_label(self) -> dict[int, float]:
        return {k: float(np.mean([row[k] for row in self.dice if k in row])) for k in self.labels}

    @property
    def mean_dice(self) -> float:
        """Mean over pairs of the per-pair mean over labels."""
        if not self.dice:
            return math.nan
        return float(np.mean([np.mean(list(row.values())) for row in self.dice if row]))

    def write_csv(self, path) -> None:
        labels = self.labels
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["pair", "P", "min_det"] + [f"dice_{k}" for k in labels])
            for i, (p, m) in enumerate(zip(self.folding, self.min_det)):
                row = self.dice[i] if i < len(self.dice) else {}
                w.writerow([i, repr(p), repr(m)] + [repr(row[k]) if k in row else "" for k in labels])

    def summary(self) -> dict:
        out = {"pairs": len(self.folding), "mean_P": self.mean_P, "std_P": self.std_P}
        if self.dice:
            out["mean_dice"] = self.mean_dice
            out["mean_dice_per_label"] = {str(k): v for k, v in self.mean_dice_per_label().items()}
        return out


def evaluate(params, pairs, mode: str | None = None) -> EvalReport:
    """Predict each pair, then collect folding fraction and per-label Dice.

    Labels scored are the nonzero ids present in either label map of the pair.
    """
    from .stn import warp_labels
    from .trainer import predict

    report = EvalReport([], [])
    for pair in pairs:
        u, _ = predict(params, pair.x, pair.y, mode)
        rep = jacobian_report(u)
        report.folding.append(rep.folding_fraction)
        report.min_det.append(rep.min_det)
        if pair.labels_x is not None and pair.labels_y is not None:
            warped = warp_labels(pair.labels_x, u)
            ids = (set(np.unique(pair.labels_x)) | set(np.unique(pair.labels_y))) - {0}
            report.dice.append({int(i): dice(warped, pair.labels_y, i) for i in sorted(ids)})
    return report


# ----------------------------------------------------------------------------
# rendering


def parse_slice(spec, ndim: int) -> tuple[int, int] | None:
    """``"axis:index"`` or ``(axis, index)``; ``None`` for 2D data."""
    if spec is None:
        if ndim == 3:
            raise ValueError("a 3D field needs a slice 'axis:index'")
        return None
    if isinstance(spec, str):
        try:
            axis, index = (int(s) for s in spec.split(":"))
        except ValueError:
            raise ValueError(f"slice must look like 'axis:index', got {spec!r}") from None
    else:
        axis, index = spec
    return axis, index


def _plane(arr: np.ndarray, ndim: int, spec, lead: int):
    """Select the 2D plane; ``lead`` leading non-spatial axes are kept."""
    sl = parse_slice(spec, ndim)
    if ndim == 2:
        return arr, (0, 1)
    axis, index = sl
    dims = arr.shape[lead:]
    if not 0 <= axis < 3 or not 0 <= index < dims[axis]:
        raise IndexError(f"slice {axis}:{index} out of range for dims {dims}")
    plane = np.take(arr, index, axis=lead + axis)
    return plane, tuple(a for a in range(3) if a != axis)


def _draw_segment(canvas: np.ndarray, p0, p1) -> None:
    h, w = canvas.shape
    steps = int(math.ceil(2 * max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1])))) + 1
    t = np.linspace(0.0, 1.0, steps + 1)
    r = np.floor(p0[0] + t * (p1[0] - p0[0]) + 0.5).astype(np.intp)
    c = np.floor(p0[1] + t * (p1[1] - p0[1]) + 0.5).astype(np.intp)
    keep = (r >= 0) & (r < h) & (c >= 0) & (c < w)
    canvas[r[keep], c[keep]] = 0


def grid_polylines(u, slice_spec=None, spacing: int = 8):
    """Deformed grid lines on the chosen plane as ``(row_lines, col_lines)``.

    Each line is an ``[m, 2]`` array of in-plane positions ``p + u(p)``.
    """
    u = _field_array(u)
    d = u.shape[0]
    if spacing < 2:
        raise ValueError(f"grid spacing must be >= 2, got {spacing}")
    plane, axes = _plane(u, d, slice_spec, 1)
    comps = plane[list(axes)].astype(np.float64)
    h, w = plane.shape[1:]
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pos_r, pos_c = rr + comps[0], cc + comps[1]
    rows = [np.stack([pos_r[i], pos_c[i]], axis=1) for i in range(0, h, spacing)]
    cols = [np.stack([pos_r[:, j], pos_c[:, j]], axis=1) for j in range(0, w, spacing)]
    return rows, cols


def render_grid(u, slice_spec=None, spacing: int = 8) -> np.ndarray:
    """Grayscale raster (white background, black lines) of the deformed grid."""
    rows, cols = grid_polylines(u, slice_spec, spacing)
    h, w = len(cols[0]), len(rows[0])
    canvas = np.full((h, w), 255, dtype=np.uint8)
    for line in rows + cols:
        for p0, p1 in zip(line[:-1], line[1:]):
            _draw_segment(canvas, p0, p1)
    return canvas


def render_det(det_map, slice_spec=None) -> np.ndarray:
    """RGB raster: determinant clipped to [0, 2] as gray, negatives pure red."""
    det_map = np.asarray(det_map, dtype=np.float64)
    plane, _ = _plane(det_map, det_map.ndim, slice_spec, 0)
    gray = np.floor(np.clip(plane, 0.0, 2.0) / 2.0 * 255.0 + 0.5).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    rgb[plane < 0] = (255, 0, 0)
    return rgb


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise ShapeError(f"PGM needs a 2D array, got {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"PPM needs an [h, w, 3] array, got {img.shape}")
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a binary P5/P6 file written by :func:`write_pgm` / :func:`write_ppm`."""
    raw = Path(path).read_bytes()
    magic, w, h, maxval = raw.split(maxsplit=4)[:4]
    if magic not in (b"P5", b"P6") or int(maxval) != 255:
        raise ValueError(f"{path}: unsupported PNM header")
    header_len = len(b" ".join([magic, w, h, maxval])) + 1
    w, h = int(w), int(h)
    channels = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw[header_len:], dtype=np.uint8)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape).copy()
