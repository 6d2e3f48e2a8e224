"""Synthetic registration pairs, preprocessing, and the volume file format.

Volume files are a text header (``*.vol``) with a fixed key order next to a
raw little-endian payload (``*.raw``)::

    format: foldless-volume
    version: 1
    dims: 2 64 64
    dtype: f32
    order: row-major
    spacing: 1 1
    payload: u.raw
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import folding_fraction, jacobian_det_map
from .stn import warp, warp_labels

__all__ = [
    "SynthConfig",
    "RegistrationPair",
    "VolumeFormatError",
    "SynthesisError",
    "synth_pair",
    "synth_dataset",
    "smooth_noise",
    "box_blur",
    "fold_band_field",
    "normalize_intensity",
    "center_crop",
    "save_volume",
    "load_volume",
    "write_manifest",
    "read_manifest",
    "load_pairs",
]

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_HEADER_KEYS = ("format", "version", "dims", "dtype", "order", "spacing", "payload")


class VolumeFormatError(ValueError):
    def __init__(self, path, field: str, message: str):
        super().__init__(f"{path}: {field}: {message}")
        self.path = str(path)
        self.field = field


class SynthesisError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    dims: tuple[int, ...] = (64, 64)
    seed: int = 0
    n_blobs: int = 6
    amplitude: float = 6.0
    smoothness: float = 8.0
    n_labels: int = 4

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        if len(self.dims) not in (2, 3):
            raise ValueError(f"dims must be 2D or 3D, got {self.dims}")
        if self.amplitude < 0 or self.smoothness <= 0:
            raise ValueError("amplitude must be >= 0 and smoothness > 0")
        if self.n_labels < 2:
            raise ValueError("n_labels must be >= 2 (outer region plus at least one structure)")


@dataclass
class RegistrationPair:
    """Source ``x`` is registered onto target ``y``."""

    x: np.ndarray
    y: np.ndarray
    labels_x: np.ndarray | None = None
    labels_y: np.ndarray | None = None
    u_true: np.ndarray | None = None
    seed: int | None = None


def box_blur(a: np.ndarray, width: int, passes: int = 3) -> np.ndarray:
    """Repeated centred box filter along every axis, edge-replicated."""
    r = width // 2
    out = np.asarray(a, dtype=np.float64)
    for _ in range(passes):
        for ax in range(out.ndim):
            pad = [(0, 0)] * out.ndim
            pad[ax] = (r + 1, r)
            c = np.cumsum(np.pad(out, pad, mode="edge"), axis=ax)
            n = out.shape[ax]
            out = (np.take(c, np.arange(2 * r + 1, 2 * r + 1 + n), axis=ax)
                   - np.take(c, np.arange(n), axis=ax)) / (2 * r + 1)
    return out


def smooth_noise(rng: np.random.Generator, dims, scale: float) -> np.ndarray:
    """White noise smoothed to roughly Gaussian correlation length ``scale``.

    Three box passes of width ``w`` have variance ``3 (w^2 - 1) / 12``.
    """
    width = int(round(np.sqrt(4 * scale * scale + 1)))
    width += 1 - width % 2
    return box_blur(rng.standard_normal(dims), max(width, 1))


def _ellipsoid(grid, center, radii) -> np.ndarray:
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii))
    return np.sqrt(r2)


def _phantom(rng: np.random.Generator, cfg: SynthConfig):
    dims = cfg.dims
    grid = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    n = np.array(dims, dtype=np.float64)
    center = n / 2 + rng.uniform(-0.04, 0.04, len(dims)) * n
    radii = rng.uniform(0.36, 0.44, len(dims)) * n
    outer = _ellipsoid(grid, center, radii)
    labels = np.zeros(dims, dtype=np.uint8)
    labels[outer < 1] = 1
    image = np.where(outer < 1, 0.35, 0.0)
    for k in range(cfg.n_blobs):
        offset = rng.uniform(-0.55, 0.55, len(dims)) * radii
        r = rng.uniform(0.07, 0.16, len(dims)) * n
        rad = _ellipsoid(grid, center + offset, r)
        inside = (rad < 1) & (outer < 1)
        labels[inside] = 2 + k % (cfg.n_labels - 1)
        image = np.where(inside, rng.uniform(0.55, 1.0), image)
        core = (rad < 0.45) & inside
        image = np.where(core, rng.uniform(0.1, 0.3), image)
    texture = smooth_noise(rng, dims, 2.0)
    texture /= np.abs(texture).max() + 1e-12
    image = box_blur(image, 3, passes=1) + 0.08 * texture * (outer < 1)
    return normalize_intensity(np.clip(image, 0.0, None)), labels


def synth_pair(cfg: SynthConfig = SynthConfig(), max_rescales: int = 12) -> RegistrationPair:
    """Phantom target ``y`` and source ``x = warp(y, u_true)`` with a fold-free ``u_true``."""
    rng = np.random.default_rng(cfg.seed)
    y, labels_y = _phantom(rng, cfg)
    d = len(cfg.dims)
    u = np.stack([smooth_noise(rng, cfg.dims, cfg.smoothness) for _ in range(d)])
    peak = np.sqrt((u ** 2).sum(axis=0)).max()
    u = u * (cfg.amplitude / peak) if peak > 0 else np.zeros_like(u)
    for _ in range(max_rescales):
        if folding_fraction(jacobian_det_map(u)) == 0:
            break
        u = 0.8 * u
    else:
        raise SynthesisError(f"seed {cfg.seed}: could not make a fold-free field in {max_rescales} rescales")
    u = u.astype(np.float32)
    y = y.astype(np.float32)
    x = warp(y, u).data
    labels_x = warp_labels(labels_y, u)
    return RegistrationPair(x, y, labels_x, labels_y, u, cfg.seed)


def synth_dataset(cfg: SynthConfig, n_pairs: int, first_seed: int | None = None) -> list[RegistrationPair]:
    """``n_pairs`` pairs with seeds ``first_seed + i`` (default ``cfg.seed + i``)."""
    from dataclasses import replace

    base = cfg.seed if first_seed is None else first_seed
    return [synth_pair(replace(cfg, seed=base + i)) for i in range(n_pairs)]


def fold_band_field(dims, rows, cols=None, slope: float = -2.0) -> np.ndarray:
    """2D field whose determinant is ``1 + slope`` on a rectangle and 1 elsewhere.

    ``u_0(i, j) = slope * (clip(i, r0, r1) - r0)`` for ``j`` in ``cols``; ``u_1 = 0``.
    """
    h, w = dims
    r0, r1 = rows
    c0, c1 = cols if cols is not None else (0, w)
    i = np.arange(h, dtype=np.float64)[:, None]
    band = np.zeros((1, w))
    band[0, c0:c1] = 1.0
    u = np.zeros((2, h, w), dtype=np.float32)
    u[0] = slope * (np.clip(i, r0, r1) - r0) * band
    return u


def normalize_intensity(x: np.ndarray) -> np.ndarray:
    """Divide by the maximum intensity; all-zero input comes back unchanged."""
    x = np.asarray(x)
    if np.any(x < 0):
        raise ValueError("normalize_intensity: negative intensities are not allowed")
    peak = x.max() if x.size else 0
    if peak == 0 or peak == 1:
        return x
    return x / peak


def center_crop(x: np.ndarray, target) -> np.ndarray:
    """Central block of size ``target``; the lower margin gets the floor of the split.

    Leading axes beyond ``len(target)`` (field components, channels) are kept.
    """
    x = np.asarray(x)
    target = tuple(int(t) for t in target)
    lead = x.ndim - len(target)
    if lead < 0:
        raise ValueError(f"cannot crop {x.shape} to {target}")
    spatial = x.shape[lead:]
    if any(t > n for t, n in zip(target, spatial)):
        raise ValueError(f"crop target {target} larger than input {spatial}")
    sl = tuple(slice((n - t) // 2, (n - t) // 2 + t) for n, t in zip(spatial, target))
    return x[(slice(None),) * lead + sl]


# ----------------------------------------------------------------------------
# volume files


def _payload_path(header_path: Path) -> Path:
    return header_path.with_suffix(".raw")


def save_volume(path, data: np.ndarray, spacing=None) -> None:
    path = Path(path)
    data = np.asarray(data)
    if data.dtype == np.uint8:
        code = "u8"
    elif data.dtype.kind == "f":
        code = "f32"
    else:
        raise VolumeFormatError(path, "dtype", f"unsupported array dtype {data.dtype}")
    payload = _payload_path(path)
    lines = [
        "format: foldless-volume",
        "version: 1",
        "dims: " + " ".join(str(n) for n in data.shape),
        f"dtype: {code}",
        "order: row-major",
    ]
    if spacing is not None:
        lines.append("spacing: " + " ".join(repr(float(s)) for s in spacing))
    lines.append(f"payload: {payload.name}")
    payload.write_bytes(np.ascontiguousarray(data, dtype=_DTYPES[code]).tobytes())
    path.write_text("\n".join(lines) + "\n")


def read_header(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except UnicodeDecodeError:
        raise VolumeFormatError(path, "header", "not a text header") from None
    header = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise VolumeFormatError(path, "header", f"line {lineno} is not 'key: value'")
        key = key.strip()
        if key not in _HEADER_KEYS:
            raise VolumeFormatError(path, key, "unknown header key")
        header[key] = value.strip()
    for key in ("format", "version", "dims", "dtype", "order", "payload"):
        if key not in header:
            raise VolumeFormatError(path, key, "missing")
    if header["format"] != "foldless-volume":
        raise VolumeFormatError(path, "format", f"unexpected value {header['format']!r}")
    if header["version"] != "1":
        raise VolumeFormatError(path, "version", f"unsupported version {header['version']!r}")
    if header["dtype"] not in _DTYPES:
        raise VolumeFormatError(path, "dtype", f"unknown element type {header['dtype']!r}")
    if header["order"] != "row-major":
        raise VolumeFormatError(path, "order", f"unsupported order {header['order']!r}")
    try:
        header["dims"] = tuple(int(v) for v in header["dims"].split())
        if "spacing" in header:
            header["spacing"] = tuple(float(v) for v in header["spacing"].split())
    except ValueError as exc:
        raise VolumeFormatError(path, "dims", str(exc)) from None
    if not header["dims"] or any(n <= 0 for n in header["dims"]):
        raise VolumeFormatError(path, "dims", f"extents must be positive, got {header['dims']}")
    return header


def load_volume(path) -> np.ndarray:
    path = Path(path)
    header = read_header(path)
    dtype = _DTYPES[header["dtype"]]
    raw = (path.parent / header["payload"]).read_bytes()
    expected = int(np.prod(header["dims"])) * dtype.itemsize
    if len(raw) != expected:
        raise VolumeFormatError(path, "payload", f"length {len(raw)} bytes, expected {expected}")
    arr = np.frombuffer(raw, dtype=dtype).reshape(header["dims"])
    return arr.astype(np.float32 if header["dtype"] == "f32" else np.uint8)


# ----------------------------------------------------------------------------
# manifests

MANIFEST_FIELDS = ("pair", "seed", "source", "target", "source_labels", "target_labels", "field_true")


def write_manifest(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in MANIFEST_FIELDS})


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = {"source", "target"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: manifest lacks columns {sorted(missing)}")
        return list(reader)


def load_pairs(manifest) -> list[RegistrationPair]:
    """Pairs listed in a manifest; paths are relative to the manifest's folder."""
    root = Path(manifest).parent
    pairs = []
    for row in read_manifest(manifest):
        def opt(key):
            return load_volume(root / row[key]) if row.get(key) else None
        pairs.append(RegistrationPair(
            x=load_volume(root / row["source"]),
            y=load_volume(root / row["target"]),
            labels_x=opt("source_labels"),
            labels_y=opt("target_labels"),
            u_true=opt("field_true"),
            seed=int(row["seed"]) if row.get("seed") else None,
        ))
    return pairs
