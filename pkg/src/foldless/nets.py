"""Deformation unit (small U-net) and refinement block, plus checkpoint I/O.

Both networks take and return channel-first tensors without a batch axis.
Output layers are zero-initialised so an untrained model predicts the
identity transform.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .ndtensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat_channels,
    conv_nd,
    leaky_relu,
    upsample_nearest,
)

__all__ = [
    "ArchConfig",
    "ModelParams",
    "CheckpointError",
    "init_params",
    "deformation_forward",
    "refine_forward",
    "composed_field",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"FLDX"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    ndim: int = 2
    levels: int = 3
    base_channels: int | None = None
    kernel: int = 3
    alpha: float = 0.2
    refine: bool = False
    refine_hidden: int = 16

    def __post_init__(self):
        if self.ndim not in (2, 3):
            raise ValueError(f"ndim must be 2 or 3, got {self.ndim}")
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels is None:
            object.__setattr__(self, "base_channels", 16 if self.ndim == 2 else 8)

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** (level - 1)

    def check_dims(self, dims) -> None:
        step = 2 ** self.levels
        if len(dims) != self.ndim:
            raise ShapeError(f"architecture is {self.ndim}D but input dims are {tuple(dims)}")
        if any(n % step for n in dims):
            raise ShapeError(f"spatial dims {tuple(dims)} must be divisible by 2**levels = {step}")


@dataclass
class ModelParams:
    arch: ArchConfig
    deformation: dict[str, Tensor]
    refine: dict[str, Tensor] | None = None

    def __post_init__(self):
        if (self.refine is not None) != self.arch.refine:
            raise ValueError("refine parameters must be present exactly when arch.refine is set")

    def named(self) -> dict[str, Tensor]:
        """All parameters in declaration order, refinement names prefixed ``refine.``."""
        out = {f"deformation.{k}": v for k, v in self.deformation.items()}
        if self.refine is not None:
            out.update({f"refine.{k}": v for k, v in self.refine.items()})
        return out

    def count(self, which: str | None = None) -> int:
        groups = {"deformation": self.deformation, "refine": self.refine or {}}
        if which is not None:
            return sum(p.size for p in groups[which].values())
        return sum(p.size for g in groups.values() for p in g.values())

    def copy(self) -> "ModelParams":
        def dup(group):
            return None if group is None else {
                k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=v.name) for k, v in group.items()
            }
        return ModelParams(self.arch, dup(self.deformation), dup(self.refine))


def _conv_layer(rng, c_out, c_in, k, d, zero=False):
    shape = (c_out, c_in) + (k,) * d
    if zero:
        w = np.zeros(shape)
    else:
        bound = np.sqrt(6.0 / (c_in * k ** d))
        w = rng.uniform(-bound, bound, size=shape)
    return w, np.zeros(c_out)


def _layer_specs(arch: ArchConfig):
    d = arch.ndim
    specs = []
    c_prev = 2
    for lvl in range(1, arch.levels + 1):
        specs.append((f"enc{lvl}", arch.channels(lvl), c_prev, False))
        c_prev = arch.channels(lvl)
    for lvl in range(arch.levels, 0, -1):
        skip = 2 if lvl == 1 else arch.channels(lvl - 1)
        c_out = arch.base_channels if lvl == 1 else arch.channels(lvl - 1)
        specs.append((f"dec{lvl}", c_out, c_prev + skip, False))
        c_prev = c_out
    specs.append(("head", d, c_prev, True))
    return specs


def init_params(seed: int, arch: ArchConfig = ArchConfig()) -> ModelParams:
    """Fan-in scaled uniform kernels, zero biases, zero output layers."""
    rng = np.random.default_rng(seed)
    d, k = arch.ndim, arch.kernel
    deformation = {}
    for name, c_out, c_in, zero in _layer_specs(arch):
        w, b = _conv_layer(rng, c_out, c_in, k, d, zero)
        deformation[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
        deformation[f"{name}.b"] = Tensor(b, requires_grad=True, name=f"{name}.b")
    refine = None
    if arch.refine:
        refine = {}
        for name, c_out, c_in, zero in (("r1", arch.refine_hidden, d, False), ("r2", d, arch.refine_hidden, True)):
            w, b = _conv_layer(rng, c_out, c_in, k, d, zero)
            refine[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
            refine[f"{name}.b"] = Tensor(b, requires_grad=True, name=f"{name}.b")
    return ModelParams(arch, deformation, refine)


def deformation_forward(params: ModelParams, pair) -> Tensor:
    """Displacement ``[d, *dims]`` for a stacked ``[source, target]`` pair."""
    arch = params.arch
    pair = as_tensor(pair)
    if pair.shape[0] != 2:
        raise ShapeError(f"expected a stacked image pair [2, *dims], got {pair.shape}")
    arch.check_dims(pair.shape[1:])
    P = params.deformation
    act = arch.alpha
    skips = [pair]
    h = pair
    for lvl in range(1, arch.levels + 1):
        h = leaky_relu(conv_nd(h, P[f"enc{lvl}.w"], P[f"enc{lvl}.b"], stride=2), act)
        skips.append(h)
    for lvl in range(arch.levels, 0, -1):
        h = concat_channels(upsample_nearest(h, 2), skips[lvl - 1])
        h = leaky_relu(conv_nd(h, P[f"dec{lvl}.w"], P[f"dec{lvl}.b"]), act)
    return conv_nd(h, P["head.w"], P["head.b"])


def refine_forward(refine: dict[str, Tensor], u, alpha: float = 0.2) -> Tensor:
    """Correction ``conv2(leaky_relu(conv1(u)))`` with the same shape as ``u``."""
    u = as_tensor(u)
    d = u.shape[0]
    if refine["r1.w"].shape[1] != d:
        raise ShapeError(f"refinement expects {refine['r1.w'].shape[1]} field components, got {u.shape}")
    h = leaky_relu(conv_nd(u, refine["r1.w"], refine["r1.b"]), alpha)
    return conv_nd(h, refine["r2.w"], refine["r2.b"])


def composed_field(params: ModelParams, pair) -> Tensor:
    """``u`` for plain models, ``u + R(u)`` when a refinement block is present."""
    u = deformation_forward(params, pair)
    if params.refine is None:
        return u
    return add(u, refine_forward(params.refine, u, params.arch.alpha))


# ----------------------------------------------------------------------------
# checkpoint: magic, u32 version, u32 header length, JSON header, f32 LE arrays


def save_checkpoint(path, params: ModelParams) -> None:
    named = params.named()
    header = {
        "arch": asdict(params.arch),
        "params": [[k, list(v.shape)] for k, v in named.items()],
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(text)))
        f.write(text)
        for v in named.values():
            f.write(np.ascontiguousarray(v.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        arch = ArchConfig(**header["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from exc
    offset = 12 + hlen
    groups: dict[str, dict[str, Tensor]] = {"deformation": {}, "refine": {}}
    for full, shape in header["params"]:
        group, name = full.split(".", 1)
        n = int(np.prod(shape))
        if offset + 4 * n > len(raw):
            raise CheckpointError(f"{path}: payload truncated at parameter {full!r}")
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape)
        groups[group][name] = Tensor(arr.astype(np.float32), requires_grad=True, name=name)
        offset += 4 * n
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after parameters")
    return ModelParams(arch, groups["deformation"], groups["refine"] if arch.refine else None)
