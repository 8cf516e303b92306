"""Volume container, RVOL file I/O, intensity preprocessing and context slabs."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateVolume, FormatError, IoError, RangeError, ShapeError

HU_WINDOW = (-150.0, 250.0)


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D float32 grid indexed (z, y, x) with voxel spacing in millimeters.

    Masks use the same container with values restricted to 0.0 / 1.0.
    The array is made read-only on construction.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"volume must be a non-empty 3D grid, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise FormatError("volume contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ShapeError(f"spacing must be three positive numbers, got {self.spacing}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data) -> "Volume":
        return Volume(data, self.spacing)

    def is_binary(self) -> bool:
        return bool(np.all((self.data == 0) | (self.data == 1)))

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class ContextSlab:
    channels: np.ndarray  # (3, ny, nx)
    center_index: int


def clip_intensities(vol: Volume, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> Volume:
    if not lo < hi:
        raise RangeError(f"clip range requires lo < hi, got ({lo}, {hi})")
    return vol.with_data(np.clip(vol.data, np.float32(lo), np.float32(hi)))


def min_max_normalize(vol: Volume) -> Volume:
    data = vol.data.astype(np.float64)
    lo, hi = data.min(), data.max()
    if hi == lo:
        raise DegenerateVolume("cannot normalize a constant volume")
    out = (data - lo) / (hi - lo)
    # pin the endpoints so float32 rounding cannot move them
    out[data == lo] = 0.0
    out[data == hi] = 1.0
    return vol.with_data(out)


def preprocess(vol: Volume) -> Volume:
    """Clip to the soft-tissue window, then min-max normalize."""
    return min_max_normalize(clip_intensities(vol, *HU_WINDOW))


def context_indices(nz: int, index: int, n_slices: int = 3) -> list[int]:
    half = n_slices // 2
    return [min(max(index - half + k, 0), nz - 1) for k in range(n_slices)]


def stack_context_slices(vol: Volume | np.ndarray, index: int, n_slices: int = 3) -> ContextSlab:
    """Slices (index-1, index, index+1) with edge replication at the volume ends.

    ``n_slices=1`` replicates the center slice into all three channels, which is
    how the single-slice baseline feeds a 3-channel network.
    """
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    nz = data.shape[0]
    if not 0 <= index < nz:
        raise IndexError(f"slice index {index} out of range for nz={nz}")
    if n_slices == 1:
        idx = [index] * 3
    elif n_slices == 3:
        idx = context_indices(nz, index)
    else:
        raise ShapeError(f"context must be 1 or 3 slices, got {n_slices}")
    return ContextSlab(channels=data[idx].copy(), center_index=index)


def write_volume(vol: Volume, path: str | os.PathLike) -> None:
    """Write ``<path>.json`` header and ``<path>.raw`` little-endian f32 payload."""
    base = Path(path)
    header = {
        "shape": list(vol.shape),
        "spacing": list(vol.spacing),
        "dtype": "f32",
        "order": "zyx",
    }
    try:
        base.parent.mkdir(parents=True, exist_ok=True)
        base.with_suffix(".raw").write_bytes(vol.data.astype("<f4").tobytes(order="C"))
        base.with_suffix(".json").write_text(json.dumps(header, indent=1) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write volume {base}: {exc}") from exc


def read_volume(path: str | os.PathLike) -> Volume:
    base = Path(path)
    if base.suffix in (".json", ".raw"):
        base = base.with_suffix("")
    try:
        header = json.loads(base.with_suffix(".json").read_text())
        payload = base.with_suffix(".raw").read_bytes()
    except FileNotFoundError as exc:
        raise IoError(f"missing volume file: {exc.filename}") from exc
    except OSError as exc:
        raise IoError(f"cannot read volume {base}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad header for {base}: {exc}") from exc

    try:
        shape = tuple(int(s) for s in header["shape"])
        spacing = tuple(float(s) for s in header["spacing"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad header for {base}: {exc}") from exc
    if header.get("dtype", "f32") != "f32" or header.get("order", "zyx") != "zyx":
        raise FormatError(f"unsupported dtype/order in {base}")
    if len(shape) != 3 or min(shape) <= 0:
        raise FormatError(f"shape must be three positive integers, got {shape}")
    if len(spacing) != 3 or min(spacing) <= 0:
        raise FormatError(f"spacing must be three positive numbers, got {spacing}")
    expected = shape[0] * shape[1] * shape[2] * 4
    if len(payload) != expected:
        raise FormatError(f"payload has {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(shape)
    try:
        return Volume(data, spacing)
    except (ShapeError, FormatError) as exc:
        raise FormatError(str(exc)) from exc
