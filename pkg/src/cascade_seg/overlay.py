"""Per-slice debug renderings as binary PPM images.

Colours: liver ground truth blue, lesion ground truth red, liver prediction
yellow, lesion prediction green, positively detected windows light blue.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError, IoError, ShapeError

COLOURS = {
    "liver_gt": (0, 0, 255),
    "lesion_gt": (255, 0, 0),
    "liver_pred": (255, 255, 0),
    "lesion_pred": (0, 255, 0),
    "detection": (128, 200, 255),
}
DRAW_ORDER = ("liver_gt", "liver_pred", "lesion_gt", "lesion_pred")


def contour(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one 4-neighbour outside the mask (plane border counts as outside)."""
    m = np.asarray(mask) > 0.5
    if m.ndim != 2:
        raise ShapeError(f"contour needs a 2D mask, got {m.shape}")
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def box_outline(shape, y0, x0, size) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    y1, x1 = min(y0 + size, shape[0]) - 1, min(x0 + size, shape[1]) - 1
    out[y0, x0:x1 + 1] = out[y1, x0:x1 + 1] = True
    out[y0:y1 + 1, x0] = out[y0:y1 + 1, x1] = True
    return out


def render_slice(image: np.ndarray, masks: dict, boxes=(), box_size: int = 50) -> np.ndarray:
    """Grey image in [0, 1] with coloured contours; returns (H, W, 3) uint8."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    rgb = np.repeat((img * 255 + 0.5).astype(np.uint8)[..., None], 3, axis=2)
    for y0, x0 in boxes:
        rgb[box_outline(img.shape, y0, x0, box_size)] = COLOURS["detection"]
    for name in DRAW_ORDER:
        if masks.get(name) is not None:
            rgb[contour(masks[name])] = COLOURS[name]
    return rgb


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"PPM needs (H, W, 3) pixels, got {rgb.shape}")
    h, w, _ = rgb.shape
    try:
        Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, dims, maxval, rest = data.split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise FormatError(f"{path} is not an 8-bit binary PPM")
    w, h = map(int, dims.split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w, 3)
