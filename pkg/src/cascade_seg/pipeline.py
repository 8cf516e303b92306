"""Cascade: liver segmentation -> 3D box crop -> lesion segmentation -> detector
masking -> CRF refinement -> uncrop.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import BoundsError, EmptyMask, RangeError, ShapeError
from .volume import Volume, preprocess

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Bbox3:
    """Half-open voxel bounds [z0, z1) x [y0, y1) x [x0, x1)."""

    z0: int
    z1: int
    y0: int
    y1: int
    x0: int
    x1: int

    def __post_init__(self):
        if not (self.z0 < self.z1 and self.y0 < self.y1 and self.x0 < self.x1):
            raise BoundsError(f"empty bounding box {self}")
        if min(self.z0, self.y0, self.x0) < 0:
            raise BoundsError(f"negative bounds in {self}")

    @property
    def slices(self):
        return (slice(self.z0, self.z1), slice(self.y0, self.y1), slice(self.x0, self.x1))

    @property
    def shape(self):
        return (self.z1 - self.z0, self.y1 - self.y0, self.x1 - self.x0)

    def as_tuple(self):
        return (self.z0, self.z1, self.y0, self.y1, self.x0, self.x1)

    def fits(self, shape) -> bool:
        return self.z1 <= shape[0] and self.y1 <= shape[1] and self.x1 <= shape[2]


@dataclass
class PipelineConfig:
    liver_threshold: float = 0.5
    bbox_margin: int = 4
    # in-plane box extent is grown to at least one detector window
    min_extent: int = 50
    lesion_threshold: float = 0.5
    detector: bool = True
    crf: bool = True

    def validate(self):
        for name in ("liver_threshold", "lesion_threshold"):
            t = getattr(self, name)
            if not 0 < t < 1:
                raise RangeError(f"{name} must lie in (0, 1), got {t}")
        if self.bbox_margin < 0 or self.min_extent < 0:
            raise RangeError("bbox_margin and min_extent must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        cfg = cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})
        cfg.validate()
        return cfg


def threshold_mask(prob, t: float = 0.5):
    """1 where prob >= t. Accepts a Volume or an array and returns the same kind."""
    if not 0 < t < 1:
        raise RangeError(f"threshold must lie in (0, 1), got {t}")
    data = prob.data if isinstance(prob, Volume) else np.asarray(prob)
    out = (data >= t).astype(np.float32)
    return prob.with_data(out) if isinstance(prob, Volume) else out


def _grow(lo: int, hi: int, size: int, dim: int) -> tuple[int, int]:
    """Grow [lo, hi) symmetrically to at least ``size`` voxels inside [0, dim)."""
    size = min(size, dim)
    short = size - (hi - lo)
    if short <= 0:
        return lo, hi
    lo -= short // 2
    hi += short - short // 2
    if lo < 0:
        hi, lo = hi - lo, 0
    if hi > dim:
        lo, hi = lo - (hi - dim), dim
    return lo, hi


def liver_bbox_3d(liver, margin: int = 4, min_extent: int = 0) -> Bbox3:
    """Tightest box around the liver, expanded by ``margin`` and clamped to the volume.

    ``min_extent`` additionally grows the y and x extents to at least that many voxels.
    """
    data = liver.data if isinstance(liver, Volume) else np.asarray(liver)
    m = data > 0.5
    if not m.any():
        raise EmptyMask("no liver voxel to place a bounding box around")
    bounds = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        idx = np.flatnonzero(m.any(axis=other))
        lo = max(int(idx[0]) - margin, 0)
        hi = min(int(idx[-1]) + 1 + margin, m.shape[axis])
        if axis > 0 and min_extent:
            lo, hi = _grow(lo, hi, min_extent, m.shape[axis])
        bounds += [lo, hi]
    return Bbox3(*bounds)


def crop(vol, box: Bbox3):
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    if not box.fits(data.shape):
        raise BoundsError(f"box {box.as_tuple()} exceeds volume shape {data.shape}")
    out = data[box.slices].copy()
    return vol.with_data(out) if isinstance(vol, Volume) else out


def pad_to_multiple(arr: np.ndarray, divisor: int, mode: str = "edge") -> np.ndarray:
    """Pad the last two axes at their far end up to a multiple of ``divisor``."""
    h, w = arr.shape[-2:]
    ph, pw = (-h) % divisor, (-w) % divisor
    if not (ph or pw):
        return arr
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(arr, pad, mode=mode)


def uncrop(cropped, box: Bbox3, full_shape, fill: float = 0.0):
    """Place a crop (optionally still carrying far-end padding) back into a full grid."""
    data = cropped.data if isinstance(cropped, Volume) else np.asarray(cropped)
    bz, by, bx = box.shape
    if data.shape[0] != bz or data.shape[1] < by or data.shape[2] < bx:
        raise ShapeError(f"crop {data.shape} does not cover box {box.shape}")
    if not box.fits(full_shape):
        raise BoundsError(f"box {box.as_tuple()} exceeds volume shape {tuple(full_shape)}")
    out = np.full(tuple(full_shape), fill, dtype=np.float32)
    out[box.slices] = data[:, :by, :bx]
    return cropped.with_data(out) if isinstance(cropped, Volume) else out


@dataclass
class PipelineResult:
    liver_mask: Volume
    lesion_prob: Volume
    lesion_mask: Volume
    bbox: Bbox3 | None
    status: str = "ok"
    timings: dict = field(default_factory=dict)
    detections: object = None

    def sidecar(self, cfg: PipelineConfig) -> dict:
        # wall-clock timings are left out so sidecars are reproducible byte for byte
        return {"status": self.status, "config": asdict(cfg),
                "bbox": list(self.bbox.as_tuple()) if self.bbox else None}


def crf_stage(prob_crop, img_crop, liver_crop, crf_params, spacing):
    """Dense-CRF refinement restricted to the liver voxels of a crop."""
    from .crf import CrfParams, refine

    support = np.asarray(liver_crop) > 0.5
    out = refine(prob_crop, img_crop, crf_params or CrfParams(), support=support, spacing=spacing)
    return np.where(support, out, 0.0).astype(np.float32)


def run_pipeline(vol: Volume, liver_net, lesion_net, detector=None, crf_params=None,
                 cfg: PipelineConfig | None = None) -> PipelineResult:
    """Full cascade on a raw CT-like volume (clip + normalize happen here)."""
    from .detector import detect, mask_segmentation
    from .segnet import predict_volume

    cfg = cfg or PipelineConfig()
    cfg.validate()
    timings = {}
    t0 = time.perf_counter()
    image = preprocess(vol)
    liver_prob = predict_volume(liver_net, image, context_slices=liver_net.context_slices)
    liver_mask = threshold_mask(liver_prob, cfg.liver_threshold)
    timings["liver"] = time.perf_counter() - t0

    empty = vol.with_data(np.zeros(vol.shape, dtype=np.float32))
    if not liver_mask.data.any():
        log.warning("predicted liver is empty; returning an empty lesion mask")
        return PipelineResult(liver_mask, empty, empty, None, status="empty_liver", timings=timings)

    t0 = time.perf_counter()
    box = liver_bbox_3d(liver_mask, cfg.bbox_margin, cfg.min_extent)
    img_crop = crop(image.data, box)
    liver_crop = crop(liver_mask.data, box)
    d = lesion_net.config.divisor
    padded = pad_to_multiple(img_crop, d, mode="edge")
    liver_padded = pad_to_multiple(liver_crop, d, mode="constant")
    prob = predict_volume(lesion_net, padded, liver_padded,
                          context_slices=lesion_net.context_slices)
    prob = prob[:, :box.shape[1], :box.shape[2]]
    timings["lesion"] = time.perf_counter() - t0

    detections = None
    if cfg.detector and detector is not None:
        t0 = time.perf_counter()
        detections = detect(img_crop, liver_crop, detector)
        prob = mask_segmentation(prob, detections)
        timings["detector"] = time.perf_counter() - t0
    if cfg.crf:
        t0 = time.perf_counter()
        prob = crf_stage(prob, img_crop, liver_crop, crf_params, vol.spacing)
        timings["crf"] = time.perf_counter() - t0

    lesion_crop = threshold_mask(prob, cfg.lesion_threshold) * (liver_crop > 0.5)
    lesion_prob = vol.with_data(uncrop(prob, box, vol.shape))
    lesion_mask = vol.with_data(uncrop(lesion_crop, box, vol.shape))
    return PipelineResult(liver_mask, lesion_prob, lesion_mask, box, timings=timings,
                          detections=detections)
