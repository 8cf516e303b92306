"""Sliding-window lesion detector over the liver crop.

Windows of 50x50 pixels on a stride-50 grid anchored at the crop origin are
kept when at least 25% of their pixels are liver, and labeled positive when
they hold at least 50 lesion pixels. The classifier sees each window with a
15-pixel context margin (80x80). At inference, lesion probabilities survive
only inside windows the classifier calls positive.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsError, ClassMissing, ConfigError, ShapeError
from .nn import (
    Affine,
    Conv2d,
    GlobalAvgPool,
    LossSpec,
    MaxPool2,
    ReLU,
    Sequential,
    sgd_step,
    sigmoid,
    weighted_masked_bce_logits,
)

log = logging.getLogger(__name__)

WINDOW = 50
STRIDE = 50
MARGIN = 15
MIN_LIVER_FRACTION = 0.25
MIN_LESION_PIXELS = 50

POSITIVE, NEGATIVE, EXCLUDED = "positive", "negative", "excluded"


@dataclass(frozen=True)
class PatchRecord:
    slice_index: int
    core: tuple[int, int, int, int]    # (y0, x0, h, w)
    padded: tuple[int, int, int, int]  # core grown by the margin on every side
    label: str
    liver_overlap: float
    lesion_pixel_count: int
    case_id: str = ""


def window_label(liver_pixels: int, lesion_pixels: int, area: int = WINDOW * WINDOW,
                 min_lesion: int = MIN_LESION_PIXELS) -> str:
    # integer comparison keeps the 25% boundary exact: 625 of 2500 is included
    if liver_pixels * 4 < area:
        return EXCLUDED
    return POSITIVE if lesion_pixels >= min_lesion else NEGATIVE


def enumerate_patches(liver, lesion=None, size: int = WINDOW, stride: int = STRIDE,
                      margin: int = MARGIN, slice_index: int = 0,
                      include_excluded: bool = False, case_id: str = "") -> list[PatchRecord]:
    """Grid windows over one plane, anchored at (0, 0); windows past the edge are dropped.

    Windows overlapping the liver by less than 25% are left out unless
    ``include_excluded`` is set, in which case they carry the ``excluded`` label.
    """
    liver = np.asarray(liver) > 0.5
    if lesion is None:
        lesion = np.zeros_like(liver)
    lesion = np.asarray(lesion) > 0.5
    if liver.shape != lesion.shape or liver.ndim != 2:
        raise ShapeError(f"liver {liver.shape} and lesion {lesion.shape} planes must match")
    h, w = liver.shape
    records = []
    for y0 in range(0, h - size + 1, stride):
        for x0 in range(0, w - size + 1, stride):
            n_liver = int(liver[y0:y0 + size, x0:x0 + size].sum())
            n_lesion = int(lesion[y0:y0 + size, x0:x0 + size].sum())
            label = window_label(n_liver, n_lesion, size * size)
            if label == EXCLUDED and not include_excluded:
                continue
            records.append(PatchRecord(
                slice_index=slice_index,
                core=(y0, x0, size, size),
                padded=(y0 - margin, x0 - margin, size + 2 * margin, size + 2 * margin),
                label=label,
                liver_overlap=n_liver / (size * size),
                lesion_pixel_count=n_lesion,
                case_id=case_id,
            ))
    return records


def extract_padded_window(plane, record: PatchRecord, padded_plane=None) -> np.ndarray:
    """Core window plus margin, with out-of-plane pixels filled by edge replication.

    ``padded_plane`` may hold ``np.pad(plane, margin, mode="edge")`` to avoid
    re-padding when many windows come from the same plane.
    """
    plane = np.asarray(plane)
    y0, x0, h, w = record.core
    if y0 < 0 or x0 < 0 or y0 + h > plane.shape[0] or x0 + w > plane.shape[1]:
        raise BoundsError(f"core window {record.core} exceeds plane {plane.shape}")
    py0, px0, ph, pw = record.padded
    m = y0 - py0
    if padded_plane is None:
        padded_plane = np.pad(plane, m, mode="edge")
    return padded_plane[py0 + m:py0 + m + ph, px0 + m:px0 + m + pw].copy()


def augment8(patch: np.ndarray) -> list[np.ndarray]:
    """The dihedral orbit: rotations by 0/90/180/270 degrees, then the same after a flip."""
    patch = np.asarray(patch)
    if patch.ndim != 2 or patch.shape[0] != patch.shape[1]:
        raise ShapeError(f"augment8 needs a square patch, got {patch.shape}")
    flipped = patch[:, ::-1]
    return [np.ascontiguousarray(np.rot90(p, k)) for p in (patch, flipped) for k in range(4)]


def dihedral(patch: np.ndarray, element: int) -> np.ndarray:
    p = patch[..., ::-1] if element >= 4 else patch
    return np.rot90(p, element % 4, axes=(-2, -1))


@dataclass
class DetectorConfig:
    channels: list[int] = field(default_factory=lambda: [8, 16, 32])
    lr: float = 0.05
    momentum: float = 0.9
    steps: int = 300
    batch_size: int = 64
    seed: int = 0
    threshold: float = 0.5

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        cfg = cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})
        if cfg.batch_size % 2:
            raise ConfigError("detector batch size must be even to balance classes")
        return cfg


class DetectorNet:
    """Three conv/ReLU/max-pool stages, global average pooling, one output logit."""

    def __init__(self, channels=(8, 16, 32), seed: int = 0, dtype=np.float32):
        rng = np.random.Generator(np.random.PCG64(seed))
        self.channels = list(channels)
        layers = {}
        prev = 1
        for k, ch in enumerate(self.channels):
            layers[f"conv{k}"] = Conv2d(prev, ch, 3, rng=rng, dtype=dtype)
            layers[f"relu{k}"] = ReLU()
            layers[f"pool{k}"] = MaxPool2()
            prev = ch
        layers["gap"] = GlobalAvgPool()
        layers["fc"] = Affine(prev, 1, rng=rng, dtype=dtype)
        self.body = Sequential(**layers)
        self.dtype = np.dtype(dtype)

    def params(self):
        return self.body.params()

    def zero_grad(self):
        self.body.zero_grad()

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"detector expects (N, 1, H, W) patches, got {x.shape}")
        return self.body.forward(np.ascontiguousarray(x, dtype=self.dtype))

    def backward(self, grad):
        return self.body.backward(grad)

    def predict_proba(self, patches, batch_size: int = 64) -> np.ndarray:
        patches = np.asarray(patches, dtype=self.dtype)
        out = []
        for s in range(0, len(patches), batch_size):
            out.append(sigmoid(self.forward(patches[s:s + batch_size, None]))[:, 0])
        return np.concatenate(out) if out else np.zeros(0, dtype=self.dtype)


def balanced_batch(rng: np.random.Generator, n_pos: int, n_neg: int, batch_size: int = 64):
    """Indices into the augmented positive and negative pools, half from each.

    A pool smaller than half a batch is sampled with replacement.
    """
    half = batch_size // 2
    pos = rng.choice(n_pos, size=half, replace=n_pos < half)
    neg = rng.choice(n_neg, size=half, replace=n_neg < half)
    return pos, neg


def train_detector(records, planes, net: DetectorNet, cfg: DetectorConfig | None = None,
                   on_batch=None) -> list[float]:
    """Balanced-batch training on the 8-fold augmented windows.

    ``planes[i]`` is the image plane ``records[i]`` was cut from. The loss is plain
    (equal-weight) BCE on the single logit. ``on_batch(labels)`` is called with each
    batch's label vector.
    """
    cfg = cfg or DetectorConfig()
    pos = [i for i, r in enumerate(records) if r.label == POSITIVE]
    neg = [i for i, r in enumerate(records) if r.label == NEGATIVE]
    if not pos or not neg:
        raise ClassMissing(f"need both classes, got {len(pos)} positive / {len(neg)} negative")
    patches = np.stack([extract_padded_window(planes[i], records[i]) for i in range(len(records))])
    pos_pool, neg_pool = len(pos) * 8, len(neg) * 8
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    half = cfg.batch_size // 2
    labels = np.concatenate([np.ones(half), np.zeros(half)]).astype(net.dtype)[:, None]
    history = []
    for step in range(cfg.steps):
        pi, ni = balanced_batch(rng, pos_pool, neg_pool, cfg.batch_size)
        batch = [dihedral(patches[pos[i // 8]], i % 8) for i in pi]
        batch += [dihedral(patches[neg[i // 8]], i % 8) for i in ni]
        x = np.stack(batch)[:, None]
        if on_batch is not None:
            on_batch(labels[:, 0])
        net.zero_grad()
        logits = net.forward(x)
        loss, grad = weighted_masked_bce_logits(logits, labels, LossSpec(0.5))
        # w = 0.5 halves both terms; scale back to plain BCE
        net.backward(2 * grad)
        sgd_step(net.params(), cfg.lr, cfg.momentum)
        history.append(2 * loss)
        if (step + 1) % 50 == 0:
            log.info("detector step %d/%d loss %.4f", step + 1, cfg.steps, np.mean(history[-50:]))
    return history


@dataclass
class DetectionMask:
    shape: tuple[int, int, int]
    positives: dict[int, list[tuple[int, int]]] = field(default_factory=dict)
    size: int = WINDOW
    scores: dict[int, list[tuple[int, int, float]]] = field(default_factory=dict)

    def to_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        for z, corners in self.positives.items():
            for y0, x0 in corners:
                m[z, y0:y0 + self.size, x0:x0 + self.size] = True
        return m

    def to_json(self) -> str:
        rows = [{"slice": int(z), "positives": [[int(y), int(x)] for y, x in self.positives.get(z, [])]}
                for z in range(self.shape[0])]
        return json.dumps(rows)


def detect(image, liver, net: DetectorNet, threshold: float = 0.5) -> DetectionMask:
    """Classify every retained grid window of every slice of the liver crop."""
    image = np.asarray(image, dtype=np.float32)
    liver = np.asarray(liver)
    if image.shape != liver.shape or image.ndim != 3:
        raise ShapeError(f"image {image.shape} and liver {liver.shape} must be matching 3D crops")
    records, patches = [], []
    for z in range(image.shape[0]):
        recs = enumerate_patches(liver[z], None, slice_index=z)
        if not recs:
            continue
        padded_plane = np.pad(image[z], MARGIN, mode="edge")
        for r in recs:
            records.append(r)
            patches.append(extract_padded_window(image[z], r, padded_plane))
    out = DetectionMask(shape=image.shape)
    if not records:
        return out
    probs = net.predict_proba(np.stack(patches))
    for r, p in zip(records, probs):
        y0, x0 = r.core[:2]
        out.scores.setdefault(r.slice_index, []).append((y0, x0, float(p)))
        if p >= threshold:
            out.positives.setdefault(r.slice_index, []).append((y0, x0))
    return out


def mask_segmentation(lesion_prob, detections: DetectionMask) -> np.ndarray:
    """Zero every probability outside the union of positive core windows."""
    prob = np.asarray(lesion_prob)
    if prob.shape != tuple(detections.shape):
        raise ShapeError(f"probabilities {prob.shape} do not match detections {detections.shape}")
    return np.where(detections.to_mask(), prob, 0).astype(prob.dtype)
