"""Training-set assembly for the liver net, both lesion nets and the detector."""
from __future__ import annotations

import logging

import numpy as np

from .detector import DetectorConfig, DetectorNet, enumerate_patches, train_detector
from .phantom import LabeledCase
from .pipeline import PipelineConfig, crop, liver_bbox_3d, pad_to_multiple
from .segnet import (
    SegNetConfig,
    SegTrainConfig,
    TrainingSample,
    build_segnet,
    compute_class_weights,
    per_volume_weight,
    train_segnet,
)
from .volume import context_indices, preprocess

log = logging.getLogger(__name__)


def _context(arr: np.ndarray, i: int, n_slices: int) -> np.ndarray:
    idx = context_indices(arr.shape[0], i) if n_slices == 3 else [i] * 3
    return arr[idx]


def liver_samples(cases: list[LabeledCase], cfg: SegTrainConfig) -> list[TrainingSample]:
    if cfg.balance == "dataset":
        w_all = compute_class_weights(cases, "liver").w
    samples = []
    for case in cases:
        img = preprocess(case.image).data
        liver = case.liver.data
        w = w_all if cfg.balance == "dataset" else per_volume_weight(liver)
        for i in range(img.shape[0]):
            samples.append(TrainingSample(_context(img, i, cfg.context_slices),
                                          _context(liver, i, cfg.context_slices), None, w))
    return samples


def lesion_crops(cases: list[LabeledCase], pipe: PipelineConfig) -> list[LabeledCase]:
    """Ground-truth-liver box crops of the normalized image and both masks."""
    out = []
    for case in cases:
        box = liver_bbox_3d(case.liver, pipe.bbox_margin, pipe.min_extent)
        img = preprocess(case.image)
        out.append(LabeledCase(image=crop(img, box), liver=crop(case.liver, box),
                               lesion=crop(case.lesion, box), case_id=case.case_id))
    return out


def lesion_samples(cases: list[LabeledCase], cfg: SegTrainConfig, pipe: PipelineConfig,
                   divisor: int) -> list[TrainingSample]:
    """Context slabs from liver crops, padded to the network's divisibility.

    With ``restrict_to_liver`` the loss mask is the ground-truth liver and slabs
    without any liver voxel are skipped.
    """
    crops = lesion_crops(cases, pipe)
    if cfg.balance == "dataset":
        w_all = compute_class_weights(crops, "lesion", cfg.restrict_to_liver).w
    samples = []
    for c in crops:
        img = pad_to_multiple(c.image.data, divisor, "edge")
        lesion = pad_to_multiple(c.lesion.data, divisor, "constant")
        liver = pad_to_multiple(c.liver.data, divisor, "constant")
        w = w_all if cfg.balance == "dataset" else per_volume_weight(c.lesion.data)
        for i in range(img.shape[0]):
            mask = None
            if cfg.restrict_to_liver:
                mask = _context(liver, i, cfg.context_slices)
                if not mask.any():
                    continue
            samples.append(TrainingSample(_context(img, i, cfg.context_slices),
                                          _context(lesion, i, cfg.context_slices), mask, w))
    return samples


def train_liver_net(cases, cfg: SegTrainConfig):
    net = build_segnet(SegNetConfig(stage_channels=list(cfg.stage_channels)), seed=cfg.seed)
    net.context_slices = cfg.context_slices
    history = train_segnet(net, liver_samples(cases, cfg), cfg)
    return net, history


def train_lesion_net(cases, cfg: SegTrainConfig, pipe: PipelineConfig):
    net = build_segnet(SegNetConfig(stage_channels=list(cfg.stage_channels)), seed=cfg.seed)
    net.context_slices = cfg.context_slices
    samples = lesion_samples(cases, cfg, pipe, net.config.divisor)
    history = train_segnet(net, samples, cfg)
    return net, history


def detector_records(cases: list[LabeledCase], pipe: PipelineConfig):
    """Labeled windows from ground-truth liver crops, with the plane each came from."""
    records, planes = [], []
    for c in lesion_crops(cases, pipe):
        for z in range(c.image.shape[0]):
            recs = enumerate_patches(c.liver.data[z], c.lesion.data[z], slice_index=z,
                                     case_id=c.case_id)
            records += recs
            planes += [c.image.data[z]] * len(recs)
    return records, planes


def train_detector_net(cases, cfg: DetectorConfig, pipe: PipelineConfig):
    records, planes = detector_records(cases, pipe)
    n_pos = sum(r.label == "positive" for r in records)
    log.info("detector windows: %d positive, %d negative", n_pos, len(records) - n_pos)
    net = DetectorNet(cfg.channels, seed=cfg.seed)
    history = train_detector(records, planes, net, cfg)
    return net, history
