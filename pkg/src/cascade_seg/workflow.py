"""One function per CLI subcommand, each driven by a resolved RunConfig.

Layout on disk:
    <data>/          dataset.json, <id>_img|_liver|_lesion RVOL volumes
    <models>/        liver/, lesion/, baseline/, detector/ checkpoints
    <predictions>/   <id>_liverpred, <id>_lesionprob, <id>_lesionpred, <id>.json,
                     <id>_detections.json, and *_crf variants from refine-crf
    <reports>/       evaluation.{json,csv}, ablation.{csv,json,txt}
Every output directory also receives the resolved run_config.json.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .detector import DetectorNet
from .errors import ConfigError, FormatError, IoError, MissingPrediction
from .metrics import DEFAULT_ABLATION, ablation_run, aggregate, evaluate_cases
from .nn import load_into, read_checkpoint, save_checkpoint
from .overlay import render_slice, write_ppm
from .phantom import case_params, generate_dataset, read_dataset, write_dataset
from .pipeline import (
    crf_stage,
    crop,
    liver_bbox_3d,
    run_pipeline,
    threshold_mask,
    uncrop,
)
from .segnet import SegNet, SegNetConfig, build_segnet
from .training import train_detector_net, train_lesion_net, train_liver_net
from .volume import Volume, preprocess, read_volume, write_volume

log = logging.getLogger(__name__)

MODEL_DIRS = {"liver": "liver", "full": "lesion", "baseline": "baseline", "detector": "detector"}


def _mkdir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {p}: {exc}") from exc
    return p


def _write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# --- data ------------------------------------------------------------------------

def build_dataset(cfg: RunConfig):
    base = cfg.phantom_base()
    seeds = cfg["dataset"]["case_seeds"]
    if seeds:
        params = [replace(base, seed=int(s)) for s in seeds]
    else:
        params = case_params(base, int(cfg["dataset"]["n_cases"]))
    return generate_dataset(params, tuple(cfg["dataset"]["split"]), seed=int(cfg["seed"]))


def gen_data(cfg: RunConfig, out=None) -> Path:
    out = _mkdir(out or cfg.path("data"))
    ds = build_dataset(cfg)
    write_dataset(ds, out, {"seed": int(cfg["seed"]), "n_cases": int(cfg["dataset"]["n_cases"])})
    cfg.write(out)
    log.info("wrote %d cases to %s", sum(len(v) for v in ds.ids().values()), out)
    return out


def load_split(cfg: RunConfig, split: str):
    root = cfg.path("data")
    if not (root / "dataset.json").exists():
        raise ConfigError(f"no dataset at {root}; run gen-data first")
    try:
        ds, _ = read_dataset(root)
    except (KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad dataset manifest in {root}: {exc}") from exc
    return getattr(ds, split)


# --- checkpoints -------------------------------------------------------------------

def save_segnet(net: SegNet, path, meta: dict | None = None) -> None:
    save_checkpoint(path, net.params(), {"kind": "segnet", "config": asdict(net.config),
                                         "context_slices": net.context_slices, **(meta or {})})


def load_segnet(path) -> SegNet:
    arrays, meta = read_checkpoint(path)
    if meta.get("kind") != "segnet":
        raise FormatError(f"{path} does not hold a segmentation net")
    net = build_segnet(SegNetConfig(**meta["config"]))
    net.context_slices = int(meta["context_slices"])
    load_into(net.params(), arrays)
    return net


def save_detector(net: DetectorNet, path, meta: dict | None = None) -> None:
    save_checkpoint(path, net.params(), {"kind": "detector", "channels": net.channels, **(meta or {})})


def load_detector(path) -> DetectorNet:
    arrays, meta = read_checkpoint(path)
    if meta.get("kind") != "detector":
        raise FormatError(f"{path} does not hold a detector")
    net = DetectorNet(meta["channels"])
    load_into(net.params(), arrays)
    return net


def load_models(cfg: RunConfig, names=("liver", "full", "detector")) -> dict:
    root = cfg.path("models")
    models = {}
    for name in names:
        path = root / MODEL_DIRS[name]
        if not (path / "manifest.json").exists():
            raise ConfigError(f"no trained {name} checkpoint at {path}")
        models[name] = load_detector(path) if name == "detector" else load_segnet(path)
    return models


# --- training ----------------------------------------------------------------------

def _history_meta(history) -> dict:
    return {"loss_history": [float(h) for h in history]}


def train_liver(cfg: RunConfig, out=None) -> Path:
    root = Path(out or cfg.path("models"))
    cases = load_split(cfg, "train")
    net, history = train_liver_net(cases, cfg.seg_train("liver_net"))
    path = root / MODEL_DIRS["liver"]
    save_segnet(net, path, _history_meta(history))
    cfg.write(path)
    return path


def train_lesion(cfg: RunConfig, out=None) -> list[Path]:
    """Train both lesion nets: the full one and the ablation baseline."""
    root = Path(out or cfg.path("models"))
    cases = load_split(cfg, "train")
    pipe = cfg.pipeline_config()
    paths = []
    for name, section in (("full", "lesion_net"), ("baseline", "baseline_net")):
        net, history = train_lesion_net(cases, cfg.seg_train(section), pipe)
        path = root / MODEL_DIRS[name]
        save_segnet(net, path, _history_meta(history))
        cfg.write(path)
        paths.append(path)
    return paths


def train_detector(cfg: RunConfig, out=None) -> Path:
    root = Path(out or cfg.path("models"))
    cases = load_split(cfg, "train")
    net, history = train_detector_net(cases, cfg.detector_config(), cfg.pipeline_config())
    path = root / MODEL_DIRS["detector"]
    save_detector(net, path, _history_meta(history))
    cfg.write(path)
    return path


# --- prediction -----------------------------------------------------------------------

def detections_to_full(det, box) -> dict:
    """Detected windows in full-volume coordinates."""
    rows = []
    for z in range(det.shape[0]):
        corners = det.positives.get(z, [])
        rows.append({"slice": box.z0 + z,
                     "positives": [[box.y0 + y, box.x0 + x] for y, x in corners]})
    return {"size": det.size, "bbox": list(box.as_tuple()), "slices": rows}


def predict(cfg: RunConfig, out=None) -> Path:
    models = load_models(cfg)
    out = _mkdir(out or cfg.path("predictions"))
    pipe = cfg.pipeline_config()
    crf = cfg.crf_params()
    for case in load_split(cfg, cfg["predict"]["split"]):
        res = run_pipeline(case.image, models["liver"], models["full"], models["detector"], crf, pipe)
        cid = case.case_id
        write_volume(res.liver_mask, out / f"{cid}_liverpred")
        write_volume(res.lesion_prob, out / f"{cid}_lesionprob")
        write_volume(res.lesion_mask, out / f"{cid}_lesionpred")
        _write_text(out / f"{cid}.json", json.dumps({"case_id": cid, **res.sidecar(pipe)},
                                                    indent=1, sort_keys=True) + "\n")
        if cfg["predict"]["write_detections"] and res.detections is not None:
            _write_text(out / f"{cid}_detections.json",
                        json.dumps(detections_to_full(res.detections, res.bbox)) + "\n")
        log.info("%s: %s %s", cid, res.status,
                 " ".join(f"{k}={v:.2f}s" for k, v in res.timings.items()))
    cfg.write(out)
    return out


def _read_prediction(root: Path, cid: str, suffix: str) -> Volume:
    path = root / f"{cid}_{suffix}"
    if not path.with_suffix(".json").exists():
        raise MissingPrediction(f"missing prediction {path}")
    return read_volume(path)


def refine_crf(cfg: RunConfig, out=None) -> Path:
    """CRF refinement of stored predictions, writing *_lesionprob_crf and *_lesionpred_crf.

    Uses the crop the pipeline would use, so on probabilities predicted with the CRF
    disabled the result equals a pipeline run with it enabled.
    """
    src = cfg.path("predictions")
    out = _mkdir(out or src)
    pipe = cfg.pipeline_config()
    crf = cfg.crf_params()
    for case in load_split(cfg, cfg["predict"]["split"]):
        cid = case.case_id
        liver = _read_prediction(src, cid, "liverpred")
        prob = _read_prediction(src, cid, "lesionprob")
        refined = np.zeros(prob.shape, dtype=np.float32)
        if liver.data.any():
            box = liver_bbox_3d(liver, pipe.bbox_margin, pipe.min_extent)
            img_crop = crop(preprocess(case.image).data, box)
            q = crf_stage(crop(prob.data, box), img_crop, crop(liver.data, box), crf, prob.spacing)
            refined = uncrop(q, box, prob.shape)
        mask = threshold_mask(refined, pipe.lesion_threshold) * (liver.data > 0.5)
        write_volume(prob.with_data(refined), out / f"{cid}_lesionprob_crf")
        write_volume(prob.with_data(mask), out / f"{cid}_lesionpred_crf")
    cfg.write(out)
    return out


# --- evaluation --------------------------------------------------------------------------

def evaluate(cfg: RunConfig, out=None) -> Path:
    src = cfg.path("predictions")
    out = _mkdir(out or cfg.path("reports"))
    suffix = cfg["evaluate"]["lesion_suffix"]
    cases = load_split(cfg, cfg["evaluate"]["split"])
    preds = {}
    for case in cases:
        preds[case.case_id] = (_read_prediction(src, case.case_id, "liverpred"),
                               _read_prediction(src, case.case_id, suffix))
    scores = evaluate_cases(cases, preds)
    agg = aggregate(scores)
    summary = asdict(agg)
    summary["lesion_precision"] = agg.lesion_precision
    _write_text(out / "evaluation.json", json.dumps(
        {"lesion_suffix": suffix, "summary": summary, "cases": [asdict(s) for s in scores]},
        indent=1) + "\n")
    lines = ["case_id,dice_liver,dice_lesion"]
    lines += [f"{s.case_id},{s.dice_liver:.6f},{s.dice_lesion:.6f}" for s in scores]
    lines.append(f"mean,{agg.mean_dice_liver:.6f},{agg.mean_dice_lesion:.6f}")
    lines.append(f"global,{agg.global_dice_liver:.6f},{agg.global_dice_lesion:.6f}")
    _write_text(out / "evaluation.csv", "\n".join(lines) + "\n")
    cfg.write(out)
    log.info("liver %.3f lesion %.3f (mean Dice)", agg.mean_dice_liver, agg.mean_dice_lesion)
    return out


def ablate(cfg: RunConfig, out=None):
    models = load_models(cfg, ("liver", "baseline", "full", "detector"))
    out = _mkdir(out or cfg.path("reports"))
    cases = load_split(cfg, "test")
    t0 = time.perf_counter()
    report = ablation_run(cases, models, DEFAULT_ABLATION, cfg.pipeline_config(), cfg.crf_params())
    log.info("ablation took %.1fs", time.perf_counter() - t0)
    _write_text(out / "ablation.csv", report.to_csv())
    _write_text(out / "ablation.json", report.to_json() + "\n")
    _write_text(out / "ablation.txt", report.table() + "\n")
    cfg.write(out)
    return out, report


# --- overlays -------------------------------------------------------------------------------

def overlay(cfg: RunConfig, out=None) -> Path:
    src = cfg.path("predictions")
    out = _mkdir(out or cfg.path("overlays"))
    wanted = set(cfg["overlay"]["cases"])
    cases = [c for c in load_split(cfg, cfg["overlay"]["split"]) if not wanted or c.case_id in wanted]
    if wanted and len(cases) != len(wanted):
        raise ConfigError(f"overlay cases not found in split: {sorted(wanted - {c.case_id for c in cases})}")
    for case in cases:
        cid = case.case_id
        liver_pred = _read_prediction(src, cid, "liverpred").data
        lesion_pred = _read_prediction(src, cid, "lesionpred").data
        boxes, size = {}, 50
        det_path = src / f"{cid}_detections.json"
        if det_path.exists():
            det = json.loads(det_path.read_text())
            size = det["size"]
            boxes = {row["slice"]: [tuple(p) for p in row["positives"]] for row in det["slices"]}
        img = preprocess(case.image).data
        for z in range(img.shape[0]):
            rgb = render_slice(img[z], {"liver_gt": case.liver.data[z], "lesion_gt": case.lesion.data[z],
                                        "liver_pred": liver_pred[z], "lesion_pred": lesion_pred[z]},
                               boxes.get(z, ()), size)
            write_ppm(out / f"{cid}_z{z:03d}.ppm", rgb)
    cfg.write(out)
    return out
