"""Run configuration: one JSON tree, defaults filled in, dotted-path overrides."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict
from importlib import resources
from pathlib import Path

from .crf import CrfParams
from .detector import DetectorConfig
from .errors import ConfigError, IoError
from .phantom import PhantomParams
from .pipeline import PipelineConfig
from .segnet import SegTrainConfig

RUN_CONFIG_NAME = "run_config.json"


def _phantom_defaults():
    d = PhantomParams().to_dict()
    d.pop("seed")
    return d


def default_tree() -> dict:
    return {
        "seed": 2024,
        "threads": None,
        "paths": {"data": "data", "models": "models", "predictions": "predictions",
                  "reports": "reports", "overlays": "overlays"},
        "dataset": {"n_cases": 40, "split": [0.5, 0.25], "case_seeds": []},
        "phantom": _phantom_defaults(),
        "liver_net": asdict(SegTrainConfig(epochs=6, seed=1)),
        "lesion_net": asdict(SegTrainConfig(epochs=6, seed=2, restrict_to_liver=True)),
        "baseline_net": asdict(SegTrainConfig(epochs=6, seed=3, context_slices=1,
                                              balance="per_volume")),
        "detector": asdict(DetectorConfig(seed=4)),
        "pipeline": asdict(PipelineConfig()),
        "crf": asdict(CrfParams()),
        "predict": {"split": "test", "write_detections": True},
        "evaluate": {"split": "test", "lesion_suffix": "lesionpred"},
        "overlay": {"split": "test", "cases": []},
    }


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown configuration key {where!r}")
        if isinstance(out[key], dict) and out[key] and not isinstance(value, dict):
            raise ConfigError(f"{where!r} must be an object")
        if isinstance(out[key], dict) and out[key]:
            out[key] = _merge(out[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b.c=value``; the value is read as JSON and falls back to a plain string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    keys = key.strip().split(".")
    if not all(keys):
        raise ConfigError(f"bad override key {key!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return keys, value


def apply_overrides(tree: dict, overrides) -> dict:
    out = copy.deepcopy(tree)
    for text in overrides or ():
        keys, value = parse_override(text)
        node = out
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"unknown configuration key {'.'.join(keys)!r}")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"unknown configuration key {'.'.join(keys)!r}")
        node[keys[-1]] = value
    return out


def load_json(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise IoError(f"cannot read config {p}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {p} must hold a JSON object")
    return data


def bundled_config_path(name: str = "desk") -> Path:
    return Path(str(resources.files("cascade_seg") / "configs" / f"{name}.json"))


class RunConfig:
    """Resolved configuration tree with typed views of each section."""

    def __init__(self, tree: dict):
        self.tree = tree
        self.validate()

    @classmethod
    def load(cls, path=None, overrides=None) -> "RunConfig":
        tree = default_tree()
        if path is not None:
            tree = _merge(tree, load_json(path))
        return cls(apply_overrides(tree, overrides))

    def validate(self):
        t = self.tree
        try:
            self.phantom_base().validate()
            self.seg_train("liver_net")
            self.seg_train("lesion_net")
            self.seg_train("baseline_net")
            self.detector_config()
            self.pipeline_config()
            self.crf_params()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        seeds = t["dataset"]["case_seeds"]
        if seeds and len(seeds) != t["dataset"]["n_cases"]:
            raise ConfigError(f"dataset.case_seeds lists {len(seeds)} seeds for "
                              f"{t['dataset']['n_cases']} cases")
        if t["threads"] is not None and (not isinstance(t["threads"], int) or t["threads"] < 1):
            raise ConfigError("threads must be a positive integer")
        for section in ("predict", "evaluate", "overlay"):
            if t[section]["split"] not in ("train", "val", "test"):
                raise ConfigError(f"{section}.split must be train, val or test")

    def __getitem__(self, key):
        return self.tree[key]

    def phantom_base(self) -> PhantomParams:
        return PhantomParams.from_dict({**self.tree["phantom"], "seed": int(self.tree["seed"])})

    def seg_train(self, section: str) -> SegTrainConfig:
        return SegTrainConfig.from_dict(self.tree[section])

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig.from_dict(self.tree["detector"])

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig.from_dict(self.tree["pipeline"])

    def crf_params(self) -> CrfParams:
        return CrfParams.from_dict(self.tree["crf"])

    def path(self, key: str) -> Path:
        return Path(self.tree["paths"][key])

    def to_json(self) -> str:
        return json.dumps(self.tree, indent=1, sort_keys=True) + "\n"

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / RUN_CONFIG_NAME).write_text(self.to_json())
        except OSError as exc:
            raise IoError(f"cannot write {out / RUN_CONFIG_NAME}: {exc}") from exc
        return out / RUN_CONFIG_NAME
