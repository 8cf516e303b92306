"""Dice scoring, per-case/global aggregation and the four-row ablation report."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import MissingPrediction, ShapeError
from .volume import Volume

ABLATION_ROWS = (
    "Segmentation-only baseline",
    "Segmentation-only 3-i/o + BP in liver",
    "Segmentation-only 3-i/o + BP in liver + Detector",
    "Segmentation-only 3-i/o + BP in liver + Detector + 3D-CRF",
)


def _binary(m):
    return np.asarray(m.data if isinstance(m, Volume) else m) > 0.5


def confusion(pred, gt) -> tuple[int, int, int]:
    p, g = _binary(pred), _binary(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
    tp = int(np.count_nonzero(p & g))
    return tp, int(np.count_nonzero(p)) - tp, int(np.count_nonzero(g)) - tp


def dice_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def dice(pred, gt) -> float:
    """2|P & G| / (|P| + |G|); 1 when both are empty."""
    return dice_from_counts(*confusion(pred, gt))


def precision_from_counts(tp: int, fp: int) -> float:
    return 1.0 if tp + fp == 0 else tp / (tp + fp)


@dataclass
class CaseScore:
    case_id: str
    dice_liver: float
    dice_lesion: float
    liver_counts: tuple[int, int, int]   # TP, FP, FN
    lesion_counts: tuple[int, int, int]


def score_case(case_id, liver_pred, liver_gt, lesion_pred, lesion_gt) -> CaseScore:
    lc = confusion(liver_pred, liver_gt)
    sc = confusion(lesion_pred, lesion_gt)
    return CaseScore(case_id, dice_from_counts(*lc), dice_from_counts(*sc), lc, sc)


def evaluate_cases(cases, predictions: dict) -> list[CaseScore]:
    """``predictions[case_id]`` holds ``(liver_mask, lesion_mask)``."""
    scores = []
    for case in cases:
        if case.case_id not in predictions:
            raise MissingPrediction(case.case_id)
        liver_pred, lesion_pred = predictions[case.case_id]
        scores.append(score_case(case.case_id, liver_pred, case.liver, lesion_pred, case.lesion))
    return scores


@dataclass
class Aggregate:
    mean_dice_liver: float
    mean_dice_lesion: float
    global_dice_liver: float
    global_dice_lesion: float
    lesion_counts: tuple[int, int, int]

    @property
    def lesion_precision(self) -> float:
        tp, fp, _ = self.lesion_counts
        return precision_from_counts(tp, fp)


def aggregate(scores: list[CaseScore]) -> Aggregate:
    """Mean of per-case Dice, and Dice from TP/FP/FN pooled over all cases."""
    if not scores:
        raise MissingPrediction("no case scores to aggregate")
    liver = tuple(int(sum(s.liver_counts[k] for s in scores)) for k in range(3))
    lesion = tuple(int(sum(s.lesion_counts[k] for s in scores)) for k in range(3))
    return Aggregate(
        mean_dice_liver=float(np.mean([s.dice_liver for s in scores])),
        mean_dice_lesion=float(np.mean([s.dice_lesion for s in scores])),
        global_dice_liver=dice_from_counts(*liver),
        global_dice_lesion=dice_from_counts(*lesion),
        lesion_counts=lesion,
    )


@dataclass
class AblationRow:
    config_name: str
    summary: Aggregate
    scores: list[CaseScore] = field(default_factory=list)


@dataclass
class AblationReport:
    rows: list[AblationRow]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config", "mean_dice_liver", "mean_dice_lesion", "global_dice_lesion"])
        for r in self.rows:
            s = r.summary
            w.writerow([r.config_name, f"{s.mean_dice_liver:.6f}", f"{s.mean_dice_lesion:.6f}",
                        f"{s.global_dice_lesion:.6f}"])
        return buf.getvalue()

    def to_json(self) -> str:
        rows = []
        for r in self.rows:
            d = asdict(r.summary)
            d["lesion_precision"] = r.summary.lesion_precision
            rows.append({"config": r.config_name, "summary": d,
                         "cases": [asdict(s) for s in r.scores]})
        return json.dumps({"rows": rows}, indent=1)

    def table(self) -> str:
        width = max(len(r.config_name) for r in self.rows)
        lines = [f"{'config':<{width}}  liver  lesion  lesion(global)  precision"]
        for r in self.rows:
            s = r.summary
            lines.append(f"{r.config_name:<{width}}  {s.mean_dice_liver:.3f}  {s.mean_dice_lesion:.3f}"
                         f"   {s.global_dice_lesion:.3f}           {s.lesion_precision:.3f}")
        return "\n".join(lines)


@dataclass(frozen=True)
class AblationConfig:
    name: str
    lesion_net: str  # "baseline" or "full"
    detector: bool
    crf: bool


DEFAULT_ABLATION = (
    AblationConfig(ABLATION_ROWS[0], "baseline", False, False),
    AblationConfig(ABLATION_ROWS[1], "full", False, False),
    AblationConfig(ABLATION_ROWS[2], "full", True, False),
    AblationConfig(ABLATION_ROWS[3], "full", True, True),
)


def ablation_run(cases, models: dict, configs=DEFAULT_ABLATION, pipeline_cfg=None,
                 crf_params=None, on_case=None) -> AblationReport:
    """Run the cascade once per configuration, toggling only stages and lesion net.

    ``models`` maps "liver", "baseline", "full" and "detector" to trained nets.
    """
    from dataclasses import replace

    from .pipeline import PipelineConfig, run_pipeline

    base = pipeline_cfg or PipelineConfig()
    rows = []
    for conf in configs:
        cfg = replace(base, detector=conf.detector, crf=conf.crf)
        preds = {}
        for case in cases:
            res = run_pipeline(case.image, models["liver"], models[conf.lesion_net],
                               models.get("detector"), crf_params, cfg)
            preds[case.case_id] = (res.liver_mask, res.lesion_mask)
            if on_case is not None:
                on_case(conf, case, res)
        scores = evaluate_cases(cases, preds)
        rows.append(AblationRow(conf.name, aggregate(scores), scores))
    return AblationReport(rows)
