import json
import numpy as np
import pytest

from cascade_seg import workflow
from cascade_seg.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_USAGE, resolve_threads, run
from cascade_seg.config import RUN_CONFIG_NAME, RunConfig, apply_overrides, bundled_config_path, default_tree
from cascade_seg.errors import ConfigError, MissingPrediction, UsageError
from cascade_seg.overlay import COLOURS, contour, read_ppm, render_slice
from cascade_seg.phantom import DatasetSplit, PhantomParams, generate_phantom, write_dataset
from cascade_seg.pipeline import PipelineConfig, run_pipeline
from cascade_seg.volume import read_volume, write_volume

from .helpers import IntensityNet


def tiny_tree(root):
    return {
        "seed": 7,
        "paths": {k: str(root / k) for k in ("data", "models", "predictions", "reports", "overlays")},
        "dataset": {"n_cases": 4},
        "phantom": {"shape": [16, 64, 64], "liver_radius_range": [0.4, 0.45],
                   "lesion_radius_range": [4.5, 5.5], "lesion_count_range": [1, 1]},
        "liver_net": {"epochs": 1, "stage_channels": [4, 4, 4, 4]},
        "lesion_net": {"epochs": 1, "stage_channels": [4, 4, 4, 4]},
        "baseline_net": {"epochs": 1, "stage_channels": [4, 4, 4, 4]},
        "detector": {"steps": 4, "channels": [2, 2, 2]},
        "crf": {"max_voxels": 4096, "iterations": 2},
    }


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_tree(tmp_path)))
    return path


# --- configuration ----------------------------------------------------------------

def test_bundled_config_loads():
    cfg = RunConfig.load(bundled_config_path())
    assert len(cfg["dataset"]["case_seeds"]) == cfg["dataset"]["n_cases"] == 40
    assert cfg.phantom_base().shape == (24, 64, 64)


def test_override_parses_json_values():
    tree = apply_overrides(default_tree(), ["pipeline.liver_threshold=0.4", "pipeline.crf=false",
                                            "paths.data=/tmp/x"])
    assert tree["pipeline"]["liver_threshold"] == 0.4
    assert tree["pipeline"]["crf"] is False
    assert tree["paths"]["data"] == "/tmp/x"


@pytest.mark.parametrize("override", ["pipeline.nope=1", "nope.x=1", "pipeline", "=3"])
def test_bad_overrides(override):
    with pytest.raises(ConfigError):
        RunConfig.load(None, [override])


def test_invalid_values_become_config_errors():
    with pytest.raises(ConfigError):
        RunConfig.load(None, ["pipeline.liver_threshold=2"])
    with pytest.raises(ConfigError):
        RunConfig.load(None, ["dataset.case_seeds=[1,2]"])
    with pytest.raises(ConfigError):
        RunConfig.load(None, ["predict.split=holdout"])


def test_unknown_key_in_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"pipelin": {}}))
    with pytest.raises(ConfigError):
        RunConfig.load(p)


def test_threads_resolution():
    assert resolve_threads(3, 2, env={"CASCADE_SEG_THREADS": "5"}) == 3
    assert resolve_threads(None, 2, env={"CASCADE_SEG_THREADS": "5"}) == 2
    assert resolve_threads(None, None, env={"CASCADE_SEG_THREADS": "5"}) == 5
    assert resolve_threads(None, None, env={}) is None
    with pytest.raises(UsageError):
        resolve_threads(None, None, env={"CASCADE_SEG_THREADS": "many"})
    with pytest.raises(UsageError):
        resolve_threads(0, None, env={})


# --- exit codes -------------------------------------------------------------------------

def test_exit_codes(tmp_path, tiny_config, capsys):
    assert run(["gen-data", "--bogus"]) == EXIT_USAGE
    assert run(["gen-data", "--config", str(tiny_config), "--set", "x.y=1"]) == EXIT_CONFIG
    assert run(["gen-data", "--config", str(tmp_path / "missing.json")]) == EXIT_IO
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(["gen-data", "--config", str(bad)]) == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_predict_without_checkpoint_is_config_error(tiny_config):
    assert run(["predict", "--config", str(tiny_config)]) == EXIT_CONFIG


def test_evaluate_without_predictions(tiny_config):
    assert run(["gen-data", "--config", str(tiny_config)]) == EXIT_OK
    with pytest.raises(MissingPrediction):
        workflow.evaluate(RunConfig.load(tiny_config))


# --- workflows ------------------------------------------------------------------------------

def _dir_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_data_is_deterministic(tmp_path, tiny_config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["gen-data", "--config", str(tiny_config), "--out", str(a)]) == EXIT_OK
    assert run(["gen-data", "--config", str(tiny_config), "--out", str(b)]) == EXIT_OK
    files = _dir_bytes(a)
    assert files == _dir_bytes(b)
    assert RUN_CONFIG_NAME in files and "dataset.json" in files
    assert len([f for f in files if f.endswith("_img.raw")]) == 4


def test_run_config_round_trips(tmp_path, tiny_config):
    out = tmp_path / "data"
    assert run(["gen-data", "--config", str(tiny_config), "--set", "seed=9"]) == EXIT_OK
    saved = RunConfig.load(out / RUN_CONFIG_NAME)
    assert saved["seed"] == 9
    assert saved.to_json() == (out / RUN_CONFIG_NAME).read_text()


@pytest.mark.slow
def test_tiny_cli_flow(tmp_path, tiny_config):
    c = str(tiny_config)
    for cmd in ("gen-data", "train-liver", "train-lesion", "train-detector", "predict", "evaluate",
                "ablate", "refine-crf"):
        assert run([cmd, "--config", c]) == EXIT_OK, cmd
    models = tmp_path / "models"
    for name in ("liver", "lesion", "baseline", "detector"):
        assert (models / name / "manifest.json").exists()
    reports = tmp_path / "reports"
    rows = (reports / "ablation.csv").read_text().splitlines()
    assert len(rows) == 5
    ev = json.loads((reports / "evaluation.json").read_text())
    assert len(ev["cases"]) == 1
    net = workflow.load_segnet(models / "liver")
    assert net.context_slices == 3 and net.config.stage_channels == [4, 4, 4, 4]
    assert workflow.load_segnet(models / "baseline").context_slices == 1
    with pytest.raises(Exception):
        workflow.load_detector(models / "liver")


# --- refine-crf and overlay on stored predictions ---------------------------------------

@pytest.fixture
def stub_run(tmp_path):
    """Dataset plus predictions from intensity stubs with the CRF stage disabled."""
    cfg = RunConfig.load(None, [f"paths.{k}=\"{tmp_path / k}\"" for k in ("data", "predictions", "overlays")]
                         + ["predict.split=\"train\"", "overlay.split=\"train\""])
    case = generate_phantom(PhantomParams(noise_sigma=0.0, seed=11), case_id="case000")
    write_dataset(DatasetSplit(train=[case]), cfg.path("data"))
    liver_net, lesion_net = IntensityNet(0.4, 1.0), IntensityNet(0.4, 0.55)
    res = run_pipeline(case.image, liver_net, lesion_net, None, None, PipelineConfig(crf=False))
    pred = cfg.path("predictions")
    pred.mkdir()
    write_volume(res.liver_mask, pred / "case000_liverpred")
    write_volume(res.lesion_prob, pred / "case000_lesionprob")
    write_volume(res.lesion_mask, pred / "case000_lesionpred")
    return cfg, case, (liver_net, lesion_net)


def test_refine_crf_matches_in_pipeline_crf(stub_run):
    cfg, case, (liver_net, lesion_net) = stub_run
    workflow.refine_crf(cfg)
    pred = cfg.path("predictions")
    full = run_pipeline(case.image, liver_net, lesion_net, None, cfg.crf_params(), PipelineConfig(crf=True))
    np.testing.assert_array_equal(read_volume(pred / "case000_lesionprob_crf").data, full.lesion_prob.data)
    np.testing.assert_array_equal(read_volume(pred / "case000_lesionpred_crf").data, full.lesion_mask.data)


def test_refine_crf_leaves_inputs_untouched(stub_run):
    cfg, _, _ = stub_run
    before = _dir_bytes(cfg.path("predictions"))
    workflow.refine_crf(cfg)
    after = _dir_bytes(cfg.path("predictions"))
    assert all(after[k] == v for k, v in before.items())


def test_overlay_writes_one_ppm_per_slice(stub_run):
    cfg, case, _ = stub_run
    out = workflow.overlay(cfg)
    ppms = sorted(out.glob("case000_z*.ppm"))
    assert len(ppms) == case.image.shape[0]
    rgb = read_ppm(ppms[12])
    assert rgb.shape == (64, 64, 3)
    colours = {tuple(c) for c in rgb.reshape(-1, 3)}
    assert COLOURS["lesion_pred"] in colours


def test_overlay_unknown_case(stub_run):
    cfg, _, _ = stub_run
    cfg.tree["overlay"]["cases"] = ["case999"]
    with pytest.raises(ConfigError):
        workflow.overlay(cfg)


def test_contour_of_square():
    m = np.zeros((6, 6))
    m[1:5, 1:5] = 1
    c = contour(m)
    assert c.sum() == 12 and not c[2:4, 2:4].any()


def test_render_draws_boxes_under_contours():
    img = np.zeros((60, 60))
    liver = np.zeros((60, 60))
    liver[0:10, 0:10] = 1
    rgb = render_slice(img, {"liver_gt": liver}, [(0, 0)], box_size=50)
    assert tuple(rgb[0, 0]) == COLOURS["liver_gt"]
    assert tuple(rgb[49, 20]) == COLOURS["detection"]
    assert tuple(rgb[30, 30]) == (0, 0, 0)
