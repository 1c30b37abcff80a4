import json

import numpy as np
import pytest

from tofsim import tensorio
from tofsim.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main

KINECT = {"frequencies_hz": [16e6, 80e6, 120e6], "phases": 3, "resolution": [16, 20]}


def write_config(tmp_path, name="run.json", **over):
    (tmp_path / "cam.json").write_text(json.dumps(KINECT))
    cfg = {"camera": "cam.json", "scene": {"type": "single_bounce", "ramp": [1.0, 6.0]},
           "pipeline": "lf2", "output_dir": "out", "seed": 1}
    cfg.update(over)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def report(out):
    return json.loads((out / "report.json").read_text())["records"][0]


def test_generate_corner(tmp_path):
    path = write_config(tmp_path, scene={"type": "corner", "patches": 16})
    assert main(["generate", "--config", str(path)]) == EXIT_OK
    names = {p.name for p in (tmp_path / "out").iterdir()}
    assert names == {"manifest.json", "raw_frames.toft", "scene_response.toft",
                     "truth_depth.toft"}
    frames = tensorio.load(tmp_path / "out" / "raw_frames.toft", tensorio.RAW_FRAMES)
    assert frames.data.shape == (9, 16, 20)


def test_missing_camera_leaves_nothing(tmp_path, capsys):
    path = write_config(tmp_path, camera="absent.json")
    assert main(["generate", "--config", str(path)]) == EXIT_CONFIG
    assert "absent.json" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()
    assert [p.name for p in tmp_path.iterdir() if p.name.startswith(".")] == []


def test_bad_json_and_missing_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["generate", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["generate", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG


def test_io_error(tmp_path):
    path = write_config(tmp_path)
    (tmp_path / "blocker").write_text("file, not a directory")
    assert main(["generate", "--config", str(path), "--out",
                 str(tmp_path / "blocker" / "out")]) == EXIT_IO


def test_rerun_is_byte_identical(tmp_path):
    noise = [{"op": "vignetting", "strength": 0.3},
             {"op": "noise", "synthetic": {"levels": [-3, 3], "gain": 1e-4}}]
    path = write_config(tmp_path, scene={"type": "corner", "patches": 16}, augment=noise)
    assert main(["generate", "--config", str(path), "--out", str(tmp_path / "a")]) == 0
    assert main(["generate", "--config", str(path), "--out", str(tmp_path / "b"),
                 "--threads", "3"]) == 0
    for name in ["raw_frames.toft", "scene_response.toft", "manifest.json"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 1 and manifest["noise_seeds"] == [1]
    assert main(["generate", "--config", str(path), "--out", str(tmp_path / "c"),
                 "--seed", "9"]) == 0
    assert (tmp_path / "c" / "raw_frames.toft").read_bytes() != \
        (tmp_path / "a" / "raw_frames.toft").read_bytes()


def test_lf2_round_trip_report(tmp_path, capsys):
    path = write_config(tmp_path)
    assert main(["reconstruct", "--config", str(path)]) == EXIT_OK
    rec = report(tmp_path / "out")
    assert abs(rec["median_cm"]) < 1e-4
    assert rec["density_pct"] == 100.0
    assert "lf2" in capsys.readouterr().out


def test_unknown_pipeline(tmp_path, capsys):
    path = write_config(tmp_path, pipeline="foo")
    assert main(["reconstruct", "--config", str(path)]) != EXIT_OK
    err = capsys.readouterr().err
    assert all(name in err for name in ["lf2", "lf2star", "phasor", "onebounce+lf2star"])
    assert not (tmp_path / "out").exists()


def test_phasor_range_exclusion(tmp_path):
    cam = {"frequencies_hz": [1063.3e6, 1034.1e6], "phases": 3, "resolution": [4, 50]}
    path = write_config(tmp_path, camera=cam, pipeline="phasor", eval_range=[1.0, 6.0],
                        pipeline_options={"bilateral": False})
    assert main(["reconstruct", "--config", str(path)]) == EXIT_OK
    rec = report(tmp_path / "out")
    ramp = np.linspace(1.0, 6.0, 50)
    expected = 100 * np.mean((ramp >= 1.5) & (ramp <= 5.0))
    assert rec["density_pct"] == pytest.approx(expected, abs=100 / 50 + 1e-9)
    assert rec["density_pct"] < 100


def test_reconstruct_from_generated_tensors(tmp_path):
    path = write_config(tmp_path)
    assert main(["generate", "--config", str(path), "--out", str(tmp_path / "gen")]) == 0
    path2 = write_config(tmp_path, name="rec.json", output_dir="rec",
                         scene={"type": "tensor", "frames": "gen/raw_frames.toft",
                                "truth": "gen/truth_depth.toft"})
    assert main(["reconstruct", "--config", str(path2)]) == EXIT_OK
    assert abs(report(tmp_path / "rec")["median_cm"]) < 1e-3


def test_augment_order_enforced(tmp_path):
    path = write_config(tmp_path, augment=[{"op": "gain", "value": 0.5},
                                           {"op": "delay", "seconds": 5e-11}])
    assert main(["generate", "--config", str(path)]) == EXIT_CONFIG
