import json
import shutil

import numpy as np
import pytest

from crowdcount import checkpoint as CK, cli, data as Dt
from crowdcount.tensor import save_tensor


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    code = cli.main(["synth", "--out", str(root), "--seed", "3", "--set", "synth_frames=30",
                     "--set", "synth_height=12", "--set", "synth_width=12", "--set", 'synth_train="0-19"'])
    assert code == 0
    return root


def write_cfg(path, scene_dir, **extra):
    kv = {"dataset": str(scene_dir / "scene.dataset"), "layer_channels": [3], "kernel": 3,
          "patch_size": 12, "epochs": 2, "clip_len": 5}
    kv.update(extra)
    path.write_text(Dt.format_kv(kv))
    return str(path)


def test_synth_writes_dataset(scene_dir):
    assert len(list((scene_dir / "frames").glob("*.png"))) == 30
    spec = Dt.DatasetSpec.from_file(scene_dir / "scene.dataset")
    ds = Dt.open_dataset(spec)
    assert len(ds.indices("train")) == 20 and len(ds.indices("test")) == 10
    manifest = json.loads((scene_dir / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["command"] == "synth"


def test_gradcheck_passes(tmp_path, capsys):
    code = cli.main(["gradcheck", "--out", str(tmp_path), "--set", "gradcheck_samples=4",
                     "--set", "gradcheck_channels=[3, 2]", "--set", "gradcheck_size=5"])
    assert code == 0
    assert capsys.readouterr().out.startswith("PASS max_rel_err<0.0001")
    assert json.loads((tmp_path / "metrics.json").read_text())["passed"] is True


def test_train_is_deterministic(tmp_path, scene_dir):
    cfg = write_cfg(tmp_path / "run.cfg", scene_dir)
    for name in ("a", "b"):
        assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "loss_log.csv").read_bytes() == (tmp_path / "b" / "loss_log.csv").read_bytes()
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
    ck = CK.load(tmp_path / "a" / "model.cfck")
    assert ck.config.layer_channels == [3] and ck.adam.step == 2 * 4


def test_flags_override_config(tmp_path, scene_dir):
    cfg = write_cfg(tmp_path / "run.cfg", scene_dir, epochs=3)
    assert cli.main(["train", "--config", cfg, "--set", "epochs=2", "--epochs", "1",
                     "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "metrics.json").read_text())["epochs_run"] == 1


def test_eval_of_echoed_ground_truth_is_exact(tmp_path, scene_dir):
    ds = Dt.open_dataset(Dt.DatasetSpec.from_file(scene_dir / "scene.dataset"))
    pred = tmp_path / "pred"
    pred.mkdir()
    for i in ds.indices("test"):
        save_tensor(pred / f"pred_{i:06d}.cftn", ds.density(i, dtype=np.float64))
    cfg = write_cfg(tmp_path / "run.cfg", scene_dir)
    assert cli.main(["eval", "--config", cfg, "--predictions", str(pred), "--out", str(tmp_path / "e")]) == 0
    metrics = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert metrics["frames"] == 10
    assert metrics["mae"] < 1e-9


def test_eval_and_predict_from_checkpoint(tmp_path, scene_dir):
    cfg = write_cfg(tmp_path / "run.cfg", scene_dir)
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "t")]) == 0
    ck = str(tmp_path / "t" / "model.cfck")
    assert cli.main(["eval", "--config", cfg, "--checkpoint", ck, "--save-predictions",
                     "--out", str(tmp_path / "e")]) == 0
    assert len(list((tmp_path / "e" / "predictions").glob("pred_*.cftn"))) == 10
    frames = sorted(str(p) for p in (scene_dir / "frames").glob("*.png"))[:4]
    assert cli.main(["predict", "--checkpoint", ck, "--out", str(tmp_path / "p"), *frames]) == 0
    assert len(list((tmp_path / "p").glob("pred_*.cftn"))) == 4


def test_transfer_reports(tmp_path, scene_dir):
    cfg = write_cfg(tmp_path / "run.cfg", scene_dir, target_dataset=str(scene_dir / "scene.dataset"),
                    adapt_frames=10, adapt_epochs=1)
    assert cli.main(["transfer", "--config", cfg, "--out", str(tmp_path / "x")]) == 0
    metrics = json.loads((tmp_path / "x" / "metrics.json").read_text())
    assert {"pre_mae", "post_mae"} <= set(metrics)
    assert (tmp_path / "x" / "pre.csv").exists() and (tmp_path / "x" / "adapted.cfck").exists()


def test_unknown_key_exits_1(tmp_path, scene_dir, capsys):
    cfg = write_cfg(tmp_path / "run.cfg", scene_dir, colour=1)
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("error: config:") and "colour" in err
    assert not (tmp_path / "o").exists()


def test_bad_value_type_exits_1(tmp_path, capsys):
    assert cli.main(["gradcheck", "--set", 'epochs="many"', "--out", str(tmp_path)]) == 1


def test_missing_files_exit_2(tmp_path, scene_dir, capsys):
    cfg = write_cfg(tmp_path / "run.cfg", scene_dir)
    assert cli.main(["eval", "--config", cfg, "--checkpoint", str(tmp_path / "nope.cfck"),
                     "--out", str(tmp_path / "o")]) == 2
    assert capsys.readouterr().err.count("\n") == 1
    assert cli.main(["train", "--dataset", str(tmp_path / "missing.dataset"), "--out", str(tmp_path / "o")]) == 2


def test_corrupt_annotations_exit_2(tmp_path, scene_dir, capsys):
    copy = tmp_path / "scene"
    shutil.copytree(scene_dir, copy)
    (copy / "annotations.csv").write_text("frame,x,y\n0,1,1\n2,oops,3\n")
    cfg = write_cfg(tmp_path / "run.cfg", copy)
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "annotations.csv:3" in capsys.readouterr().err


def test_nan_loss_exits_3(tmp_path, scene_dir, capsys):
    cfg = write_cfg(tmp_path / "run.cfg", scene_dir, target_dataset=str(scene_dir / "scene.dataset"),
                    adapt_frames=10, adapt_epochs=1)
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "t")]) == 0
    ck = CK.load(tmp_path / "t" / "model.cfck")
    ck.params["head.b"] = np.array([np.nan], dtype=np.float32)
    CK.save(tmp_path / "nan.cfck", ck)
    code = cli.main(["transfer", "--config", cfg, "--checkpoint", str(tmp_path / "nan.cfck"),
                     "--out", str(tmp_path / "x")])
    assert code == 3
    assert capsys.readouterr().err.startswith("error: numerical:")


def test_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "zero")
    assert cli.main(["gradcheck", "--out", str(tmp_path), "--set", "gradcheck_samples=1"]) == 1
    monkeypatch.setenv(cli.THREADS_ENV, "1")
    assert cli.main(["--threads", "1", "gradcheck", "--out", str(tmp_path), "--set", "gradcheck_samples=2",
                     "--set", "gradcheck_channels=[2]", "--set", "gradcheck_size=4"]) == 0
