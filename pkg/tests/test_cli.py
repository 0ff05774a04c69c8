import json

import numpy as np
import pytest

from flowattack import cli
from flowattack.data import FlowField, read_image, write_flo

TINY_DATA = {"start": 0, "count": 4, "scene": {"height": 32, "width": 64}}
TINY_TRAIN = {
    "variant": "flownetc_mini",
    "spec": {"channel_scale": 0.25, "redirect_channels": 8, "max_displacement": 2},
    "dataset": TINY_DATA,
    "train": {"iterations": 2, "precision": "f64", "crop": None, "batch_size": 2,
              "mean_samples": 4, "log_every": 1},
}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_json(root / "train.json", TINY_TRAIN)
    assert cli.run(["train", "--config", cfg, "--out", str(root / "train")]) == 0
    return root


def test_rf_prints_value(capsys):
    assert cli.run(["rf", "--kernel", "5", "--convs", "1"]) == 0
    assert capsys.readouterr().out.strip() == "31"


def test_render_zero_flow_is_white(tmp_path):
    write_flo(tmp_path / "z.flo", FlowField(np.zeros((4, 6)), np.zeros((4, 6))))
    assert cli.run(["render", str(tmp_path / "z.flo"), "--out", str(tmp_path / "z.png")]) == 0
    img = read_image(tmp_path / "z.png")
    assert img.shape == (4, 6, 3) and np.all(img == 255)


def test_render_bad_file_is_format_error(tmp_path, capsys):
    (tmp_path / "bad.flo").write_bytes(b"nope")
    assert cli.run(["render", str(tmp_path / "bad.flo")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: format:") and err.count("\n") == 1


def test_unknown_config_key(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"bogus": 1})
    assert cli.run(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: config:") and "bogus" in err and err.count("\n") == 1


def test_bad_schema_version(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"schema_version": 9})
    assert cli.run(["eval-mmd", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    assert "schema_version" in capsys.readouterr().err


def test_missing_checkpoint_is_reported(tmp_path, capsys):
    assert cli.run(["attack-fgsm", "--out", str(tmp_path / "o")]) == 1
    assert capsys.readouterr().err.startswith("error: config:")


def test_flags_override_config(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"stride": 4})
    resolved = cli.resolve_config("eval-heatmap", cfg, {"stride": 8, "seed": None})
    assert resolved["stride"] == 8 and resolved["seed"] == 0 and resolved["schema_version"] == 1


def test_train_writes_outputs(tiny_run):
    out = tiny_run / "train"
    assert (out / "model.ckpt").exists()
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss,epe" and len(lines) == 3
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["train"]["iterations"] == 2 and resolved["dataset"]["count"] == 4


def test_train_is_deterministic(tiny_run):
    cfg = str(tiny_run / "train.json")
    assert cli.run(["train", "--config", cfg, "--out", str(tiny_run / "again")]) == 0
    assert (tiny_run / "again" / "metrics.csv").read_bytes() == \
        (tiny_run / "train" / "metrics.csv").read_bytes()
    assert (tiny_run / "again" / "model.ckpt").read_bytes() == \
        (tiny_run / "train" / "model.ckpt").read_bytes()


def test_attack_and_eval_pipeline(tiny_run):
    ckpt = str(tiny_run / "train" / "model.ckpt")
    data = {"dataset": TINY_DATA}
    patch_cfg = write_json(tiny_run / "patch.json",
                           {**data, "attack": {"size": 12, "iterations": 2, "locations_per_step": 2}})
    out = tiny_run / "patch"
    assert cli.run(["attack-patch", "--config", patch_cfg, "--checkpoint", ckpt, "--out", str(out)]) == 0
    patch = out / "patch.png"
    assert patch.exists() and patch.with_suffix(".json").exists()

    hm_cfg = write_json(tiny_run / "hm.json", {**data, "stride": 16})
    for extra, name in (([], "hm"), (["--moving"], "hm_moving")):
        assert cli.run(["eval-heatmap", "--config", hm_cfg, "--checkpoint", ckpt, "--patch", str(patch),
                        "--out", str(tiny_run / name), *extra]) == 0
        report = json.loads((tiny_run / name / "report.json").read_text())
        assert report["best"] <= report["median"] <= report["worst"]

    assert cli.run(["eval-mmd", "--config", write_json(tiny_run / "m.json", data), "--checkpoint", ckpt,
                    "--patch", str(patch), "--out", str(tiny_run / "mmd")]) == 0
    assert cli.run(["eval-replace", "--config", write_json(tiny_run / "r.json", data), "--checkpoint",
                    ckpt, "--patch", str(patch), "--out", str(tiny_run / "rep")]) == 0
    fg = write_json(tiny_run / "f.json", {"dataset": {**TINY_DATA, "count": 1}, "epsilons": [0.01],
                                          "iterations": 1})
    assert cli.run(["attack-fgsm", "--config", fg, "--checkpoint", ckpt, "--out", str(tiny_run / "fg")]) == 0


def test_stripes_sweep(tiny_run):
    ckpt = str(tiny_run / "train" / "model.ckpt")
    cfg = write_json(tiny_run / "s.json", {"dataset": {**TINY_DATA, "count": 1}, "stride": 20,
                                           "stripes": {"size": 12}, "sweep": {"stripe_width": [1, 3]}})
    out = tiny_run / "stripes"
    assert cli.run(["attack-stripes", "--config", cfg, "--checkpoint", ckpt, "--out", str(out)]) == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert len(lines) == 3
