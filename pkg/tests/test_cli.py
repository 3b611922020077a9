import importlib
import inspect
import json
import pkgutil

import pytest
import tomli

import rawseg
from rawseg.cli import main
from rawseg.config import ConfigError, apply_override, build_run_config, load_run_config, read_raw, to_toml
from rawseg.diffcore import AutogradStage, Stage, load_checkpoint
from rawseg.registry import REGISTRY, run_suite

SMALL = ["--set", "network.num_classes=5", "--set", "network.base_width=4", "--set", "network.depth=2",
         "--set", "batch_size=4", "--set", "optics.pupil_samples=32", "--set", "optics.kernel_size=9"]


def test_every_concrete_stage_has_a_gradcheck_fixture():
    classes = set()
    for mod in pkgutil.walk_packages(rawseg.__path__, "rawseg."):
        for _, obj in inspect.getmembers(importlib.import_module(mod.name), inspect.isclass):
            if issubclass(obj, Stage) and obj not in (Stage, AutogradStage) and obj.__module__.startswith("rawseg"):
                classes.add(obj)
    covered = {type(REGISTRY[name](0).stage) for name in REGISTRY}
    assert classes - covered == set()


def test_run_suite_rejects_unknown():
    with pytest.raises(KeyError, match="nosuch"):
        run_suite(["nosuch"], seeds=[0])


# --------------------------------------------------------------------------- config

def test_presets_load():
    for name in ("fixed_sensor", "no_optics", "full_codesign"):
        rc = load_run_config(preset=name)
        assert rc.pipeline.net.num_classes == 5
    fixed = load_run_config(preset="fixed_sensor").pipeline
    assert fixed.lens.is_identity and fixed.cfa_layout == "BAYER_RGGB" and not fixed.sensor_trainable
    assert not load_run_config(preset="no_optics").pipeline.optics_on
    assert load_run_config(preset="full_codesign").pipeline.uses_optics


def test_overrides_and_errors(tmp_path):
    raw = {}
    apply_override(raw, "optics_on=false")
    apply_override(raw, "sensor.bits=8")
    apply_override(raw, "epochs=3")
    assert raw == {"switches": {"optics_on": False}, "sensor": {"bits": 8}, "epochs": 3}
    rc = build_run_config(raw)
    assert rc.pipeline.bits == 8 and not rc.pipeline.optics_on and rc.schedule.total_epochs == 3
    for bad in ("nokey=1", "sensor.nokey=1", "novalue"):
        with pytest.raises(ConfigError):
            apply_override({}, bad)
    with pytest.raises(ConfigError, match="sensor.bits"):
        build_run_config({"sensor": {"bits": "ten"}})
    with pytest.raises(ConfigError, match="not found"):
        read_raw(tmp_path / "missing.toml")
    with pytest.raises(ConfigError, match="cfa_layout"):
        build_run_config({"sensor": {"cfa_layout": "XTRANS"}})


def test_to_toml_round_trips():
    raw = {"epochs": 4, "data": "synthetic:8", "sensor": {"bits": 8, "soft_cfa_selection": True},
           "optics": {"lens": "defocus:1"}}
    assert tomli.loads(to_toml(raw)) == raw


# --------------------------------------------------------------------------- commands

@pytest.fixture(scope="module")
def scenes(tmp_path_factory):
    root = tmp_path_factory.mktemp("scenes")
    assert main(["genscenes", "--n", "4", "--seed", "1", "--out", str(root)]) == 0
    return root


def test_genscenes_refuses_overwrite(scenes):
    assert main(["genscenes", "--n", "2", "--out", str(scenes)]) == 2
    assert len(list((scenes / "images").glob("*.png"))) == 4


def test_genscenes_overwrite(tmp_path):
    assert main(["genscenes", "--n", "3", "--size", "32", "--out", str(tmp_path)]) == 0
    assert main(["genscenes", "--n", "2", "--size", "32", "--overwrite", "--out", str(tmp_path)]) == 0
    assert len(list((tmp_path / "images").glob("*.png"))) == 2


def test_train_eval_render(tmp_path, scenes):
    out = tmp_path / "run"
    assert main(["train", "--preset", "full_codesign", "--data", str(scenes), "--epochs", "2", "--out", str(out)]
                + SMALL) == 0
    for name in ("config.toml", "metrics.csv", "report.csv", "report.png", "summary.json"):
        assert (out / name).exists(), name
    summary = json.loads((out / "summary.json").read_text())
    assert summary["epochs"] == 2
    ck = str(out / "checkpoints" / "epoch_002")
    ev = tmp_path / "eval"
    assert main(["eval", "--config", str(out / "config.toml"), "--checkpoint", ck, "--data", str(scenes),
                 "--bits", "4", "--out", str(ev)]) == 0
    assert json.loads((ev / "report.json").read_text())["bits"] == 4
    rd = tmp_path / "render"
    assert main(["render", "--config", str(out / "config.toml"), "--checkpoint", ck, "--image", "synthetic:3",
                 "--out", str(rd)]) == 0
    names = {p.name for p in (rd / "renders").iterdir()}
    assert {"i_optics.png", "i_exp.png", "raw.png", "raw_quantized.png", "prediction.png"} <= names


def test_optics_off_leaves_no_optics_tensors(tmp_path, scenes):
    out = tmp_path / "run"
    assert main(["train", "--preset", "full_codesign", "--set", "optics_on=false", "--data", str(scenes),
                 "--epochs", "1", "--out", str(out)] + SMALL) == 0
    params, _, _ = load_checkpoint(out / "checkpoints" / "epoch_001")
    assert params.names("optics") == []


def test_corrupt_command(tmp_path, scenes):
    out = tmp_path / "noisy"
    assert main(["corrupt", "--data", str(scenes), "--kind", "noise", "--severity", "0.05,0.01",
                 "--num-classes", "5", "--out", str(out)]) == 0
    assert len(list((out / "images").glob("*.png"))) == 4
    assert main(["corrupt", "--data", str(scenes), "--kind", "blur", "--severity", "1",
                 "--num-classes", "5", "--out", str(out)]) == 2
    assert main(["corrupt", "--data", str(scenes), "--kind", "bitdepth", "--severity", "40",
                 "--num-classes", "5", "--out", str(tmp_path / "x")]) == 2


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path / "o")]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("epochs = 1\nbogus = 3\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "bogus" in capsys.readouterr().err
    assert main(["train", "--preset", "fixed_sensor", "--data", "synthetic:x", "--out", str(tmp_path / "o")]) == 2
    assert main(["nosuchcommand"]) == 2


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "exposure", "quantize", "--seeds", "2"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert main(["gradcheck", "exposure", "--seeds", "1", "--tol", "0"]) == 4
    assert main(["gradcheck", "nosuch"]) == 2
