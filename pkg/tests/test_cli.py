import csv
import json

import numpy as np
import pytest

from mask_adapter.adapter import init_params, load_checkpoint, save_checkpoint
from mask_adapter.cli import EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, main, parse_ensemble
from mask_adapter.config import ConfigError, expand_sweep, load_config, parse_config

TINY = {
    "seed": 3,
    "n_maps": 2,
    "world": {"channels": 8, "image_size": 32, "min_regions": 2, "max_regions": 4},
    "warmup": {"epochs": 1, "steps_per_epoch": 2, "batch_scenes": 2},
    "mixed": {"epochs": 1, "steps_per_epoch": 2, "batch_scenes": 2},
    "eval": {"n_scenes": 3},
}


def write_config(path, body):
    path.write_text(json.dumps(body, indent=2))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "tiny.json", TINY)
    assert main(["train", "--config", str(cfg), "--out", str(root / "run")]) == EXIT_OK
    return root, cfg


def test_parse_config_defaults_and_overrides():
    cfg = parse_config(json.dumps(TINY))
    assert cfg.seed == 3 and cfg.warmup.seed == 3 and cfg.mixed.seed == 3
    assert cfg.world.channels == 8 and cfg.mixed.lambda_cos == 5.0
    assert cfg.eval["n_scenes"] == 3 and cfg.eval["logit_scale"] == 100.0
    assert parse_config("{}").mixed.stage == "mixed"


@pytest.mark.parametrize(
    "text,line",
    [
        ('{\n  "seed": 1,\n  "mixed": {\n    "lamda_cos": 5\n  }\n}', 4),
        ('{\n  "seed": 1,\n  "colour": 2\n}', 3),
        ('{\n  "warmup": {\n    "epochs": "ten"\n  }\n}', 3),
        ('{\n  "seed": 1,\n  "mixed": {"iou_threshold": 1.5}\n}', 3),
        ('{\n  "seed": 1,,\n}', 2),
    ],
)
def test_config_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError) as info:
        parse_config(text, "c.json")
    assert info.value.line == line
    assert f"c.json:{line}:" in str(info.value)


def test_sweep_expansion():
    body = dict(TINY, sweep={"mixed.lambda_cos": [0.0, 5.0], "n_maps": [1, 4]})
    runs = expand_sweep(parse_config(json.dumps(body)))
    assert len(runs) == 4
    assert {(r.mixed.lambda_cos, r.n_maps) for _, r in runs} == {(0.0, 1), (0.0, 4), (5.0, 1), (5.0, 4)}
    with pytest.raises(ConfigError):
        parse_config(json.dumps(dict(TINY, sweep={"mixed.nope": [1]})))


def test_bundled_configs_parse():
    from importlib.resources import files

    names = [p.name for p in files("mask_adapter").joinpath("configs").iterdir() if p.name.endswith(".json")]
    assert "quickstart.json" in names
    for name in names:
        cfg = load_config(files("mask_adapter").joinpath("configs", name))
        assert expand_sweep(cfg)


def test_train_outputs_and_manifest(trained):
    root, _ = trained
    run = root / "run"
    names = {p.name for p in run.iterdir()}
    assert {"warmup.ckpt", "mixed.ckpt", "warmup_log.csv", "mixed_log.csv", "manifest.json", "config.resolved.json"} <= names
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["seed"] == 3
    assert set(manifest["artifacts"]) >= {"warmup.ckpt", "mixed.ckpt"}
    assert load_checkpoint(run / "mixed.ckpt").stage == "mixed"


def test_train_warmup_only(trained, tmp_path):
    _, cfg = trained
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path), "--stage", "warmup"]) == EXIT_OK
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    ckpts = [a for a in manifest["artifacts"] if a.endswith(".ckpt")]
    assert ckpts == ["warmup.ckpt"]
    assert not (tmp_path / "mixed.ckpt").exists()


def test_train_sweep_writes_subdirectories(tmp_path):
    body = dict(TINY, stages="warmup", sweep={"n_maps": [1, 2]})
    body["warmup"] = {"epochs": 1, "steps_per_epoch": 1, "batch_scenes": 1}
    cfg = write_config(tmp_path / "s.json", body)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "out")]) == EXIT_OK
    assert load_checkpoint(tmp_path / "out" / "sweep_00" / "warmup.ckpt").n_maps == 1
    assert load_checkpoint(tmp_path / "out" / "sweep_01" / "warmup.ckpt").n_maps == 2


def test_train_usage_errors(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "seed": 0,\n  "mixed": {\n    "lamda_cos": 5.0\n  }\n}\n')
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "lamda_cos" in err and "bad.json:4:" in err


def test_train_divergence_exit_code(tmp_path):
    body = dict(TINY, stages="warmup")
    body["warmup"] = {"epochs": 1, "steps_per_epoch": 3, "batch_scenes": 1, "optimizer": "sgd",
                      "learning_rate": 1e250, "weight_decay": 0.0}
    cfg = write_config(tmp_path / "d.json", body)
    with np.errstate(all="ignore"):
        code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == EXIT_DIVERGED


def test_eval_all_with_ensemble(trained, tmp_path):
    root, cfg = trained
    args = ["eval", "--checkpoint", str(root / "run" / "mixed.ckpt"), "--config", str(cfg), "--out", str(tmp_path)]
    assert main(args + ["--ensemble", "alpha=0.7", "beta=0.9"]) == EXIT_OK
    for name in ("pool", "crop", "adapter"):
        report = json.loads((tmp_path / f"report_{name}.json").read_text())
        assert 0.0 <= report["mask_acc"] <= 1.0 and report["ensemble"] == "alpha=0.7 beta=0.9"
    with open(tmp_path / "comparison.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["extractor"] for r in rows] == ["pool", "crop", "adapter"]
    assert {"mask_acc", "miou", "miou_s", "miou_u", "ensemble"} <= set(rows[0])


def test_eval_single_extractor_has_no_csv(trained, tmp_path):
    root, cfg = trained
    args = ["eval", "--checkpoint", str(root / "run" / "warmup.ckpt"), "--config", str(cfg),
            "--out", str(tmp_path), "--extractor", "pool"]
    assert main(args) == EXIT_OK
    assert (tmp_path / "report_pool.json").exists() and not (tmp_path / "comparison.csv").exists()


def test_eval_usage_errors(trained, tmp_path):
    root, cfg = trained
    missing = ["eval", "--checkpoint", str(tmp_path / "nope.ckpt"), "--config", str(cfg), "--out", str(tmp_path)]
    assert main(missing) == EXIT_USAGE
    wide = tmp_path / "wide.ckpt"
    save_checkpoint(wide, init_params(16, 2, 0))
    assert main(["eval", "--checkpoint", str(wide), "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_USAGE
    garbage = tmp_path / "garbage.ckpt"
    garbage.write_bytes(b"\x00\x01")
    assert main(["eval", "--checkpoint", str(garbage), "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_USAGE
    ok = ["eval", "--checkpoint", str(root / "run" / "mixed.ckpt"), "--config", str(cfg), "--out", str(tmp_path)]
    assert main(ok + ["--ensemble", "alpha=0.7", "gamma=0.9"]) == EXIT_USAGE


def test_parse_ensemble():
    assert parse_ensemble(["beta=0.9", "alpha=0.7"]) == (0.7, 0.9)


def test_visualize_files_and_determinism(trained, tmp_path):
    root, _ = trained
    ckpt = str(root / "run" / "mixed.ckpt")
    assert main(["visualize", "--checkpoint", ckpt, "--scene-seed", "4", "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["visualize", "--checkpoint", ckpt, "--scene-seed", "4", "--out", str(tmp_path / "b")]) == EXIT_OK
    files = sorted(p.name for p in (tmp_path / "a").iterdir() if p.suffix == ".pgm")
    n_masks = sum(name.endswith("_overlay.pgm") for name in files)
    assert n_masks >= 1 and len(files) == n_masks * (2 + 1)
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / files[0]).read_bytes()[:2] == b"P5"


def test_visualize_single_map_checkpoint(tmp_path):
    ckpt = tmp_path / "k1.ckpt"
    save_checkpoint(ckpt, init_params(16, 1, 0))
    assert main(["visualize", "--checkpoint", str(ckpt), "--out", str(tmp_path / "v")]) == EXIT_OK
    files = [p.name for p in (tmp_path / "v").iterdir() if p.suffix == ".pgm"]
    assert all("map01" not in f for f in files)
