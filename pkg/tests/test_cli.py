import json
import subprocess
import sys

import pytest
import yaml

from dynagg.cli import main
from dynagg.config import ConfigError, RunConfig, build_split, load_config, parse_config
from dynagg.synthetic import load_clips

SMALL_DATA = {"clips": 3, "frames": 10, "shape": [8, 4, 4]}
BASE = {
    "seed": 1,
    "datasets": [{"split": "train", **SMALL_DATA}, {"split": "eval", **SMALL_DATA}],
    "policies": [
        {"name": "fixed8", "mode": "fixed", "k": 8},
        {"name": "van", "mode": "vanilla", "k": 8},
        {"name": "def", "mode": "deformable", "k": 8},
    ],
    "train": {"steps": 5, "batch_size": 4, "k": 8, "mapping_steps": 5},
}


def write_config(tmp_path, data=None, name="run.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(BASE if data is None else data))
    return str(path)


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_config_defaults_and_types(tmp_path):
    cfg = load_config(write_config(tmp_path))
    assert isinstance(cfg, RunConfig)
    assert cfg.formats == ["csv"] and cfg.workers == 1 and not cfg.oracle
    assert cfg.policies[0].build().name == "fixed8"
    assert cfg.train.build(cfg.seed).k == 8


@pytest.mark.parametrize(
    "patch, field",
    [
        ({"bogus": 1}, "bogus"),
        ({"policies": []}, "policies"),
        ({"policies": [{"mode": "turbo"}]}, "policies.0.mode"),
        ({"policies": [{"mode": "fixed", "k": 0}]}, "policies.0.k"),
        ({"datasets": [{"clips": 2, "speed": "warp"}]}, "datasets.0.speed"),
        ({"train": {"lr": -1}}, "train.lr"),
        ({"seed": -3}, "seed"),
    ],
)
def test_config_errors_name_the_field(patch, field):
    with pytest.raises(ConfigError) as info:
        parse_config({**BASE, **patch})
    assert info.value.path == field


def test_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("policies: [")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_build_split_is_seeded(tmp_path):
    cfg = load_config(write_config(tmp_path))
    a = build_split(cfg, "eval")
    b = build_split(cfg, "eval")
    c = build_split(cfg, "eval", seed=2)
    assert a[0].features.tobytes() == b[0].features.tobytes()
    assert a[0].features.tobytes() != c[0].features.tobytes()
    # the train split draws different clips than the eval split
    assert build_split(cfg, "train")[0].features.tobytes() != a[0].features.tobytes()


def test_generate_then_bench_from_saved_clips(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code, out, _ = run(["generate", "--config", cfg, "--out", str(tmp_path / "g")], capsys)
    assert code == 0
    written = json.loads(out)["written"]
    assert len(load_clips(written["eval"])) == 3
    data = {**BASE, "datasets": [{"split": "eval", "path": written["eval"]}]}
    cfg2 = write_config(tmp_path, data, "saved.yaml")
    code, _, err = run(["bench", "--config", cfg2, "--out", str(tmp_path / "b"), "--oracle"], capsys)
    assert code == 0, err
    code, _, _ = run(["bench", "--config", cfg, "--out", str(tmp_path / "c"), "--oracle"], capsys)
    assert (tmp_path / "b" / "report.csv").read_bytes() == (tmp_path / "c" / "report.csv").read_bytes()


def test_train_bench_sweep_round(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out_dir = str(tmp_path / "run")
    code, out, err = run(["train", "--config", cfg, "--out", out_dir], capsys)
    assert code == 0, err
    assert (tmp_path / "run" / "checkpoint.npz").is_file()
    history = (tmp_path / "run" / "train_history.csv").read_text().splitlines()
    assert history[0] == "step,total,mot_v,mot_d,size,dst" and len(history) == 6

    code, out, err = run(["bench", "--config", cfg, "--out", out_dir, "--format", "csv", "--format", "plot"], capsys)
    assert code == 0, err
    csv_text = (tmp_path / "run" / "report.csv").read_text().splitlines()
    assert csv_text[0] == "policy,mean_frames,multiplies,wall_ms,acc,acc_slow,acc_medium,acc_fast,cos_to_full"
    assert [line.split(",")[0] for line in csv_text[1:]] == ["fixed8", "van", "def"]
    assert (tmp_path / "run" / "report.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    code, _, err = run(["bench", "--config", cfg, "--out", out_dir, "--policy", "van"], capsys)
    assert code == 0, err
    assert len((tmp_path / "run" / "report.csv").read_text().splitlines()) == 2

    code, _, err = run(["sweep", "--config", cfg, "--out", out_dir, "--k", "8"], capsys)
    assert code == 0, err
    rows = (tmp_path / "run" / "sweep.csv").read_text().splitlines()[1:]
    assert len(rows) == 8
    notes = json.loads((tmp_path / "run" / "sweep.json").read_text())["notes"]
    assert "sigma_learnable" in notes


def test_sweep_in_oracle_mode_fits_its_own_mapping(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code, _, err = run(["sweep", "--config", cfg, "--out", str(tmp_path / "s"), "--oracle", "--k", "8"], capsys)
    assert code == 0, err
    notes = json.loads((tmp_path / "s" / "sweep.json").read_text())["notes"]
    assert "mapping_source" in notes


def test_repeats_write_summary(tmp_path, capsys):
    data = {**BASE, "repeats": 3}
    cfg = write_config(tmp_path, data)
    code, _, err = run(["bench", "--config", cfg, "--out", str(tmp_path / "r"), "--oracle"], capsys)
    assert code == 0, err
    lines = (tmp_path / "r" / "report_repeats.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[1].startswith("fixed8,3,")


def _error(err):
    line = err.strip().splitlines()[-1]
    return json.loads(line)


def test_error_lines_are_json(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code, _, err = run(["bench", "--config", cfg, "--out", str(tmp_path / "none")], capsys)
    assert code == 1 and _error(err)["error"] == "checkpoint"

    code, _, err = run(["bench", "--config", cfg, "--checkpoint", str(tmp_path / "missing.npz")], capsys)
    assert code == 1 and _error(err)["error"] == "checkpoint"

    bad = write_config(tmp_path, {**BASE, "extra": True}, "bad.yaml")
    code, _, err = run(["bench", "--config", bad], capsys)
    assert code == 2 and _error(err) == {"error": "config", "field": "extra", "message": "extra: Extra inputs are not permitted"}

    code, _, err = run(["bench", "--config", cfg, "--policy", "nope", "--oracle"], capsys)
    assert code == 2 and _error(err)["field"] == "--policy"

    code, _, err = run(["bench", "--config", cfg, "--seed", "18446744073709551616"], capsys)
    assert code == 2 and _error(err)["error"] == "usage"

    code, _, err = run(["launch"], capsys)
    assert code == 2 and _error(err)["error"] == "usage"


def test_large_seed_accepted(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code, _, err = run(["bench", "--config", cfg, "--out", str(tmp_path / "s"), "--oracle", "--seed", str(2**64 - 1)], capsys)
    assert code == 0, err


def test_gradcheck_command(tmp_path, capsys):
    code, out, _ = run(["gradcheck", "--seeds", "1", "--out", str(tmp_path)], capsys)
    assert code == 0
    payload = json.loads(out)
    assert payload["passed"] and len(payload["max_rel_error"]) == 20
    assert (tmp_path / "gradcheck.json").is_file()
    code, _, err = run(["gradcheck", "--seeds", "1", "--tol", "1e-30"], capsys)
    assert code == 3 and _error(err)["error"] == "gradcheck"


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "dynagg", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("generate", "train", "bench", "gradcheck", "sweep"):
        assert name in proc.stdout
